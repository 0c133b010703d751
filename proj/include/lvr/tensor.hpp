#pragma once

// Dense double-precision tensors plus a replayable reverse-mode tape.
//
// A Tensor is a cheap handle: copies share the underlying value/gradient
// buffers. Operations that should participate in backpropagation take a
// Tape*; passing nullptr runs the same forward arithmetic without recording
// anything. The tape is a flat list of backward closures that is traversed
// exactly once, in reverse order of recording.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lvr {

struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;  // null unless gradients are tracked

    Tensor() = default;

    static Tensor zeros(std::vector<int> shp) {
        Tensor t;
        t.shape = std::move(shp);
        t.data = std::make_shared<std::vector<double>>(count(t.shape), 0.0);
        return t;
    }

    static Tensor full(std::vector<int> shp, double v) {
        Tensor t = zeros(std::move(shp));
        std::fill(t.data->begin(), t.data->end(), v);
        return t;
    }

    static Tensor from(std::vector<int> shp, std::vector<double> values) {
        if (count(shp) != values.size()) {
            throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(shp));
        }
        Tensor t;
        t.shape = std::move(shp);
        t.data = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    // Allocates (or keeps) a same-shape gradient accumulator.
    Tensor& require_grad() {
        if (!grad) grad = std::make_shared<std::vector<double>>(numel(), 0.0);
        return *this;
    }

    bool tracked() const { return grad != nullptr; }

    size_t numel() const { return data ? data->size() : 0; }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }
    bool is_scalar() const { return numel() == 1; }

    double value() const {
        if (!is_scalar()) throw std::invalid_argument("Tensor::value: not a scalar, shape " + shape_str(shape));
        return (*data)[0];
    }

    double& at(int r, int c) { return (*data)[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return (*data)[static_cast<size_t>(r) * cols() + c]; }

    double* ptr() { return data->data(); }
    const double* ptr() const { return data->data(); }
    double* gptr() { return grad->data(); }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    }

    // Deep value copy with no gradient tracking. Used to stop gradients.
    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<double>>(*data);
        return t;
    }

    static size_t count(const std::vector<int>& shp) {
        size_t n = 1;
        for (int d : shp) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension in shape " + shape_str(shp));
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shp) {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shp.size(); ++i) os << (i ? "x" : "") << shp[i];
        os << ")";
        return os.str();
    }
};

inline bool all_finite(const Tensor& t) {
    for (double v : *t.data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// Ordered record of backward closures. One backward pass per tape; a second
// plain call is rejected rather than silently double-accumulating. For
// multi-branch objectives, backward_branch() clears the gradients of every
// tape-created intermediate and sweeps again from a different scalar, so
// each branch's contribution lands in the leaf accumulators exactly once.
class Tape {
public:
    void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

    // Registers an op output's gradient buffer so branch sweeps can reset it.
    void note_intermediate(const std::shared_ptr<std::vector<double>>& grad) {
        intermediates_.push_back(grad);
    }

    size_t size() const { return steps_.size(); }

    void backward(Tensor& loss) {
        if (consumed_) throw std::runtime_error("Tape::backward: tape already consumed");
        consumed_ = true;
        sweep(loss);
    }

    void backward_branch(Tensor& loss) {
        if (!consumed_) throw std::runtime_error("Tape::backward_branch: call backward first");
        for (auto& g : intermediates_) std::fill(g->begin(), g->end(), 0.0);
        sweep(loss);
    }

private:
    void sweep(Tensor& loss) {
        if (!loss.is_scalar()) {
            throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " +
                                        Tensor::shape_str(loss.shape));
        }
        if (!loss.tracked()) throw std::invalid_argument("Tape::backward: loss is not tracked");
        (*loss.grad)[0] += 1.0;
        for (size_t i = steps_.size(); i-- > 0;) steps_[i]();
    }

    std::vector<std::function<void()>> steps_;
    std::vector<std::shared_ptr<std::vector<double>>> intermediates_;
    bool consumed_ = false;
};

namespace detail {

inline void track_out(Tape* tape, Tensor& out) {
    out.require_grad();
    tape->note_intermediate(out.grad);
}

inline bool want_grad(Tape* tape, std::initializer_list<const Tensor*> ins) {
    if (!tape) return false;
    for (const Tensor* t : ins) {
        if (t->tracked()) return true;
    }
    return false;
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.shape.size() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got shape " +
                                    Tensor::shape_str(t.shape));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + Tensor::shape_str(a.shape) +
                                    " vs " + Tensor::shape_str(b.shape));
    }
}

}  // namespace detail

// Numerically-shifted softmax of one contiguous row. Shared by the tape op
// and by decode-time sampling so both produce bitwise-identical values.
inline void softmax_row_inplace(double* x, int n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, x[i]);
    if (!std::isfinite(mx)) throw std::invalid_argument("softmax: row has no finite entries");
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    for (int i = 0; i < n; ++i) x[i] /= sum;
}

inline Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.shape[1] != b.shape[0]) {
        throw std::invalid_argument("matmul: inner dimensions differ " + Tensor::shape_str(a.shape) +
                                    " vs " + Tensor::shape_str(b.shape));
    }
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.ptr();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            double* orow = po + i * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (detail::want_grad(tape, {&a, &b})) {
        detail::track_out(tape, out);
        tape->record([a, b, out, m, k, n]() {
            const double* g = out.grad->data();
            if (a.tracked()) {
                double* ga = a.grad->data();
                const double* pb2 = b.ptr();
                for (int i = 0; i < m; ++i) {
                    for (int kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        const double* brow = pb2 + kk * n;
                        const double* grow = g + i * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + kk] += acc;
                    }
                }
            }
            if (b.tracked()) {
                double* gb = b.grad->data();
                const double* pa2 = a.ptr();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    for (int kk = 0; kk < k; ++kk) {
                        const double av = pa2[i * k + kk];
                        if (av == 0.0) continue;
                        double* gbrow = gb + kk * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    detail::require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
    if (detail::want_grad(tape, {&a, &b})) {
        detail::track_out(tape, out);
        tape->record([a, b, out]() {
            const auto& g = *out.grad;
            if (a.tracked()) {
                for (size_t i = 0; i < g.size(); ++i) (*a.grad)[i] += g[i];
            }
            if (b.tracked()) {
                for (size_t i = 0; i < g.size(); ++i) (*b.grad)[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
    if (detail::want_grad(tape, {&a, &b})) {
        detail::track_out(tape, out);
        tape->record([a, b, out]() {
            const auto& g = *out.grad;
            if (a.tracked()) {
                for (size_t i = 0; i < g.size(); ++i) (*a.grad)[i] += g[i];
            }
            if (b.tracked()) {
                for (size_t i = 0; i < g.size(); ++i) (*b.grad)[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
    if (detail::want_grad(tape, {&a, &b})) {
        detail::track_out(tape, out);
        tape->record([a, b, out]() {
            const auto& g = *out.grad;
            if (a.tracked()) {
                for (size_t i = 0; i < g.size(); ++i) (*a.grad)[i] += g[i] * (*b.data)[i];
            }
            if (b.tracked()) {
                for (size_t i = 0; i < g.size(); ++i) (*b.grad)[i] += g[i] * (*a.data)[i];
            }
        });
    }
    return out;
}

// Adds a 1xN row vector to every row of an MxN matrix.
inline Tensor add_row(const Tensor& a, const Tensor& row, Tape* tape) {
    detail::require_2d(a, "add_row");
    if (row.numel() != static_cast<size_t>(a.shape[1])) {
        throw std::invalid_argument("add_row: row length " + Tensor::shape_str(row.shape) +
                                    " does not match " + Tensor::shape_str(a.shape));
    }
    const int m = a.shape[0], n = a.shape[1];
    Tensor out = Tensor::zeros(a.shape);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) + (*row.data)[j];
    }
    if (detail::want_grad(tape, {&a, &row})) {
        detail::track_out(tape, out);
        tape->record([a, row, out, m, n]() {
            const double* g = out.grad->data();
            if (a.tracked()) {
                for (size_t i = 0; i < a.numel(); ++i) (*a.grad)[i] += g[i];
            }
            if (row.tracked()) {
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) (*row.grad)[j] += g[i * n + j];
                }
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] * c;
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out, c]() {
            for (size_t i = 0; i < a.numel(); ++i) (*a.grad)[i] += c * (*out.grad)[i];
        });
    }
    return out;
}

// Elementwise division by a constant. Kept distinct from scale(a, 1/c):
// IEEE division x/x is exactly 1, which the ratio identities rely on.
inline Tensor divide(const Tensor& a, double c, Tape* tape) {
    if (c == 0.0) throw std::invalid_argument("divide: division by zero");
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] / c;
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out, c]() {
            for (size_t i = 0; i < a.numel(); ++i) (*a.grad)[i] += (*out.grad)[i] / c;
        });
    }
    return out;
}

inline Tensor softmax_rows(const Tensor& a, Tape* tape) {
    detail::require_2d(a, "softmax_rows");
    const int m = a.shape[0], n = a.shape[1];
    if (n == 0) throw std::invalid_argument("softmax_rows: zero-width rows");
    Tensor out = Tensor::zeros(a.shape);
    std::copy(a.data->begin(), a.data->end(), out.data->begin());
    for (int i = 0; i < m; ++i) softmax_row_inplace(out.ptr() + i * n, n);
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out, m, n]() {
            const double* p = out.ptr();
            const double* g = out.grad->data();
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
                for (int j = 0; j < n; ++j) (*a.grad)[i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }
    return out;
}

// Row-wise normalization to zero mean and unit variance (no affine part).
inline Tensor layer_norm_rows(const Tensor& a, double eps, Tape* tape) {
    detail::require_2d(a, "layer_norm_rows");
    const int m = a.shape[0], n = a.shape[1];
    if (n == 0) throw std::invalid_argument("layer_norm_rows: zero-width rows");
    Tensor out = Tensor::zeros(a.shape);
    std::vector<double> inv_std(m);
    for (int i = 0; i < m; ++i) {
        const double* x = a.ptr() + i * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += x[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= n;
        const double s = 1.0 / std::sqrt(var + eps);
        inv_std[i] = s;
        for (int j = 0; j < n; ++j) out.at(i, j) = (x[j] - mean) * s;
    }
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out, inv_std, m, n]() {
            const double* y = out.ptr();
            const double* g = out.grad->data();
            for (int i = 0; i < m; ++i) {
                double gmean = 0.0, gymean = 0.0;
                for (int j = 0; j < n; ++j) {
                    gmean += g[i * n + j];
                    gymean += g[i * n + j] * y[i * n + j];
                }
                gmean /= n;
                gymean /= n;
                for (int j = 0; j < n; ++j) {
                    (*a.grad)[i * n + j] += inv_std[i] * (g[i * n + j] - gmean - y[i * n + j] * gymean);
                }
            }
        });
    }
    return out;
}

// Gathers rows of `table` by id. Backward scatter-adds into the table.
inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids, Tape* tape) {
    detail::require_2d(table, "embedding_rows");
    const int n = table.shape[1];
    for (int id : ids) {
        if (id < 0 || id >= table.shape[0]) {
            throw std::invalid_argument("embedding_rows: id " + std::to_string(id) + " out of range for table " +
                                        Tensor::shape_str(table.shape));
        }
    }
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), n});
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy(table.ptr() + ids[i] * n, table.ptr() + (ids[i] + 1) * n, out.ptr() + i * n);
    }
    if (detail::want_grad(tape, {&table})) {
        detail::track_out(tape, out);
        tape->record([table, out, ids, n]() {
            for (size_t i = 0; i < ids.size(); ++i) {
                for (int j = 0; j < n; ++j) (*table.grad)[ids[i] * n + j] += (*out.grad)[i * n + j];
            }
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const int n = parts[0].cols();
    int rows = 0;
    bool tracked = false;
    for (const Tensor& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.shape[1] != n) {
            throw std::invalid_argument("concat_rows: column mismatch " + Tensor::shape_str(parts[0].shape) +
                                        " vs " + Tensor::shape_str(p.shape));
        }
        rows += p.shape[0];
        tracked = tracked || p.tracked();
    }
    Tensor out = Tensor::zeros({rows, n});
    int r = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data->begin(), p.data->end(), out.ptr() + static_cast<size_t>(r) * n);
        r += p.shape[0];
    }
    if (tape && tracked) {
        detail::track_out(tape, out);
        tape->record([parts, out, n]() {
            int r2 = 0;
            for (const Tensor& p : parts) {
                if (p.tracked()) {
                    for (size_t i = 0; i < p.numel(); ++i) {
                        (*p.grad)[i] += (*out.grad)[static_cast<size_t>(r2) * n + i];
                    }
                }
                r2 += p.shape[0];
            }
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& a, Tape* tape) {
    double s = 0.0;
    for (double v : *a.data) s += v;
    Tensor out = Tensor::scalar(s);
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out]() {
            const double g = (*out.grad)[0];
            for (size_t i = 0; i < a.numel(); ++i) (*a.grad)[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& a, Tape* tape) {
    if (a.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
    double s = 0.0;
    for (double v : *a.data) s += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(s * inv);
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out, inv]() {
            const double g = (*out.grad)[0] * inv;
            for (size_t i = 0; i < a.numel(); ++i) (*a.grad)[i] += g;
        });
    }
    return out;
}

// Sum of elementwise squared differences; gradients flow to both sides
// (pass a detached tensor to stop one side).
inline Tensor sum_squared_diff(const Tensor& a, const Tensor& b, Tape* tape) {
    detail::require_same_shape(a, b, "sum_squared_diff");
    double s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        const double d = (*a.data)[i] - (*b.data)[i];
        s += d * d;
    }
    Tensor out = Tensor::scalar(s);
    if (detail::want_grad(tape, {&a, &b})) {
        detail::track_out(tape, out);
        tape->record([a, b, out]() {
            const double g = (*out.grad)[0];
            for (size_t i = 0; i < a.numel(); ++i) {
                const double d = 2.0 * ((*a.data)[i] - (*b.data)[i]) * g;
                if (a.tracked()) (*a.grad)[i] += d;
                if (b.tracked()) (*b.grad)[i] -= d;
            }
        });
    }
    return out;
}

inline Tensor log(const Tensor& a, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = std::log((*a.data)[i]);
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out]() {
            for (size_t i = 0; i < a.numel(); ++i) (*a.grad)[i] += (*out.grad)[i] / (*a.data)[i];
        });
    }
    return out;
}

inline Tensor exp(const Tensor& a, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = std::exp((*a.data)[i]);
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out]() {
            for (size_t i = 0; i < a.numel(); ++i) (*a.grad)[i] += (*out.grad)[i] * (*out.data)[i];
        });
    }
    return out;
}

inline Tensor tanh(const Tensor& a, Tape* tape) {
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = std::tanh((*a.data)[i]);
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out]() {
            for (size_t i = 0; i < a.numel(); ++i) {
                const double y = (*out.data)[i];
                (*a.grad)[i] += (*out.grad)[i] * (1.0 - y * y);
            }
        });
    }
    return out;
}

// Clamp to [lo, hi]; subgradient is 1 inside the range and 0 outside,
// matching the usual PPO clipping treatment.
inline Tensor clip(const Tensor& a, double lo, double hi, Tape* tape) {
    if (!(lo <= hi)) throw std::invalid_argument("clip: lo > hi");
    Tensor out = Tensor::zeros(a.shape);
    for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = std::min(std::max((*a.data)[i], lo), hi);
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out, lo, hi]() {
            for (size_t i = 0; i < a.numel(); ++i) {
                const double x = (*a.data)[i];
                if (x >= lo && x <= hi) (*a.grad)[i] += (*out.grad)[i];
            }
        });
    }
    return out;
}

inline Tensor pick(const Tensor& a, int r, int c, Tape* tape) {
    detail::require_2d(a, "pick");
    if (r < 0 || r >= a.shape[0] || c < 0 || c >= a.shape[1]) {
        throw std::invalid_argument("pick: index (" + std::to_string(r) + "," + std::to_string(c) +
                                    ") out of range for " + Tensor::shape_str(a.shape));
    }
    Tensor out = Tensor::scalar(a.at(r, c));
    if (detail::want_grad(tape, {&a})) {
        detail::track_out(tape, out);
        tape->record([a, out, r, c]() { (*a.grad)[r * a.cols() + c] += (*out.grad)[0]; });
    }
    return out;
}

// min of two scalars; the gradient follows the selected branch (ties go to a).
inline Tensor min_scalar(const Tensor& a, const Tensor& b, Tape* tape) {
    if (!a.is_scalar() || !b.is_scalar()) throw std::invalid_argument("min_scalar: both inputs must be scalar");
    const bool take_a = a.value() <= b.value();
    Tensor out = Tensor::scalar(take_a ? a.value() : b.value());
    if (detail::want_grad(tape, {&a, &b})) {
        detail::track_out(tape, out);
        tape->record([a, b, out, take_a]() {
            const Tensor& src = take_a ? a : b;
            if (src.tracked()) (*src.grad)[0] += (*out.grad)[0];
        });
    }
    return out;
}

// Single-query scaled dot-product attention over a list of cached key/value
// rows. `scl` multiplies the raw dot products (typically 1/sqrt(head_dim)).
// When probs_out is non-null the normalized attention weights are copied out.
inline Tensor attend(const Tensor& q, const std::vector<Tensor>& keys, const std::vector<Tensor>& values,
                     double scl, Tape* tape, std::vector<double>* probs_out = nullptr) {
    if (keys.empty() || keys.size() != values.size()) {
        throw std::invalid_argument("attend: need equal, nonzero numbers of keys and values");
    }
    const int d = static_cast<int>(q.numel());
    for (const Tensor& k : keys) {
        if (static_cast<int>(k.numel()) != d) {
            throw std::invalid_argument("attend: key width " + Tensor::shape_str(k.shape) +
                                        " does not match query " + Tensor::shape_str(q.shape));
        }
    }
    const int t = static_cast<int>(keys.size());
    auto probs = std::make_shared<std::vector<double>>(t);
    for (int j = 0; j < t; ++j) {
        double dot = 0.0;
        const double* kp = keys[j].ptr();
        const double* qp = q.ptr();
        for (int i = 0; i < d; ++i) dot += qp[i] * kp[i];
        (*probs)[j] = dot * scl;
    }
    softmax_row_inplace(probs->data(), t);
    Tensor out = Tensor::zeros({1, d});
    for (int j = 0; j < t; ++j) {
        const double p = (*probs)[j];
        const double* vp = values[j].ptr();
        for (int i = 0; i < d; ++i) (*out.data)[i] += p * vp[i];
    }
    if (probs_out) *probs_out = *probs;

    bool tracked = q.tracked();
    for (int j = 0; j < t && !tracked; ++j) tracked = keys[j].tracked() || values[j].tracked();
    if (tape && tracked) {
        detail::track_out(tape, out);
        tape->record([q, keys, values, out, probs, scl, d, t]() {
            const double* g = out.grad->data();
            std::vector<double> dp(t, 0.0);
            for (int j = 0; j < t; ++j) {
                double acc = 0.0;
                const double* vp = values[j].ptr();
                for (int i = 0; i < d; ++i) acc += g[i] * vp[i];
                dp[j] = acc;
                if (values[j].tracked()) {
                    const double p = (*probs)[j];
                    for (int i = 0; i < d; ++i) (*values[j].grad)[i] += p * g[i];
                }
            }
            double dot = 0.0;
            for (int j = 0; j < t; ++j) dot += dp[j] * (*probs)[j];
            for (int j = 0; j < t; ++j) {
                const double ds = (*probs)[j] * (dp[j] - dot) * scl;
                if (ds == 0.0) continue;
                if (q.tracked()) {
                    const double* kp = keys[j].ptr();
                    for (int i = 0; i < d; ++i) (*q.grad)[i] += ds * kp[i];
                }
                if (keys[j].tracked()) {
                    const double* qp = q.ptr();
                    for (int i = 0; i < d; ++i) (*keys[j].grad)[i] += ds * qp[i];
                }
            }
        });
    }
    return out;
}

}  // namespace lvr
