#pragma once

// Named, ordered collection of trainable tensors. Order is fixed at
// construction and determines checkpoint layout and optimizer state indexing.

#include <stdexcept>
#include <string>
#include <vector>

#include "lvr/tensor.hpp"

namespace lvr {

struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool frozen = false;  // excluded from optimizer updates, not from gradients
};

class ParamStore {
public:
    // Returns a handle sharing the stored tensor's buffers. Handles stay
    // valid across later add() calls.
    Tensor add(const std::string& name, Tensor t) {
        for (const auto& e : entries_) {
            if (e.name == name) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
        }
        t.require_grad();
        entries_.push_back({name, std::move(t), false});
        return entries_.back().tensor;
    }

    Tensor find(const std::string& name) const {
        for (const auto& e : entries_) {
            if (e.name == name) return e.tensor;
        }
        throw std::invalid_argument("ParamStore: no parameter named " + name);
    }

    bool has(const std::string& name) const {
        for (const auto& e : entries_) {
            if (e.name == name) return true;
        }
        return false;
    }

    void set_frozen(const std::string& prefix, bool frozen) {
        for (auto& e : entries_) {
            if (e.name.rfind(prefix, 0) == 0) e.frozen = frozen;
        }
    }

    void zero_grads() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    size_t total_values() const {
        size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    // Deep copy; the clone's tensors share nothing with the original.
    ParamStore clone() const {
        ParamStore out;
        for (const auto& e : entries_) {
            Tensor t = e.tensor.detached();
            t.require_grad();
            out.entries_.push_back({e.name, std::move(t), e.frozen});
        }
        return out;
    }

    void copy_values_from(const ParamStore& other) {
        if (other.entries_.size() != entries_.size()) {
            throw std::invalid_argument("ParamStore::copy_values_from: size mismatch");
        }
        for (size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].name != other.entries_[i].name ||
                entries_[i].tensor.shape != other.entries_[i].tensor.shape) {
                throw std::invalid_argument("ParamStore::copy_values_from: layout mismatch at " + entries_[i].name);
            }
            *entries_[i].tensor.data = *other.entries_[i].tensor.data;
        }
    }

    std::vector<ParamEntry>& entries() { return entries_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }

private:
    std::vector<ParamEntry> entries_;
};

}  // namespace lvr
