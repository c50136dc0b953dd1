#pragma once

#include <string>
#include <vector>

#include "eastnet/tensor.hpp"

namespace eastnet {

// Named view over the parameters owned by a model's components. Entries point
// at the component members themselves, so tape staging and in-place optimizer
// updates act on the exact handles the forward pass reads. The owner must be
// address-stable (models are heap-pinned). Registration order is the
// checkpoint serialization order.
class ParamRegistry {
public:
    struct Entry {
        std::string name;
        Tensor* value = nullptr;
        bool trainable = true;
    };

    void add(std::string name, Tensor& t, bool trainable = true) {
        entries_.push_back({std::move(name), &t, trainable});
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    Entry* find(const std::string& name) {
        for (Entry& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<Tensor*> trainable() const {
        std::vector<Tensor*> out;
        for (const Entry& e : entries_)
            if (e.trainable) out.push_back(e.value);
        return out;
    }

    std::vector<Tensor*> all() const {
        std::vector<Tensor*> out;
        for (const Entry& e : entries_) out.push_back(e.value);
        return out;
    }

    void set_trainable_prefix(const std::string& prefix, bool trainable) {
        for (Entry& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) e.trainable = trainable;
    }

    int64_t count() const {
        int64_t n = 0;
        for (const Entry& e : entries_) n += e.value->size();
        return n;
    }

    // Deep snapshot / restore, used for best-epoch bookkeeping.
    std::vector<Tensor> snapshot() const {
        std::vector<Tensor> out;
        out.reserve(entries_.size());
        for (const Entry& e : entries_) out.push_back(e.value->clone());
        return out;
    }

    void restore(const std::vector<Tensor>& snap) {
        if (snap.size() != entries_.size())
            throw ContractError("registry restore: snapshot size mismatch");
        for (size_t i = 0; i < snap.size(); ++i) {
            Tensor& dst = *entries_[i].value;
            if (!dst.same_shape(snap[i]))
                throw ShapeError("registry restore: shape mismatch at " + entries_[i].name);
            std::copy(snap[i].data(), snap[i].data() + snap[i].size(), dst.data());
        }
    }

    // Stages every parameter as a leaf on the given tape.
    void watch_all(Tape& tape) {
        for (Entry& e : entries_) tape.watch(*e.value);
    }

private:
    std::vector<Entry> entries_;
};

}  // namespace eastnet
