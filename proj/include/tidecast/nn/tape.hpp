// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tidecast/nn/array.hpp"

namespace tidecast::nn {

template <typename T>
struct Node {
    Array<T> value;
    Array<T> grad;  // allocated on demand, same shape as value
    bool requires_grad = false;
    bool is_param = false;
    std::string name;

    void ensure_grad() {
        if (grad.data.size() != value.data.size()) {
            grad.shape = value.shape;
            grad.data.assign(value.data.size(), T(0));
        }
    }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> constant(Array<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return n;
}

template <typename T>
NodePtr<T> make_param(Array<T> value, std::string name) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->is_param = true;
    n->name = std::move(name);
    return n;
}

// Counts activation scalars retained for the backward pass. Shared between
// an outer tape and the inner tapes of checkpoint replays so the peak covers
// recomputation spikes.
struct MemoryMeter {
    size_t now = 0;
    size_t peak = 0;
    void retain(size_t n) {
        now += n;
        if (now > peak) peak = now;
    }
    void release(size_t n) { now -= n; }
};

// Reverse-mode tape. Ops append entries during the forward pass; backward()
// runs them in reverse and releases each entry's retained-activation count.
template <typename T>
class Tape {
  public:
    std::shared_ptr<MemoryMeter> meter = std::make_shared<MemoryMeter>();

    void record(size_t retained_scalars, std::function<void()> backward) {
        meter->retain(retained_scalars);
        entries_.push_back({retained_scalars, std::move(backward)});
    }

    void backward() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            it->backward();
            meter->release(it->retained);
        }
        entries_.clear();
    }

    size_t size() const { return entries_.size(); }

  private:
    struct Entry {
        size_t retained;
        std::function<void()> backward;
    };
    std::vector<Entry> entries_;
};

// A replayable slice of the forward pass: called with (tape, replay, inputs).
// BN layers must skip running-statistic updates when replay is true.
template <typename T>
using SegmentFn =
    std::function<std::vector<NodePtr<T>>(Tape<T>*, bool, const std::vector<NodePtr<T>>&)>;

// When enabled, runs fn without a tape, keeps only its inputs and outputs,
// and re-runs it with a private tape during backward to rebuild gradients.
template <typename T>
std::vector<NodePtr<T>> checkpoint(Tape<T>* tape, bool enable, const SegmentFn<T>& fn,
                                   std::vector<NodePtr<T>> inputs) {
    if (tape == nullptr) return fn(nullptr, false, inputs);
    if (!enable) return fn(tape, false, inputs);

    std::vector<NodePtr<T>> outs = fn(nullptr, false, inputs);
    bool needs_grad = false;
    for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
    for (auto& out : outs) out->requires_grad = true;  // segments always touch parameters
    (void)needs_grad;

    size_t retained = 0;
    for (const auto& in : inputs)
        if (!in->is_param) retained += in->value.data.size();
    for (const auto& out : outs) retained += out->value.data.size();

    auto meter = tape->meter;
    tape->record(retained, [fn, inputs, outs, meter]() {
        Tape<T> inner;
        inner.meter = meter;
        std::vector<NodePtr<T>> replay = fn(&inner, true, inputs);
        for (size_t i = 0; i < replay.size(); ++i) {
            outs[i]->ensure_grad();
            replay[i]->grad = outs[i]->grad;
            replay[i]->ensure_grad();
        }
        inner.backward();
    });
    return outs;
}

}  // namespace tidecast::nn
