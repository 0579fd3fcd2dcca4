// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "tidecast/common.hpp"

namespace tidecast::nn {

// Dense C-order tensor. Ops interpret the flat buffer with whatever row
// width they need, so reshapes never materialize.
template <typename T>
struct Array {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Array() = default;
    explicit Array(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), fill);
    }
    Array(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (count(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("array data does not match its shape");
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) n *= e;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    // Leading extent when the trailing dims are collapsed to `width` columns.
    int64_t rows(int64_t width) const {
        if (width <= 0 || numel() % width != 0)
            throw ShapeError("array is not divisible into rows of the requested width");
        return numel() / width;
    }
};

template <typename T>
Array<T> zeros_like(const Array<T>& a) {
    Array<T> out;
    out.shape = a.shape;
    out.data.assign(a.data.size(), T(0));
    return out;
}

}  // namespace tidecast::nn
