// SPDX-License-Identifier: Apache-2.0
// Bridges dataset samples and the model's input/output arrays: boundary-mask
// encoding, normalization, padding, and forecast reassembly.
#pragma once

#include <span>

#include "tidecast/dataset.hpp"
#include "tidecast/model.hpp"

namespace tidecast {

template <typename T>
struct EncodedBatch {
    EncodedInput<T> input;
    std::shared_ptr<nn::Array<T>> y3d, y2d;  // normalized targets, t = 1..T
    std::shared_ptr<nn::Array<T>> w3d, w2d;  // loss weights: 1 on water cells
    int64_t weight_count = 0;                // total number of weighted entries
};

// The model consumes the (possibly padded) mesh: interior cells carry values
// only at t0; boundary-ring cells carry the future values; a mask channel
// marks where values are present. Appended pad cells stay zero with zero
// weight, exactly like land.
template <typename T>
EncodedBatch<T> encode_batch(std::span<const Sample> samples, const GridSpec& grid,
                             const NormStats& stats, const ModelConfig& cfg) {
    require(!samples.empty(), "cannot encode an empty batch");
    stats.validate();
    const int B = static_cast<int>(samples.size());
    const int T_steps = cfg.horizon;
    const int H = cfg.grid_h, W = cfg.grid_w, D = cfg.grid_d;
    require(grid.H <= H && grid.W <= W && grid.D <= D, "model grid is smaller than the data grid");

    EncodedBatch<T> out;
    out.input.batch = B;
    out.input.x3d = nn::Array<T>({B, T_steps + 1, D, H, W, 4});
    out.input.x2d = nn::Array<T>({B, T_steps + 1, H, W, 2});
    out.y3d = std::make_shared<nn::Array<T>>(std::vector<int64_t>{B, T_steps, D, H, W, 3});
    out.y2d = std::make_shared<nn::Array<T>>(std::vector<int64_t>{B, T_steps, H, W, 1});
    out.w3d = std::make_shared<nn::Array<T>>(std::vector<int64_t>{B, T_steps, D, H, W, 3});
    out.w2d = std::make_shared<nn::Array<T>>(std::vector<int64_t>{B, T_steps, H, W, 1});

    auto ring = grid.ring_cells();
    const int R = static_cast<int>(ring.size());

    auto x3at = [&](int b, int t, int dz, int i, int j) {
        return ((((static_cast<int64_t>(b) * (T_steps + 1) + t) * D + dz) * H + i) * W + j) * 4;
    };
    auto x2at = [&](int b, int t, int i, int j) {
        return (((static_cast<int64_t>(b) * (T_steps + 1) + t) * H + i) * W + j) * 2;
    };
    auto y3at = [&](int b, int t, int dz, int i, int j) {
        return ((((static_cast<int64_t>(b) * T_steps + t) * D + dz) * H + i) * W + j) * 3;
    };
    auto y2at = [&](int b, int t, int i, int j) {
        return ((static_cast<int64_t>(b) * T_steps + t) * H + i) * W + j;
    };

    auto nu = [&](double x) { return T((x - stats.mean_u) / stats.std_u); };
    auto nv = [&](double x) { return T((x - stats.mean_v) / stats.std_v); };
    auto nw = [&](double x) { return T((x - stats.mean_w) / stats.std_w); };
    auto nz = [&](double x) { return T((x - stats.mean_zeta) / stats.std_zeta); };

    for (int b = 0; b < B; ++b) {
        const Sample& s = samples[b];
        require(static_cast<int>(s.targets.size()) == T_steps &&
                    s.boundaries.horizon() == T_steps,
                "sample horizon does not match the model configuration");
        require(!s.normalized, "encode_batch expects raw (unnormalized) samples");
        require(s.initial.zeta.H == grid.H && s.initial.zeta.W == grid.W && s.initial.u.D == grid.D,
                "sample extents do not match the grid");

        // t0: the full initial condition
        for (int i = 0; i < grid.H; ++i)
            for (int j = 0; j < grid.W; ++j) {
                if (grid.is_land(i, j)) continue;
                auto p2 = x2at(b, 0, i, j);
                out.input.x2d.data[p2] = nz(s.initial.zeta.at(i, j));
                out.input.x2d.data[p2 + 1] = T(1);
                for (int dz = 0; dz < grid.D; ++dz) {
                    auto p3 = x3at(b, 0, dz, i, j);
                    out.input.x3d.data[p3] = nu(s.initial.u.at(dz, i, j));
                    out.input.x3d.data[p3 + 1] = nv(s.initial.v.at(dz, i, j));
                    out.input.x3d.data[p3 + 2] = nw(s.initial.w.at(dz, i, j));
                    out.input.x3d.data[p3 + 3] = T(1);
                }
            }

        // t1..T: boundary rings and interior targets
        for (int t = 0; t < T_steps; ++t) {
            const BoundaryRing& br = s.boundaries.steps[t];
            require(static_cast<int>(br.zeta.size()) == R, "boundary ring length mismatch");
            for (int r = 0; r < R; ++r) {
                auto [i, j] = ring[r];
                if (grid.is_land(i, j)) continue;
                auto p2 = x2at(b, t + 1, i, j);
                out.input.x2d.data[p2] = nz(br.zeta[r]);
                out.input.x2d.data[p2 + 1] = T(1);
                for (int dz = 0; dz < grid.D; ++dz) {
                    auto p3 = x3at(b, t + 1, dz, i, j);
                    out.input.x3d.data[p3] = nu(br.u[static_cast<size_t>(dz) * R + r]);
                    out.input.x3d.data[p3 + 1] = nv(br.v[static_cast<size_t>(dz) * R + r]);
                    out.input.x3d.data[p3 + 3] = T(1);
                }
            }
            const State& tgt = s.targets[t];
            for (int i = 0; i < grid.H; ++i)
                for (int j = 0; j < grid.W; ++j) {
                    if (grid.is_land(i, j)) continue;
                    out.y2d->data[y2at(b, t, i, j)] = nz(tgt.zeta.at(i, j));
                    out.w2d->data[y2at(b, t, i, j)] = T(1);
                    for (int dz = 0; dz < grid.D; ++dz) {
                        auto p = y3at(b, t, dz, i, j);
                        out.y3d->data[p] = nu(tgt.u.at(dz, i, j));
                        out.y3d->data[p + 1] = nv(tgt.v.at(dz, i, j));
                        out.y3d->data[p + 2] = nw(tgt.w.at(dz, i, j));
                        out.w3d->data[p] = out.w3d->data[p + 1] = out.w3d->data[p + 2] = T(1);
                    }
                }
        }
    }
    for (T w : out.w3d->data) out.weight_count += w != T(0);
    for (T w : out.w2d->data) out.weight_count += w != T(0);
    return out;
}

// Reassembles forecast states from the model's output rows: interior cells
// take denormalized predictions, ring cells take the given boundary values
// (w stays predicted there), land and pad cells stay zero.
template <typename T>
std::vector<State> decode_forecast(const nn::Array<T>& y3d, const nn::Array<T>& y2d,
                                   const Sample& sample, const GridSpec& grid,
                                   const NormStats& stats, const ModelConfig& cfg, int batch_item) {
    const int T_steps = cfg.horizon;
    const int H = cfg.grid_h, W = cfg.grid_w, D = cfg.grid_d;
    std::vector<State> states;
    states.reserve(T_steps);

    auto ring = grid.ring_cells();
    const int R = static_cast<int>(ring.size());

    for (int t = 0; t < T_steps; ++t) {
        State st = make_state(grid, sample.initial.time + sample.interval * (t + 1));
        for (int i = 0; i < grid.H; ++i)
            for (int j = 0; j < grid.W; ++j) {
                if (grid.is_land(i, j)) continue;
                const int64_t p2 =
                    ((static_cast<int64_t>(batch_item) * T_steps + t) * H + i) * W + j;
                st.zeta.at(i, j) = stats.mean_zeta + stats.std_zeta * y2d.data[p2];
                for (int dz = 0; dz < grid.D; ++dz) {
                    const int64_t p3 =
                        ((((static_cast<int64_t>(batch_item) * T_steps + t) * D + dz) * H + i) * W +
                         j) * 3;
                    st.u.at(dz, i, j) = stats.mean_u + stats.std_u * y3d.data[p3];
                    st.v.at(dz, i, j) = stats.mean_v + stats.std_v * y3d.data[p3 + 1];
                    st.w.at(dz, i, j) = stats.mean_w + stats.std_w * y3d.data[p3 + 2];
                }
            }
        const BoundaryRing& br = sample.boundaries.steps[t];
        for (int r = 0; r < R; ++r) {
            auto [i, j] = ring[r];
            if (grid.is_land(i, j)) continue;
            st.zeta.at(i, j) = br.zeta[r];
            for (int dz = 0; dz < grid.D; ++dz) {
                st.u.at(dz, i, j) = br.u[static_cast<size_t>(dz) * R + r];
                st.v.at(dz, i, j) = br.v[static_cast<size_t>(dz) * R + r];
            }
        }
        states.push_back(std::move(st));
    }
    return states;
}

}  // namespace tidecast
