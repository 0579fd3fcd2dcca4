// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the test suites: a small bay-style configuration with
// an open west edge, sloping channel bathymetry, and land in two corners.
#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "tidecast/grid.hpp"
#include "tidecast/solver.hpp"

namespace tidecast::testing {

inline Field2 channel_depth(int H, int W, double h_min = 2.0, double h_max = 8.0) {
    Field2 depth(H, W);
    for (int i = 0; i < H; ++i) {
        const double lateral = 0.4 + 0.6 * std::exp(-std::pow((i - 0.5 * (H - 1)) / (0.35 * H), 2));
        for (int j = 0; j < W; ++j) {
            const double along = 1.0 - static_cast<double>(j) / W;  // shallower toward the head
            depth.at(i, j) = h_min + (h_max - h_min) * along * lateral;
        }
    }
    return depth;
}

inline std::vector<uint8_t> corner_land(int H, int W) {
    std::vector<uint8_t> land(static_cast<size_t>(H) * W, 0);
    const int bh = H / 8, bw = W / 6;
    for (int i = 0; i < bh; ++i)
        for (int j = W - bw; j < W; ++j) land[static_cast<size_t>(i) * W + j] = 1;
    for (int i = H - bh; i < H; ++i)
        for (int j = W - bw; j < W; ++j) land[static_cast<size_t>(i) * W + j] = 1;
    return land;
}

inline GridSpec bay_grid(int H = 30, int W = 20, int D = 4, double dx = 100, double dt = 5) {
    return make_grid(H, W, D, dx, dx, channel_depth(H, W), dt, corner_land(H, W));
}

inline TidalForcing bay_forcing() {
    return TidalForcing{{{0.30, 44712.0, 0.0}, {0.12, 86164.0, 1.0}}};
}

inline SolverParams bay_params() {
    SolverParams p;
    p.friction = 3e-4;
    p.open_edge = OpenEdge::West;
    return p;
}

inline std::string temp_dir(const std::string& tag) {
    static int counter = 0;
    auto p = std::filesystem::temp_directory_path() /
             ("tidecast_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    return p.string();
}

}  // namespace tidecast::testing
