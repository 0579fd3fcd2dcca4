// SPDX-License-Identifier: Apache-2.0
#include "tidecast/verify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

using json = nlohmann::json;

namespace tidecast {

bool residual_interior(const GridSpec& grid, int i, int j) {
    return grid.is_water(i, j) && !grid.on_ring(i, j);
}

namespace {

// Depth-averaged horizontal velocity of a centered snapshot.
void depth_mean(const Field3& f, Field2& out) {
    const int D = f.D, H = f.H, W = f.W;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double a = 0.0;
            for (int k = 0; k < D; ++k) a += f.at(k, i, j);
            out.at(i, j) = a / D;
        }
}

}  // namespace

Field2 water_mass_residual(const State& state_t, const State& state_t1, const GridSpec& grid,
                           double interval) {
    require(interval > 0, "residual interval must be positive");
    const int H = grid.H, W = grid.W;
    Field2 ubar(H, W), vbar(H, W);
    depth_mean(state_t.u, ubar);
    depth_mean(state_t.v, vbar);

    auto eta = [&](int i, int j) { return grid.depth.at(i, j) + state_t.zeta.at(i, j); };

    // Net outward volume flux per cell, from the earlier state.
    Field2 res(H, W);
    const double area = grid.dx * grid.dy;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            if (grid.is_land(i, j)) continue;
            double outflux = 0.0;
            // east / west faces
            if (j + 1 < W) {
                if (grid.is_water(i, j + 1))
                    outflux += 0.5 * (eta(i, j) + eta(i, j + 1)) * 0.5 * (ubar.at(i, j) + ubar.at(i, j + 1)) * grid.dy;
            } else {
                outflux += eta(i, j) * ubar.at(i, j) * grid.dy;  // one-sided at the domain edge
            }
            if (j - 1 >= 0) {
                if (grid.is_water(i, j - 1))
                    outflux -= 0.5 * (eta(i, j) + eta(i, j - 1)) * 0.5 * (ubar.at(i, j) + ubar.at(i, j - 1)) * grid.dy;
            } else {
                outflux -= eta(i, j) * ubar.at(i, j) * grid.dy;
            }
            // north / south faces
            if (i + 1 < H) {
                if (grid.is_water(i + 1, j))
                    outflux += 0.5 * (eta(i, j) + eta(i + 1, j)) * 0.5 * (vbar.at(i, j) + vbar.at(i + 1, j)) * grid.dx;
            } else {
                outflux += eta(i, j) * vbar.at(i, j) * grid.dx;
            }
            if (i - 1 >= 0) {
                if (grid.is_water(i - 1, j))
                    outflux -= 0.5 * (eta(i, j) + eta(i - 1, j)) * 0.5 * (vbar.at(i, j) + vbar.at(i - 1, j)) * grid.dx;
            } else {
                outflux -= eta(i, j) * vbar.at(i, j) * grid.dx;
            }

            const double tendency = (state_t1.zeta.at(i, j) - state_t.zeta.at(i, j)) * area / interval;
            res.at(i, j) = std::abs(tendency + outflux) / area;
        }
    }
    return res;
}

ResidualReport verify(const Trajectory& forecast, const GridSpec& grid, double threshold) {
    require(threshold > 0, "verification threshold must be positive");
    if (forecast.states.size() < 2)
        throw InsufficientDataError("verification needs at least two states");

    ResidualReport report;
    report.threshold = threshold;
    const size_t pairs = forecast.states.size() - 1;
    report.per_cell.reserve(pairs);
    report.per_step_mean.reserve(pairs);

    size_t n_interior = 0;
    for (int i = 0; i < grid.H; ++i)
        for (int j = 0; j < grid.W; ++j) n_interior += residual_interior(grid, i, j);
    require(n_interior > 0, "grid has no interior water columns");

    double total = 0.0;
    for (size_t p = 0; p < pairs; ++p) {
        Field2 r = water_mass_residual(forecast.states[p], forecast.states[p + 1], grid,
                                       forecast.interval > 0 ? forecast.interval : grid.dt);
        double step_sum = 0.0;
        for (int i = 0; i < grid.H; ++i)
            for (int j = 0; j < grid.W; ++j)
                if (residual_interior(grid, i, j)) {
                    step_sum += r.at(i, j);
                    report.max_residual = std::max(report.max_residual, r.at(i, j));
                }
        report.per_step_mean.push_back(step_sum / n_interior);
        total += step_sum;
        report.per_cell.push_back(std::move(r));
    }
    report.mean_residual = total / (static_cast<double>(pairs) * n_interior);
    report.pass = report.mean_residual < threshold;
    return report;
}

std::vector<std::pair<double, double>> pass_rate_curve(const std::vector<double>& mean_residuals,
                                                       const std::vector<double>& thresholds) {
    require(!mean_residuals.empty(), "pass-rate curve needs at least one forecast");
    require(std::is_sorted(thresholds.begin(), thresholds.end()), "thresholds must be sorted ascending");
    std::vector<std::pair<double, double>> curve;
    curve.reserve(thresholds.size());
    for (double t : thresholds) {
        size_t pass = 0;
        for (double r : mean_residuals) pass += (r < t);
        curve.emplace_back(t, static_cast<double>(pass) / mean_residuals.size());
    }
    return curve;
}

std::vector<std::pair<double, double>> pass_rate_curve(const std::vector<Trajectory>& forecasts,
                                                       const GridSpec& grid,
                                                       const std::vector<double>& thresholds) {
    require(!forecasts.empty(), "pass-rate curve needs at least one forecast");
    std::vector<double> means;
    means.reserve(forecasts.size());
    const double tiny = 1e-300;  // threshold only matters for pass flags, not means
    for (const auto& f : forecasts) means.push_back(verify(f, grid, tiny).mean_residual);
    return pass_rate_curve(means, thresholds);
}

void save_report(const ResidualReport& report, const std::string& path, bool with_per_cell_binary) {
    json j;
    j["mean_residual"] = report.mean_residual;
    j["max_residual"] = report.max_residual;
    j["threshold"] = report.threshold;
    j["pass"] = report.pass;
    j["per_step_mean"] = report.per_step_mean;
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump(2) << "\n";
    if (with_per_cell_binary && !report.per_cell.empty()) {
        const std::string bin = path + ".cells.bin";
        std::ofstream b(bin, std::ios::binary);
        if (!b) throw IoError("cannot write " + bin);
        for (const auto& field : report.per_cell) {
            std::vector<float> buf(field.v.begin(), field.v.end());
            b.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        }
    }
}

}  // namespace tidecast
