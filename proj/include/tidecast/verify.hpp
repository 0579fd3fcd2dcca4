// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tidecast/grid.hpp"

namespace tidecast {

// Water-mass residual gate. For each interior water column the residual is
//   | d(integral of h+zeta)/dt + net outward face volume flux | / (dx*dy)
// in m/s, with face values reconstructed from cell-centered fields: the face
// surface height is the two-cell mean of (h+zeta), the face normal velocity
// is the two-cell mean of the depth-averaged centered velocity, both taken
// from the earlier state of the pair. Land-adjacent faces carry zero flux
// (no-penetration); domain-edge faces use the one-sided cell values.
//
// Perimeter (ring) columns are reported in the per-cell field but excluded
// from aggregate statistics: clamped open-boundary forcing is not locally
// conservative there.
struct ResidualReport {
    std::vector<Field2> per_cell;       // one residual field per consecutive pair
    std::vector<double> per_step_mean;  // mean over interior water cells, per pair
    double mean_residual = 0.0;         // mean over all pairs and interior water cells
    double max_residual = 0.0;          // max over all pairs and interior water cells
    double threshold = 0.0;             // [m/s]
    bool pass = false;                  // mean_residual < threshold
};

// True for cells included in residual statistics: water and not on the ring.
bool residual_interior(const GridSpec& grid, int i, int j);

// Residual field for one consecutive pair; interval is the pair spacing in
// seconds (grid.dt for solver steps, the forecast interval otherwise).
Field2 water_mass_residual(const State& state_t, const State& state_t1, const GridSpec& grid,
                           double interval);

ResidualReport verify(const Trajectory& forecast, const GridSpec& grid, double threshold);

// Pass fraction at each threshold; thresholds must be sorted ascending.
std::vector<std::pair<double, double>> pass_rate_curve(const std::vector<double>& mean_residuals,
                                                       const std::vector<double>& thresholds);
std::vector<std::pair<double, double>> pass_rate_curve(const std::vector<Trajectory>& forecasts,
                                                       const GridSpec& grid,
                                                       const std::vector<double>& thresholds);

void save_report(const ResidualReport& report, const std::string& path,
                 bool with_per_cell_binary = false);

}  // namespace tidecast
