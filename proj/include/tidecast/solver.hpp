// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "tidecast/grid.hpp"

namespace tidecast {

struct Constituent {
    double amplitude = 0.0;  // [m]
    double period = 0.0;     // [s]
    double phase = 0.0;      // [rad]
};

struct TidalForcing {
    std::vector<Constituent> constituents;
    bool empty() const { return constituents.empty(); }
};

// zeta_b(t) = sum_k A_k sin(2 pi t / T_k + phi_k), uniform along the open boundary.
double tidal_boundary(double t, const TidalForcing& forcing);

enum class OpenEdge { None, West, East, South, North };

struct SolverParams {
    double gravity = 9.81;       // [m/s^2]
    double friction = 0.0;       // linear bottom friction r [1/s], implicit
    double viscosity = 0.0;      // optional horizontal eddy viscosity [m^2/s]
    bool nonlinear_flux = true;  // continuity flux uses (h+zeta); false -> h only
    bool cfl_check = true;
    OpenEdge open_edge = OpenEdge::West;  // which perimeter edge takes tidal forcing
};

// Barotropic shallow-water solver on a staggered C-grid with forward-backward
// time stepping: the free surface is advanced from the old velocities in flux
// form, then velocities from the new surface gradient. The continuity flux
// velocity is the two-cell mean of the cell-centered velocity, and the
// momentum force applies the matching adjoint smoothing, so exported
// cell-centered snapshots satisfy the same discrete continuity identity the
// verifier evaluates, and a staggered-in-time quadratic energy is conserved
// exactly in the linear frictionless closed-basin case.
//
// Exported snapshots replicate the depth-averaged velocities over the D
// levels; w is diagnosed at level-top interfaces by integrating the column
// flux divergence from the bed, so the top level satisfies w = dzeta/dt.
class ShallowWaterSolver {
  public:
    ShallowWaterSolver(GridSpec grid, SolverParams params);

    const GridSpec& grid() const { return grid_; }
    const SolverParams& params() const { return params_; }

    StaggeredState initial_rest(double time = 0.0) const { return make_staggered(grid_, time); }

    // Cold start from a cell-centered snapshot: faces take two-point averages
    // of adjacent centers (exact centering inverse does not exist).
    StaggeredState from_centered(const State& s) const;

    // Advance one dt. boundary_zeta clamps the open-edge ring cells at the
    // new time level; nullopt means closed basin (all perimeter walls).
    void step(StaggeredState& s, std::optional<double> boundary_zeta) const;

    State export_centered(const StaggeredState& s) const;

    // n_steps >= 1, divisible by record_every; records the initial state plus
    // every record_every-th step. Deterministic given inputs.
    Trajectory simulate(const StaggeredState& initial, const TidalForcing& forcing, int n_steps,
                        int record_every = 1) const;

    // Records the exact internal state at selected step indices while running
    // a simulation; used by the hybrid pipeline to resume integrations
    // bit-exactly. Step index 0 is the initial state.
    Trajectory simulate_with_handoffs(const StaggeredState& initial, const TidalForcing& forcing,
                                      int n_steps, int record_every,
                                      const std::vector<int>& handoff_steps,
                                      std::vector<StaggeredState>& handoffs) const;

    // Scheme-consistent discrete energy: 0.5 g sum zeta_n^2 dA plus the
    // staggered-in-time kinetic pairing 0.5 sum h_f u_{n-1} u_n dA. Conserved
    // to round-off for the linear frictionless closed-basin scheme.
    double discrete_energy(const StaggeredState& prev, const StaggeredState& cur) const;

  private:
    GridSpec grid_;
    SolverParams params_;
    std::vector<uint8_t> open_cell_;     // per cell, 1 = forced open-boundary ring cell
    std::vector<uint8_t> closed_mask_;   // all-zero mask for unforced stepping

    void check_cfl() const;
    void continuity(StaggeredState& s, Field2& col_div) const;
    void momentum(StaggeredState& s, Field2& gradx, Field2& grady, bool open_active) const;
};

// Convenience single-step on centered snapshots (cold start per call).
State step(const State& state, const GridSpec& grid, const SolverParams& params,
           std::optional<double> boundary_zeta);

// Spec-level entry: simulate from a centered initial condition.
Trajectory simulate(const State& initial, const GridSpec& grid, const SolverParams& params,
                    const TidalForcing& forcing, int n_steps, int record_every = 1);

}  // namespace tidecast
