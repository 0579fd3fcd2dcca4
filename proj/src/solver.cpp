// SPDX-License-Identifier: Apache-2.0
#include "tidecast/solver.hpp"

#include <algorithm>
#include <cmath>

namespace tidecast {

double tidal_boundary(double t, const TidalForcing& forcing) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    double z = 0.0;
    for (const auto& c : forcing.constituents) z += c.amplitude * std::sin(two_pi * t / c.period + c.phase);
    return z;
}

namespace {

void validate_forcing(const TidalForcing& f) {
    for (const auto& c : f.constituents) {
        require(c.amplitude >= 0, "tidal amplitude must be >= 0");
        require(c.period > 0, "tidal period must be positive");
    }
}

}  // namespace

ShallowWaterSolver::ShallowWaterSolver(GridSpec grid, SolverParams params)
    : grid_(std::move(grid)), params_(params) {
    require(params_.gravity > 0, "gravity must be positive");
    require(params_.friction >= 0, "friction must be >= 0");
    require(params_.viscosity >= 0, "viscosity must be >= 0");
    if (params_.cfl_check) check_cfl();

    open_cell_.assign(static_cast<size_t>(grid_.H) * grid_.W, 0);
    closed_mask_.assign(static_cast<size_t>(grid_.H) * grid_.W, 0);
    const int H = grid_.H, W = grid_.W;
    auto mark = [&](int i, int j) {
        if (grid_.is_water(i, j)) open_cell_[static_cast<size_t>(i) * W + j] = 1;
    };
    switch (params_.open_edge) {
        case OpenEdge::None: break;
        case OpenEdge::West:
            for (int i = 0; i < H; ++i) mark(i, 0);
            break;
        case OpenEdge::East:
            for (int i = 0; i < H; ++i) mark(i, W - 1);
            break;
        case OpenEdge::South:
            for (int j = 0; j < W; ++j) mark(0, j);
            break;
        case OpenEdge::North:
            for (int j = 0; j < W; ++j) mark(H - 1, j);
            break;
    }
}

void ShallowWaterSolver::check_cfl() const {
    const double c = std::sqrt(params_.gravity * grid_.max_depth());
    const double limit = std::min(grid_.dx, grid_.dy) / c;
    if (!(grid_.dt < limit))
        throw StabilityError("dt violates the CFL bound dt < min(dx,dy)/sqrt(g*max depth)");
}

namespace {

// Shared scratch to keep the stepping loop allocation-free.
struct Workspace {
    Field2 uc, vc;        // cell-centered velocities
    Field2 fe, fn;        // volume fluxes through east faces of (i,j) [j=-1..W-1 packed W+1] and north faces
    Field2 col_div;       // net outward face flux per unit area [m/s]
    Field2 gradx, grady;  // raw pressure gradients on faces
};

Workspace make_workspace(const GridSpec& g) {
    Workspace ws;
    ws.uc = Field2(g.H, g.W);
    ws.vc = Field2(g.H, g.W);
    ws.fe = Field2(g.H, g.W + 1);  // fe(i,j) = flux through the u-face at (i, j-1/2)
    ws.fn = Field2(g.H + 1, g.W);  // fn(i,j) = flux through the v-face at (i-1/2, j)
    ws.col_div = Field2(g.H, g.W);
    ws.gradx = Field2(g.H, g.W + 1);
    ws.grady = Field2(g.H + 1, g.W);
    return ws;
}

// Face fluxes from a staggered state, via the centered-velocity convention the
// verifier reconstructs: u at a face is the mean of the two adjacent
// cell-centered velocities, and the face surface height is the two-cell mean.
// Wall faces (land-adjacent or closed domain edge) carry zero flux; the
// forced open-edge faces use the one-sided cell value.
void compute_fluxes(const GridSpec& g, const SolverParams& p, const std::vector<uint8_t>& open_cell,
                    const StaggeredState& s, Workspace& ws) {
    const int H = g.H, W = g.W;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            ws.uc.at(i, j) = 0.5 * (s.u.at(i, j) + s.u.at(i, j + 1));
            ws.vc.at(i, j) = 0.5 * (s.v.at(i, j) + s.v.at(i + 1, j));
        }

    auto eta = [&](int i, int j) {
        return p.nonlinear_flux ? g.depth.at(i, j) + s.zeta.at(i, j) : g.depth.at(i, j);
    };

    for (int i = 0; i < H; ++i) {
        for (int j = 0; j <= W; ++j) {
            double f = 0.0;
            const bool lw = j > 0 && g.is_water(i, j - 1);
            const bool rw = j < W && g.is_water(i, j);
            if (lw && rw) {
                f = 0.5 * (eta(i, j - 1) + eta(i, j)) * 0.5 * (ws.uc.at(i, j - 1) + ws.uc.at(i, j)) * g.dy;
            } else if (j == 0 && rw && open_cell[static_cast<size_t>(i) * W]) {
                f = eta(i, 0) * ws.uc.at(i, 0) * g.dy;
            } else if (j == W && lw && open_cell[static_cast<size_t>(i) * W + (W - 1)]) {
                f = eta(i, W - 1) * ws.uc.at(i, W - 1) * g.dy;
            }
            ws.fe.at(i, j) = f;
        }
    }
    for (int i = 0; i <= H; ++i) {
        for (int j = 0; j < W; ++j) {
            double f = 0.0;
            const bool sw = i > 0 && g.is_water(i - 1, j);
            const bool nw = i < H && g.is_water(i, j);
            if (sw && nw) {
                f = 0.5 * (eta(i - 1, j) + eta(i, j)) * 0.5 * (ws.vc.at(i - 1, j) + ws.vc.at(i, j)) * g.dx;
            } else if (i == 0 && nw && open_cell[j]) {
                f = eta(0, j) * ws.vc.at(0, j) * g.dx;
            } else if (i == H && sw && open_cell[static_cast<size_t>(H - 1) * W + j]) {
                f = eta(H - 1, j) * ws.vc.at(H - 1, j) * g.dx;
            }
            ws.fn.at(i, j) = f;
        }
    }

    const double inv_area = 1.0 / (g.dx * g.dy);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            ws.col_div.at(i, j) = (ws.fe.at(i, j + 1) - ws.fe.at(i, j) + ws.fn.at(i + 1, j) - ws.fn.at(i, j)) * inv_area;
}

}  // namespace

void ShallowWaterSolver::continuity(StaggeredState& s, Field2& col_div) const {
    const int H = grid_.H, W = grid_.W;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            if (grid_.is_water(i, j)) s.zeta.at(i, j) -= grid_.dt * col_div.at(i, j);
}

void ShallowWaterSolver::momentum(StaggeredState& s, Field2& gradx, Field2& grady, bool open_active) const {
    const int H = grid_.H, W = grid_.W;
    const double gdt = params_.gravity * grid_.dt;
    const double fric = 1.0 / (1.0 + params_.friction * grid_.dt);

    // Depth-weighted gradients on interior faces, zero on wall and domain
    // edge faces. The force below is S(H*grad)/H with the same smoothing S
    // the continuity flux applies, the exact adjoint over variable
    // bathymetry; the unweighted form feeds energy on sloping depth.
    for (int i = 0; i < H; ++i)
        for (int j = 0; j <= W; ++j) {
            const bool interior = j > 0 && j < W && grid_.is_water(i, j - 1) && grid_.is_water(i, j);
            gradx.at(i, j) = interior ? 0.5 * (grid_.depth.at(i, j - 1) + grid_.depth.at(i, j)) *
                                            (s.zeta.at(i, j) - s.zeta.at(i, j - 1)) / grid_.dx
                                      : 0.0;
        }
    for (int i = 0; i <= H; ++i)
        for (int j = 0; j < W; ++j) {
            const bool interior = i > 0 && i < H && grid_.is_water(i - 1, j) && grid_.is_water(i, j);
            grady.at(i, j) = interior ? 0.5 * (grid_.depth.at(i - 1, j) + grid_.depth.at(i, j)) *
                                            (s.zeta.at(i, j) - s.zeta.at(i - 1, j)) / grid_.dy
                                      : 0.0;
        }

    const bool visc = params_.viscosity > 0;
    const double nudt = params_.viscosity * grid_.dt;
    for (int i = 0; i < H; ++i) {
        for (int j = 1; j < W; ++j) {
            if (!(grid_.is_water(i, j - 1) && grid_.is_water(i, j))) continue;
            const double hf = 0.5 * (grid_.depth.at(i, j - 1) + grid_.depth.at(i, j));
            const double force =
                (0.25 * gradx.at(i, j - 1) + 0.5 * gradx.at(i, j) + 0.25 * gradx.at(i, j + 1)) / hf;
            double lap = 0.0;
            if (visc) {
                const double c = s.u.at(i, j);
                const double e = s.u.at(i, j + 1), w = s.u.at(i, j - 1);
                const double n = i + 1 < H ? s.u.at(i + 1, j) : c, so = i > 0 ? s.u.at(i - 1, j) : c;
                lap = (e - 2 * c + w) / (grid_.dx * grid_.dx) + (n - 2 * c + so) / (grid_.dy * grid_.dy);
            }
            s.u.at(i, j) = (s.u.at(i, j) - gdt * force + nudt * lap) * fric;
        }
    }
    for (int i = 1; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            if (!(grid_.is_water(i - 1, j) && grid_.is_water(i, j))) continue;
            const double hf = 0.5 * (grid_.depth.at(i - 1, j) + grid_.depth.at(i, j));
            const double force =
                (0.25 * grady.at(i - 1, j) + 0.5 * grady.at(i, j) + 0.25 * grady.at(i + 1, j)) / hf;
            double lap = 0.0;
            if (visc) {
                const double c = s.v.at(i, j);
                const double n = s.v.at(i + 1, j), so = s.v.at(i - 1, j);
                const double e = j + 1 < W ? s.v.at(i, j + 1) : c, w = j > 0 ? s.v.at(i, j - 1) : c;
                lap = (e - 2 * c + w) / (grid_.dx * grid_.dx) + (n - 2 * c + so) / (grid_.dy * grid_.dy);
            }
            s.v.at(i, j) = (s.v.at(i, j) - gdt * force + nudt * lap) * fric;
        }
    }

    if (!open_active) return;

    // Zero-gradient velocity on the forced open edge.
    const int W1 = W + 1;
    switch (params_.open_edge) {
        case OpenEdge::West:
            for (int i = 0; i < H; ++i)
                if (open_cell_[static_cast<size_t>(i) * W]) s.u.at(i, 0) = s.u.at(i, 1);
            break;
        case OpenEdge::East:
            for (int i = 0; i < H; ++i)
                if (open_cell_[static_cast<size_t>(i) * W + W - 1]) s.u.at(i, W1 - 1) = s.u.at(i, W1 - 2);
            break;
        case OpenEdge::South:
            for (int j = 0; j < W; ++j)
                if (open_cell_[j]) s.v.at(0, j) = s.v.at(1, j);
            break;
        case OpenEdge::North:
            for (int j = 0; j < W; ++j)
                if (open_cell_[static_cast<size_t>(H - 1) * W + j]) s.v.at(H, j) = s.v.at(H - 1, j);
            break;
        case OpenEdge::None: break;
    }
}

void ShallowWaterSolver::step(StaggeredState& s, std::optional<double> boundary_zeta) const {
    if (params_.cfl_check) check_cfl();
    Workspace ws = make_workspace(grid_);
    const bool open_active = boundary_zeta.has_value();
    compute_fluxes(grid_, params_, open_active ? open_cell_ : closed_mask_, s, ws);
    continuity(s, ws.col_div);
    s.time += grid_.dt;
    if (boundary_zeta) {
        const int W = grid_.W;
        for (int i = 0; i < grid_.H; ++i)
            for (int j = 0; j < W; ++j)
                if (open_cell_[static_cast<size_t>(i) * W + j]) s.zeta.at(i, j) = *boundary_zeta;
    }
    momentum(s, ws.gradx, ws.grady, open_active);

    double acc = 0.0;
    for (double z : s.zeta.v) acc += z;
    if (!std::isfinite(acc)) throw DivergenceError("free surface became non-finite");
}

State ShallowWaterSolver::export_centered(const StaggeredState& s) const {
    State out = make_state(grid_, s.time);
    Workspace ws = make_workspace(grid_);
    compute_fluxes(grid_, params_, open_cell_, s, ws);  // w diagnostic only
    const int H = grid_.H, W = grid_.W, D = grid_.D;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            if (grid_.is_land(i, j)) continue;
            out.zeta.at(i, j) = s.zeta.at(i, j);
            const double uc = ws.uc.at(i, j), vc = ws.vc.at(i, j);
            const double wsurf = -ws.col_div.at(i, j);
            for (int k = 0; k < D; ++k) {
                out.u.at(k, i, j) = uc;
                out.v.at(k, i, j) = vc;
                out.w.at(k, i, j) = wsurf * static_cast<double>(k + 1) / D;
            }
        }
    }
    return out;
}

StaggeredState ShallowWaterSolver::from_centered(const State& s) const {
    StaggeredState st = make_staggered(grid_, s.time);
    const int H = grid_.H, W = grid_.W, D = grid_.D;
    auto umean = [&](int i, int j) {
        double a = 0.0;
        for (int k = 0; k < D; ++k) a += s.u.at(k, i, j);
        return a / D;
    };
    auto vmean = [&](int i, int j) {
        double a = 0.0;
        for (int k = 0; k < D; ++k) a += s.v.at(k, i, j);
        return a / D;
    };
    st.zeta = s.zeta;
    for (int i = 0; i < H; ++i)
        for (int j = 1; j < W; ++j)
            if (grid_.is_water(i, j - 1) && grid_.is_water(i, j))
                st.u.at(i, j) = 0.5 * (umean(i, j - 1) + umean(i, j));
    for (int i = 1; i < H; ++i)
        for (int j = 0; j < W; ++j)
            if (grid_.is_water(i - 1, j) && grid_.is_water(i, j))
                st.v.at(i, j) = 0.5 * (vmean(i - 1, j) + vmean(i, j));
    switch (params_.open_edge) {
        case OpenEdge::West:
            for (int i = 0; i < H; ++i)
                if (open_cell_[static_cast<size_t>(i) * W]) st.u.at(i, 0) = st.u.at(i, 1);
            break;
        case OpenEdge::East:
            for (int i = 0; i < H; ++i)
                if (open_cell_[static_cast<size_t>(i) * W + W - 1]) st.u.at(i, W) = st.u.at(i, W - 1);
            break;
        case OpenEdge::South:
            for (int j = 0; j < W; ++j)
                if (open_cell_[j]) st.v.at(0, j) = st.v.at(1, j);
            break;
        case OpenEdge::North:
            for (int j = 0; j < W; ++j)
                if (open_cell_[static_cast<size_t>(H - 1) * W + j]) st.v.at(H, j) = st.v.at(H - 1, j);
            break;
        case OpenEdge::None: break;
    }
    return st;
}

Trajectory ShallowWaterSolver::simulate(const StaggeredState& initial, const TidalForcing& forcing,
                                        int n_steps, int record_every) const {
    std::vector<StaggeredState> handoffs;
    return simulate_with_handoffs(initial, forcing, n_steps, record_every, {}, handoffs);
}

Trajectory ShallowWaterSolver::simulate_with_handoffs(const StaggeredState& initial,
                                                      const TidalForcing& forcing, int n_steps,
                                                      int record_every,
                                                      const std::vector<int>& handoff_steps,
                                                      std::vector<StaggeredState>& handoffs) const {
    require(n_steps >= 1, "n_steps must be >= 1");
    require(record_every >= 1, "record_every must be >= 1");
    require(n_steps % record_every == 0, "n_steps must be divisible by record_every");
    validate_forcing(forcing);
    if (params_.cfl_check) check_cfl();

    Trajectory traj;
    traj.grid = grid_;
    traj.interval = grid_.dt * record_every;
    traj.states.reserve(static_cast<size_t>(n_steps / record_every) + 1);

    StaggeredState s = initial;
    Workspace ws = make_workspace(grid_);
    const bool open_active = !forcing.empty() && params_.open_edge != OpenEdge::None;
    const std::vector<uint8_t>& flux_mask = open_active ? open_cell_ : closed_mask_;
    size_t next_handoff = 0;
    auto maybe_handoff = [&](int step_index) {
        if (next_handoff < handoff_steps.size() && handoff_steps[next_handoff] == step_index) {
            handoffs.push_back(s);
            ++next_handoff;
        }
    };

    maybe_handoff(0);
    traj.states.push_back(export_centered(s));
    for (int n = 1; n <= n_steps; ++n) {
        compute_fluxes(grid_, params_, flux_mask, s, ws);
        continuity(s, ws.col_div);
        s.time += grid_.dt;
        if (open_active) {
            const double zb = tidal_boundary(s.time, forcing);
            const int W = grid_.W;
            for (int i = 0; i < grid_.H; ++i)
                for (int j = 0; j < W; ++j)
                    if (open_cell_[static_cast<size_t>(i) * W + j]) s.zeta.at(i, j) = zb;
        }
        momentum(s, ws.gradx, ws.grady, open_active);

        double acc = 0.0;
        for (double z : s.zeta.v) acc += z;
        if (!std::isfinite(acc))
            throw DivergenceError("free surface became non-finite at step " + std::to_string(n));

        maybe_handoff(n);
        if (n % record_every == 0) traj.states.push_back(export_centered(s));
    }
    return traj;
}

double ShallowWaterSolver::discrete_energy(const StaggeredState& prev, const StaggeredState& cur) const {
    const int H = grid_.H, W = grid_.W;
    const double dA = grid_.dx * grid_.dy;
    double pot = 0.0;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            if (grid_.is_water(i, j)) pot += cur.zeta.at(i, j) * cur.zeta.at(i, j);
    pot *= 0.5 * params_.gravity * dA;

    double kin = 0.0;
    for (int i = 0; i < H; ++i)
        for (int j = 1; j < W; ++j)
            if (grid_.is_water(i, j - 1) && grid_.is_water(i, j)) {
                const double hf = 0.5 * (grid_.depth.at(i, j - 1) + grid_.depth.at(i, j));
                kin += hf * prev.u.at(i, j) * cur.u.at(i, j);
            }
    for (int i = 1; i < H; ++i)
        for (int j = 0; j < W; ++j)
            if (grid_.is_water(i - 1, j) && grid_.is_water(i, j)) {
                const double hf = 0.5 * (grid_.depth.at(i - 1, j) + grid_.depth.at(i, j));
                kin += hf * prev.v.at(i, j) * cur.v.at(i, j);
            }
    return pot + 0.5 * kin * dA;
}

State step(const State& state, const GridSpec& grid, const SolverParams& params,
           std::optional<double> boundary_zeta) {
    ShallowWaterSolver solver(grid, params);
    StaggeredState s = solver.from_centered(state);
    solver.step(s, boundary_zeta);
    return solver.export_centered(s);
}

Trajectory simulate(const State& initial, const GridSpec& grid, const SolverParams& params,
                    const TidalForcing& forcing, int n_steps, int record_every) {
    ShallowWaterSolver solver(grid, params);
    return solver.simulate(solver.from_centered(initial), forcing, n_steps, record_every);
}

}  // namespace tidecast
