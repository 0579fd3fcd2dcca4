// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tidecast/common.hpp"

namespace tidecast {

// Dense 2D field, row-major (i = north-south row, j = east-west column).
struct Field2 {
    int H = 0, W = 0;
    std::vector<double> v;

    Field2() = default;
    Field2(int h, int w, double fill = 0.0) : H(h), W(w), v(static_cast<size_t>(h) * w, fill) {}

    double& at(int i, int j) { return v[static_cast<size_t>(i) * W + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * W + j]; }
    size_t size() const { return v.size(); }
    bool same_shape(const Field2& o) const { return H == o.H && W == o.W; }
};

// Dense 3D field, C-order [D][H][W]; level k = 0 is the bottom layer.
struct Field3 {
    int D = 0, H = 0, W = 0;
    std::vector<double> v;

    Field3() = default;
    Field3(int d, int h, int w, double fill = 0.0)
        : D(d), H(h), W(w), v(static_cast<size_t>(d) * h * w, fill) {}

    double& at(int k, int i, int j) { return v[(static_cast<size_t>(k) * H + i) * W + j]; }
    double at(int k, int i, int j) const { return v[(static_cast<size_t>(k) * H + i) * W + j]; }
    size_t size() const { return v.size(); }
    bool same_shape(const Field3& o) const { return D == o.D && H == o.H && W == o.W; }
};

// Mesh geometry shared by solver, dataset, model, and verifier.
// Horizontal cells are uniform rectangles; the vertical axis is D fixed
// levels spanning the still-water depth of each column.
struct GridSpec {
    int H = 0;          // cell count north-south
    int W = 0;          // cell count east-west
    int D = 1;          // vertical level count
    double dx = 0.0;    // east-west cell edge length [m]
    double dy = 0.0;    // north-south cell edge length [m]
    double dt = 0.0;    // solver time step [s]
    Field2 depth;       // still-water depth h [m], positive down, per column
    std::vector<uint8_t> land;  // H*W, 1 = land (zero fields, excluded from stats)

    bool is_land(int i, int j) const { return land[static_cast<size_t>(i) * W + j] != 0; }
    bool is_water(int i, int j) const { return !is_land(i, j); }
    bool on_ring(int i, int j) const { return i == 0 || j == 0 || i == H - 1 || j == W - 1; }
    int ring_size() const { return H == 1 || W == 1 ? H * W : 2 * H + 2 * W - 4; }
    double max_depth() const;
    size_t n_water() const;

    // Perimeter traversal in the canonical order: south edge west->east,
    // east edge south->north, north edge east->west, west edge north->south.
    std::vector<std::pair<int, int>> ring_cells() const;
};

GridSpec make_grid(int H, int W, int D, double dx, double dy, const Field2& depth, double dt,
                   std::vector<uint8_t> land_mask = {});
GridSpec make_grid(int H, int W, int D, double dx, double dy, double depth, double dt,
                   std::vector<uint8_t> land_mask = {});

// One cell-centered snapshot. u, v, w are D x H x W; zeta is H x W.
// w is stored at the top interface of each level, so level D-1 carries the
// free-surface vertical velocity.
struct State {
    Field3 u, v, w;
    Field2 zeta;
    double time = 0.0;
};

State make_state(const GridSpec& grid, double time = 0.0);

// Throws if any field is non-finite, zeta drops below -depth on water cells,
// or land cells carry nonzero values.
void validate_state(const State& s, const GridSpec& grid);

struct Trajectory {
    GridSpec grid;
    double interval = 0.0;  // seconds between consecutive states
    std::vector<State> states;
};

// Boundary-ring values of one snapshot, in ring traversal order.
// u and v hold D*R values (level-major).
struct BoundaryRing {
    std::vector<double> zeta;
    std::vector<double> u, v;
};

BoundaryRing extract_boundary(const State& s, const GridSpec& grid);
// Scatters ring values back into the perimeter entries of the given state.
void scatter_boundary(const BoundaryRing& ring, const GridSpec& grid, State& into);

// Boundary conditions for a forecast horizon: one ring per target step t1..T.
struct BoundarySeries {
    std::vector<BoundaryRing> steps;
    int horizon() const { return static_cast<int>(steps.size()); }
};

// Arakawa C-grid snapshot: zeta at centers, u on x-normal faces (H x W+1),
// v on y-normal faces (H+1 x W). Depth-averaged (barotropic) velocities.
struct StaggeredState {
    Field2 zeta;
    Field2 u;
    Field2 v;
    double time = 0.0;
};

StaggeredState make_staggered(const GridSpec& grid, double time = 0.0);

// Staggered-to-centered convention: per-cell mean of the two bracketing faces.
Field2 center_u(const StaggeredState& s);
Field2 center_v(const StaggeredState& s);

// --- Trajectory directory format ---------------------------------------
// A directory holding meta.json plus one raw float32 little-endian C-order
// file per snapshot per variable, named {var}_{index:06d}.bin.

void save_trajectory(const Trajectory& traj, const std::string& dir);
Trajectory load_trajectory(const std::string& dir);

class TrajectoryWriter {
  public:
    TrajectoryWriter(const std::string& dir, const GridSpec& grid, double interval);
    void append(const State& s);
    void finish();  // writes meta.json; called by destructor if needed
    ~TrajectoryWriter();

  private:
    std::string dir_;
    GridSpec grid_;
    double interval_ = 0.0;
    double time0_ = 0.0;
    int count_ = 0;
    bool finished_ = false;
};

class TrajectoryReader {
  public:
    explicit TrajectoryReader(const std::string& dir);
    const GridSpec& grid() const { return grid_; }
    double interval() const { return interval_; }
    double time0() const { return time0_; }
    int size() const { return count_; }
    State read(int index) const;

  private:
    std::string dir_;
    GridSpec grid_;
    double interval_ = 0.0;
    double time0_ = 0.0;
    int count_ = 0;
};

}  // namespace tidecast
