// SPDX-License-Identifier: Apache-2.0
#include "tidecast/grid.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <malloc.h>

#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tidecast {

namespace {
// Large tensors churn through the allocator; with the default 128 KB mmap
// threshold every one pays a full page-fault cycle. Keep big blocks on the
// heap so they get reused.
struct AllocatorTuning {
    AllocatorTuning() {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
    }
} allocator_tuning;
}  // namespace

double GridSpec::max_depth() const {
    double m = 0.0;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            if (is_water(i, j)) m = std::max(m, depth.at(i, j));
    return m;
}

size_t GridSpec::n_water() const {
    size_t n = 0;
    for (uint8_t l : land) n += (l == 0);
    return n;
}

std::vector<std::pair<int, int>> GridSpec::ring_cells() const {
    std::vector<std::pair<int, int>> ring;
    ring.reserve(ring_size());
    if (H == 1) {
        for (int j = 0; j < W; ++j) ring.emplace_back(0, j);
        return ring;
    }
    if (W == 1) {
        for (int i = 0; i < H; ++i) ring.emplace_back(i, 0);
        return ring;
    }
    for (int j = 0; j < W; ++j) ring.emplace_back(0, j);            // south, west->east
    for (int i = 1; i < H; ++i) ring.emplace_back(i, W - 1);        // east, south->north
    for (int j = W - 2; j >= 0; --j) ring.emplace_back(H - 1, j);   // north, east->west
    for (int i = H - 2; i >= 1; --i) ring.emplace_back(i, 0);       // west, north->south
    return ring;
}

GridSpec make_grid(int H, int W, int D, double dx, double dy, const Field2& depth, double dt,
                   std::vector<uint8_t> land_mask) {
    require(H >= 1 && W >= 1 && D >= 1, "grid dimensions must be >= 1");
    require(dx > 0 && dy > 0, "cell sizes must be positive");
    require(dt > 0, "time step must be positive");
    require(depth.H == H && depth.W == W, "depth field shape must match grid");
    if (land_mask.empty()) land_mask.assign(static_cast<size_t>(H) * W, 0);
    require(land_mask.size() == static_cast<size_t>(H) * W, "land mask shape must match grid");

    GridSpec g;
    g.H = H;
    g.W = W;
    g.D = D;
    g.dx = dx;
    g.dy = dy;
    g.dt = dt;
    g.depth = depth;
    g.land = std::move(land_mask);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            if (g.is_water(i, j))
                require(depth.at(i, j) > 0, "depth must be positive on water cells");
    return g;
}

GridSpec make_grid(int H, int W, int D, double dx, double dy, double depth, double dt,
                   std::vector<uint8_t> land_mask) {
    require(H >= 1 && W >= 1, "grid dimensions must be >= 1");
    return make_grid(H, W, D, dx, dy, Field2(H, W, depth), dt, std::move(land_mask));
}

State make_state(const GridSpec& grid, double time) {
    State s;
    s.u = Field3(grid.D, grid.H, grid.W);
    s.v = Field3(grid.D, grid.H, grid.W);
    s.w = Field3(grid.D, grid.H, grid.W);
    s.zeta = Field2(grid.H, grid.W);
    s.time = time;
    return s;
}

void validate_state(const State& s, const GridSpec& grid) {
    auto check_finite = [](const std::vector<double>& v, const char* name) {
        for (double x : v)
            if (!std::isfinite(x)) throw DivergenceError(std::string(name) + " contains non-finite values");
    };
    check_finite(s.u.v, "u");
    check_finite(s.v.v, "v");
    check_finite(s.w.v, "w");
    check_finite(s.zeta.v, "zeta");
    for (int i = 0; i < grid.H; ++i) {
        for (int j = 0; j < grid.W; ++j) {
            if (grid.is_water(i, j)) {
                if (s.zeta.at(i, j) <= -grid.depth.at(i, j))
                    throw DivergenceError("water column depth went non-positive");
            } else {
                bool zero = s.zeta.at(i, j) == 0.0;
                for (int k = 0; k < grid.D && zero; ++k)
                    zero = s.u.at(k, i, j) == 0.0 && s.v.at(k, i, j) == 0.0 && s.w.at(k, i, j) == 0.0;
                if (!zero) throw ConfigError("land cells must carry zero fields");
            }
        }
    }
}

BoundaryRing extract_boundary(const State& s, const GridSpec& grid) {
    BoundaryRing ring;
    auto cells = grid.ring_cells();
    const int R = static_cast<int>(cells.size());
    ring.zeta.resize(R);
    ring.u.resize(static_cast<size_t>(grid.D) * R);
    ring.v.resize(static_cast<size_t>(grid.D) * R);
    for (int r = 0; r < R; ++r) {
        auto [i, j] = cells[r];
        ring.zeta[r] = s.zeta.at(i, j);
        for (int k = 0; k < grid.D; ++k) {
            ring.u[static_cast<size_t>(k) * R + r] = s.u.at(k, i, j);
            ring.v[static_cast<size_t>(k) * R + r] = s.v.at(k, i, j);
        }
    }
    return ring;
}

void scatter_boundary(const BoundaryRing& ring, const GridSpec& grid, State& into) {
    auto cells = grid.ring_cells();
    const int R = static_cast<int>(cells.size());
    require(static_cast<int>(ring.zeta.size()) == R, "boundary ring length must match grid perimeter");
    for (int r = 0; r < R; ++r) {
        auto [i, j] = cells[r];
        into.zeta.at(i, j) = ring.zeta[r];
        for (int k = 0; k < grid.D; ++k) {
            into.u.at(k, i, j) = ring.u[static_cast<size_t>(k) * R + r];
            into.v.at(k, i, j) = ring.v[static_cast<size_t>(k) * R + r];
        }
    }
}

StaggeredState make_staggered(const GridSpec& grid, double time) {
    StaggeredState s;
    s.zeta = Field2(grid.H, grid.W);
    s.u = Field2(grid.H, grid.W + 1);
    s.v = Field2(grid.H + 1, grid.W);
    s.time = time;
    return s;
}

Field2 center_u(const StaggeredState& s) {
    Field2 c(s.zeta.H, s.zeta.W);
    for (int i = 0; i < c.H; ++i)
        for (int j = 0; j < c.W; ++j) c.at(i, j) = 0.5 * (s.u.at(i, j) + s.u.at(i, j + 1));
    return c;
}

Field2 center_v(const StaggeredState& s) {
    Field2 c(s.zeta.H, s.zeta.W);
    for (int i = 0; i < c.H; ++i)
        for (int j = 0; j < c.W; ++j) c.at(i, j) = 0.5 * (s.v.at(i, j) + s.v.at(i + 1, j));
    return c;
}

// --- disk format ---------------------------------------------------------

namespace {

void write_f32(const std::string& path, const std::vector<double>& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    std::vector<float> buf(data.size());
    for (size_t i = 0; i < data.size(); ++i) buf[i] = static_cast<float>(data[i]);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!f) throw IoError("short write: " + path);
}

std::vector<double> read_f32(const std::string& path, size_t expected) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::vector<float> buf(expected);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected * 4));
    if (static_cast<size_t>(f.gcount()) != expected * 4) throw IoError("short read: " + path);
    std::vector<double> out(expected);
    for (size_t i = 0; i < expected; ++i) out[i] = buf[i];
    return out;
}

std::string var_file(const std::string& dir, const std::string& var, int index) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%06d.bin", var.c_str(), index);
    return dir + "/" + name;
}

void write_snapshot(const std::string& dir, const State& s, int index) {
    write_f32(var_file(dir, "u", index), s.u.v);
    write_f32(var_file(dir, "v", index), s.v.v);
    write_f32(var_file(dir, "w", index), s.w.v);
    write_f32(var_file(dir, "zeta", index), s.zeta.v);
}

json grid_meta(const GridSpec& g) {
    return json{{"H", g.H},   {"W", g.W},   {"D", g.D},
                {"dx", g.dx}, {"dy", g.dy}, {"dt", g.dt}};
}

GridSpec grid_from_meta(const json& j, const std::string& dir) {
    int H = j.at("H"), W = j.at("W"), D = j.at("D");
    Field2 depth(H, W);
    depth.v = read_f32(dir + "/depth.bin", depth.size());
    std::vector<uint8_t> land(static_cast<size_t>(H) * W, 0);
    std::ifstream lf(dir + "/land.bin", std::ios::binary);
    if (!lf) throw IoError("cannot open for reading: " + dir + "/land.bin");
    lf.read(reinterpret_cast<char*>(land.data()), static_cast<std::streamsize>(land.size()));
    if (static_cast<size_t>(lf.gcount()) != land.size()) throw IoError("short read: " + dir + "/land.bin");
    return make_grid(H, W, D, j.at("dx"), j.at("dy"), depth, j.at("dt"), std::move(land));
}

void write_grid_files(const std::string& dir, const GridSpec& g) {
    write_f32(dir + "/depth.bin", g.depth.v);
    std::ofstream lf(dir + "/land.bin", std::ios::binary);
    lf.write(reinterpret_cast<const char*>(g.land.data()), static_cast<std::streamsize>(g.land.size()));
    if (!lf) throw IoError("cannot write " + dir + "/land.bin");
}

}  // namespace

void save_trajectory(const Trajectory& traj, const std::string& dir) {
    TrajectoryWriter w(dir, traj.grid, traj.interval);
    for (const State& s : traj.states) w.append(s);
    w.finish();
}

Trajectory load_trajectory(const std::string& dir) {
    TrajectoryReader r(dir);
    Trajectory traj;
    traj.grid = r.grid();
    traj.interval = r.interval();
    traj.states.reserve(r.size());
    for (int i = 0; i < r.size(); ++i) traj.states.push_back(r.read(i));
    return traj;
}

TrajectoryWriter::TrajectoryWriter(const std::string& dir, const GridSpec& grid, double interval)
    : dir_(dir), grid_(grid), interval_(interval) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create directory: " + dir_);
    write_grid_files(dir_, grid_);
}

void TrajectoryWriter::append(const State& s) {
    if (count_ == 0) time0_ = s.time;
    write_snapshot(dir_, s, count_);
    ++count_;
}

void TrajectoryWriter::finish() {
    if (finished_) return;
    json meta = grid_meta(grid_);
    meta["interval"] = interval_;
    meta["time0"] = time0_;
    meta["count"] = count_;
    meta["variables"] = {"u", "v", "w", "zeta"};
    meta["element_type"] = "float32 little-endian";
    meta["layout"] = "C-order";
    std::ofstream f(dir_ + "/meta.json");
    if (!f) throw IoError("cannot write " + dir_ + "/meta.json");
    f << meta.dump(2) << "\n";
    finished_ = true;
}

TrajectoryWriter::~TrajectoryWriter() {
    try {
        finish();
    } catch (...) {
        // destructor must not throw; finish() explicitly to observe errors
    }
}

TrajectoryReader::TrajectoryReader(const std::string& dir) : dir_(dir) {
    std::ifstream f(dir + "/meta.json");
    if (!f) throw IoError("cannot open " + dir + "/meta.json");
    json meta;
    try {
        f >> meta;
    } catch (const json::exception& e) {
        throw IoError("malformed meta.json in " + dir + ": " + e.what());
    }
    grid_ = grid_from_meta(meta, dir);
    interval_ = meta.at("interval");
    time0_ = meta.value("time0", 0.0);
    count_ = meta.at("count");
}

State TrajectoryReader::read(int index) const {
    if (index < 0 || index >= count_) throw IoError("snapshot index out of range in " + dir_);
    State s = make_state(grid_);
    s.u.v = read_f32(var_file(dir_, "u", index), s.u.size());
    s.v.v = read_f32(var_file(dir_, "v", index), s.v.size());
    s.w.v = read_f32(var_file(dir_, "w", index), s.w.size());
    s.zeta.v = read_f32(var_file(dir_, "zeta", index), s.zeta.size());
    s.time = time0_ + interval_ * index;
    return s;
}

}  // namespace tidecast
