// SPDX-License-Identifier: Apache-2.0
#include "tidecast/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tidecast {

void NormStats::validate() const {
    require(std_u > 0 && std_v > 0 && std_w > 0 && std_zeta > 0,
            "normalization std must be positive for every variable");
}

namespace {

struct Welford {
    double mean = 0, m2 = 0;
    size_t n = 0;
    void add(double x) {
        ++n;
        const double d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    double std() const { return n > 0 ? std::sqrt(m2 / n) : 0.0; }
};

struct StatsAcc {
    Welford u, v, w, zeta;
    void add_state(const State& s, const GridSpec& g) {
        for (int i = 0; i < g.H; ++i)
            for (int j = 0; j < g.W; ++j) {
                if (g.is_land(i, j)) continue;
                zeta.add(s.zeta.at(i, j));
                for (int k = 0; k < g.D; ++k) {
                    u.add(s.u.at(k, i, j));
                    v.add(s.v.at(k, i, j));
                    w.add(s.w.at(k, i, j));
                }
            }
    }
    NormStats finish() const {
        NormStats ns{u.mean, u.std(), v.mean, v.std(), w.mean, w.std(), zeta.mean, zeta.std()};
        ns.validate();
        return ns;
    }
};

}  // namespace

NormStats compute_norm_stats(const std::vector<State>& states, const GridSpec& grid) {
    require(!states.empty(), "cannot compute statistics of an empty state set");
    StatsAcc acc;
    for (const State& s : states) acc.add_state(s, grid);
    return acc.finish();
}

NormStats compute_norm_stats(const TrajectoryReader& reader) {
    require(reader.size() > 0, "cannot compute statistics of an empty trajectory");
    StatsAcc acc;
    for (int n = 0; n < reader.size(); ++n) acc.add_state(reader.read(n), reader.grid());
    return acc.finish();
}

void save_norm_stats(const NormStats& s, const std::string& path) {
    json j = {{"u", {{"mean", s.mean_u}, {"std", s.std_u}}},
              {"v", {{"mean", s.mean_v}, {"std", s.std_v}}},
              {"w", {{"mean", s.mean_w}, {"std", s.std_w}}},
              {"zeta", {{"mean", s.mean_zeta}, {"std", s.std_zeta}}}};
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump(2) << "\n";
}

NormStats load_norm_stats(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed norm stats " + path + ": " + e.what());
    }
    NormStats s{j.at("u").at("mean"),    j.at("u").at("std"),    j.at("v").at("mean"),
                j.at("v").at("std"),     j.at("w").at("mean"),   j.at("w").at("std"),
                j.at("zeta").at("mean"), j.at("zeta").at("std")};
    s.validate();
    return s;
}

State interpolate_to_centers(const StaggeredState& s, const GridSpec& grid) {
    State out = make_state(grid, s.time);
    Field2 uc = center_u(s), vc = center_v(s);
    for (int i = 0; i < grid.H; ++i)
        for (int j = 0; j < grid.W; ++j) {
            if (grid.is_land(i, j)) continue;
            out.zeta.at(i, j) = s.zeta.at(i, j);
            for (int k = 0; k < grid.D; ++k) {
                out.u.at(k, i, j) = uc.at(i, j);
                out.v.at(k, i, j) = vc.at(i, j);
            }
        }
    return out;
}

namespace {

int pad_up(int n, int p) { return (p - n % p) % p; }

Field3 pad_field3(const Field3& f, const PadRecord& pad) {
    Field3 out(f.D + pad.dd, f.H + pad.dh, f.W + pad.dw);
    for (int k = 0; k < f.D; ++k)
        for (int i = 0; i < f.H; ++i)
            for (int j = 0; j < f.W; ++j) out.at(k, i, j) = f.at(k, i, j);
    return out;
}

Field2 pad_field2(const Field2& f, const PadRecord& pad) {
    Field2 out(f.H + pad.dh, f.W + pad.dw);
    for (int i = 0; i < f.H; ++i)
        for (int j = 0; j < f.W; ++j) out.at(i, j) = f.at(i, j);
    return out;
}

}  // namespace

PaddedState pad_to_patch_multiple(const State& s, int patch_h, int patch_w, int patch_d) {
    require(patch_h >= 1 && patch_w >= 1 && patch_d >= 1, "patch sizes must be >= 1");
    PadRecord pad{pad_up(s.zeta.H, patch_h), pad_up(s.zeta.W, patch_w), pad_up(s.u.D, patch_d)};
    PaddedState out;
    out.pad = pad;
    if (!pad.any()) {
        out.state = s;
        return out;
    }
    out.state.u = pad_field3(s.u, pad);
    out.state.v = pad_field3(s.v, pad);
    out.state.w = pad_field3(s.w, pad);
    out.state.zeta = pad_field2(s.zeta, pad);
    out.state.time = s.time;
    return out;
}

State crop_from_pad(const State& s, const PadRecord& pad) {
    if (!pad.any()) return s;
    State out;
    out.time = s.time;
    const int D = s.u.D - pad.dd, H = s.zeta.H - pad.dh, W = s.zeta.W - pad.dw;
    require(D >= 1 && H >= 1 && W >= 1, "pad record exceeds state extent");
    out.u = Field3(D, H, W);
    out.v = Field3(D, H, W);
    out.w = Field3(D, H, W);
    out.zeta = Field2(H, W);
    for (int k = 0; k < D; ++k)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                out.u.at(k, i, j) = s.u.at(k, i, j);
                out.v.at(k, i, j) = s.v.at(k, i, j);
                out.w.at(k, i, j) = s.w.at(k, i, j);
            }
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) out.zeta.at(i, j) = s.zeta.at(i, j);
    return out;
}

GridSpec pad_grid(const GridSpec& grid, const PadRecord& pad) {
    if (!pad.any()) return grid;
    GridSpec g;
    g.H = grid.H + pad.dh;
    g.W = grid.W + pad.dw;
    g.D = grid.D + pad.dd;
    g.dx = grid.dx;
    g.dy = grid.dy;
    g.dt = grid.dt;
    g.depth = pad_field2(grid.depth, pad);
    g.land.assign(static_cast<size_t>(g.H) * g.W, 1);
    for (int i = 0; i < grid.H; ++i)
        for (int j = 0; j < grid.W; ++j)
            g.land[static_cast<size_t>(i) * g.W + j] = grid.land[static_cast<size_t>(i) * grid.W + j];
    return g;
}

namespace {

State apply_zscore(const State& s, const NormStats& st, const GridSpec& grid, bool forward) {
    st.validate();
    State out = s;
    auto map3 = [&](Field3& f, double mean, double std) {
        for (int k = 0; k < f.D; ++k)
            for (int i = 0; i < grid.H; ++i)
                for (int j = 0; j < grid.W; ++j) {
                    if (grid.is_land(i, j)) continue;
                    double& x = f.at(k, i, j);
                    x = forward ? (x - mean) / std : x * std + mean;
                }
    };
    map3(out.u, st.mean_u, st.std_u);
    map3(out.v, st.mean_v, st.std_v);
    map3(out.w, st.mean_w, st.std_w);
    for (int i = 0; i < grid.H; ++i)
        for (int j = 0; j < grid.W; ++j) {
            if (grid.is_land(i, j)) continue;
            double& x = out.zeta.at(i, j);
            x = forward ? (x - st.mean_zeta) / st.std_zeta : x * st.std_zeta + st.mean_zeta;
        }
    return out;
}

}  // namespace

State normalize(const State& s, const NormStats& stats, const GridSpec& grid) {
    return apply_zscore(s, stats, grid, true);
}

State denormalize(const State& s, const NormStats& stats, const GridSpec& grid) {
    return apply_zscore(s, stats, grid, false);
}

int window_count(int n_states, int length, int stride) {
    if (n_states < length + 1) return 0;
    return (n_states - 1 - length) / stride + 1;
}

Sample make_window_sample(const Trajectory& traj, int start, int length) {
    Sample smp;
    smp.initial = traj.states.at(start);
    smp.interval = traj.interval;
    smp.targets.assign(traj.states.begin() + start + 1, traj.states.begin() + start + 1 + length);
    smp.boundaries.steps.reserve(length);
    for (const State& t : smp.targets) smp.boundaries.steps.push_back(extract_boundary(t, traj.grid));
    return smp;
}

std::vector<Sample> window_samples(const Trajectory& traj, int length, int stride) {
    require(length >= 1 && stride >= 1, "window length and stride must be >= 1");
    std::vector<Sample> out;
    const int n = window_count(static_cast<int>(traj.states.size()), length, stride);
    out.reserve(n);
    for (int k = 0; k < n; ++k) out.push_back(make_window_sample(traj, k * stride, length));
    return out;
}

Trajectory resample_coarse(const Trajectory& traj, int factor) {
    require(factor >= 1, "resampling factor must be >= 1");
    require(!traj.states.empty(), "cannot resample an empty trajectory");
    require((traj.states.size() - 1) % factor == 0, "factor must divide the usable length");
    Trajectory out;
    out.grid = traj.grid;
    out.interval = traj.interval * factor;
    for (size_t n = 0; n < traj.states.size(); n += factor) out.states.push_back(traj.states[n]);
    return out;
}

// --- sample directory format ----------------------------------------------

namespace {

void write_f32(const std::string& path, const std::vector<double>& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    std::vector<float> buf(data.begin(), data.end());
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!f) throw IoError("short write: " + path);
}

std::vector<double> read_f32(const std::string& path, size_t expected) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::vector<float> buf(expected);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected * 4));
    if (static_cast<size_t>(f.gcount()) != expected * 4) throw IoError("corrupt sample file: " + path);
    return {buf.begin(), buf.end()};
}

}  // namespace

void save_sample(const Sample& s, const GridSpec& grid, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir);

    write_f32(dir + "/initial_u.bin", s.initial.u.v);
    write_f32(dir + "/initial_v.bin", s.initial.v.v);
    write_f32(dir + "/initial_w.bin", s.initial.w.v);
    write_f32(dir + "/initial_zeta.bin", s.initial.zeta.v);

    const int T = s.boundaries.horizon();
    const int R = grid.ring_size();
    std::vector<double> boundary;
    boundary.reserve(static_cast<size_t>(T) * (static_cast<size_t>(R) + 2 * static_cast<size_t>(grid.D) * R));
    for (const BoundaryRing& ring : s.boundaries.steps) {
        boundary.insert(boundary.end(), ring.zeta.begin(), ring.zeta.end());
        boundary.insert(boundary.end(), ring.u.begin(), ring.u.end());
        boundary.insert(boundary.end(), ring.v.begin(), ring.v.end());
    }
    write_f32(dir + "/boundary.bin", boundary);

    auto cat3 = [&](const Field3 State::*member) {
        std::vector<double> all;
        for (const State& t : s.targets) {
            const Field3& f = t.*member;
            all.insert(all.end(), f.v.begin(), f.v.end());
        }
        return all;
    };
    write_f32(dir + "/target_u.bin", cat3(&State::u));
    write_f32(dir + "/target_v.bin", cat3(&State::v));
    write_f32(dir + "/target_w.bin", cat3(&State::w));
    std::vector<double> tz;
    for (const State& t : s.targets) tz.insert(tz.end(), t.zeta.v.begin(), t.zeta.v.end());
    write_f32(dir + "/target_zeta.bin", tz);

    json meta;
    meta["T"] = T;
    meta["ring"] = R;
    meta["interval"] = s.interval;
    meta["time0"] = s.initial.time;
    meta["normalized"] = s.normalized;
    meta["element_type"] = "float32 little-endian";
    meta["layout"] = "C-order";
    meta["boundary_layout"] = "per step: zeta[ring], u[D*ring], v[D*ring]";
    std::ofstream f(dir + "/meta.json");
    if (!f) throw IoError("cannot write " + dir + "/meta.json");
    f << meta.dump(2) << "\n";
}

Sample load_sample(const GridSpec& grid, const std::string& dir) {
    std::ifstream mf(dir + "/meta.json");
    if (!mf) throw IoError("cannot open " + dir + "/meta.json");
    json meta;
    try {
        mf >> meta;
    } catch (const json::exception& e) {
        throw IoError("malformed sample meta in " + dir + ": " + e.what());
    }
    const int T = meta.at("T");
    const int R = meta.at("ring");
    require(R == grid.ring_size(), "sample ring length does not match grid");

    Sample s;
    s.interval = meta.at("interval");
    s.normalized = meta.value("normalized", false);
    s.initial = make_state(grid, meta.value("time0", 0.0));
    s.initial.u.v = read_f32(dir + "/initial_u.bin", s.initial.u.size());
    s.initial.v.v = read_f32(dir + "/initial_v.bin", s.initial.v.size());
    s.initial.w.v = read_f32(dir + "/initial_w.bin", s.initial.w.size());
    s.initial.zeta.v = read_f32(dir + "/initial_zeta.bin", s.initial.zeta.size());

    const size_t per_step = static_cast<size_t>(R) + 2 * static_cast<size_t>(grid.D) * R;
    std::vector<double> boundary = read_f32(dir + "/boundary.bin", per_step * T);
    s.boundaries.steps.resize(T);
    size_t off = 0;
    for (int t = 0; t < T; ++t) {
        BoundaryRing& ring = s.boundaries.steps[t];
        ring.zeta.assign(boundary.begin() + off, boundary.begin() + off + R);
        off += R;
        ring.u.assign(boundary.begin() + off, boundary.begin() + off + static_cast<size_t>(grid.D) * R);
        off += static_cast<size_t>(grid.D) * R;
        ring.v.assign(boundary.begin() + off, boundary.begin() + off + static_cast<size_t>(grid.D) * R);
        off += static_cast<size_t>(grid.D) * R;
    }

    const size_t cells3 = static_cast<size_t>(grid.D) * grid.H * grid.W;
    const size_t cells2 = static_cast<size_t>(grid.H) * grid.W;
    std::vector<double> tu = read_f32(dir + "/target_u.bin", cells3 * T);
    std::vector<double> tv = read_f32(dir + "/target_v.bin", cells3 * T);
    std::vector<double> tw = read_f32(dir + "/target_w.bin", cells3 * T);
    std::vector<double> tz = read_f32(dir + "/target_zeta.bin", cells2 * T);
    s.targets.reserve(T);
    for (int t = 0; t < T; ++t) {
        State st = make_state(grid, s.initial.time + s.interval * (t + 1));
        std::copy_n(tu.begin() + static_cast<size_t>(t) * cells3, cells3, st.u.v.begin());
        std::copy_n(tv.begin() + static_cast<size_t>(t) * cells3, cells3, st.v.v.begin());
        std::copy_n(tw.begin() + static_cast<size_t>(t) * cells3, cells3, st.w.v.begin());
        std::copy_n(tz.begin() + static_cast<size_t>(t) * cells2, cells2, st.zeta.v.begin());
        s.targets.push_back(std::move(st));
    }
    return s;
}

// --- sources ---------------------------------------------------------------

WindowSampleSource::WindowSampleSource(std::shared_ptr<TrajectoryReader> reader, int length,
                                       int stride, int coarse_factor)
    : reader_(std::move(reader)), length_(length), stride_(stride), factor_(coarse_factor) {
    require(length_ >= 1 && stride_ >= 1 && factor_ >= 1, "window source arguments must be >= 1");
    const int usable = (reader_->size() - 1) / factor_ + 1;  // states visible after resampling
    count_ = window_count(usable, length_, stride_);
    interval_ = reader_->interval() * factor_;
}

const GridSpec& WindowSampleSource::grid() const { return reader_->grid(); }

Sample WindowSampleSource::get(size_t index) const {
    require(index < count_, "sample index out of range");
    const int start = static_cast<int>(index) * stride_;
    Sample s;
    s.interval = interval_;
    s.initial = reader_->read(start * factor_);
    s.targets.reserve(length_);
    s.boundaries.steps.reserve(length_);
    for (int t = 1; t <= length_; ++t) {
        State st = reader_->read((start + t) * factor_);
        s.boundaries.steps.push_back(extract_boundary(st, reader_->grid()));
        s.targets.push_back(std::move(st));
    }
    return s;
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch, bool shuffle) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle) {
        std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(epoch) + 1);
        std::shuffle(order.begin(), order.end(), rng);
    }
    return order;
}

std::unique_ptr<BatchLoader<Sample>> loader(const SampleSource& samples, int batch,
                                            int prefetch_depth, uint64_t seed, int epoch,
                                            bool shuffle) {
    auto order = epoch_order(samples.size(), seed, epoch, shuffle);
    return std::make_unique<BatchLoader<Sample>>(std::move(order), batch, prefetch_depth,
                                                 [&samples](size_t i) { return samples.get(i); });
}

}  // namespace tidecast
