// SPDX-License-Identifier: Apache-2.0
#include "tidecast/model.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

using json = nlohmann::json;

namespace tidecast {

using nn::Array;
using nn::IndexVec;
using nn::NodePtr;
using nn::Tape;

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

template <typename T>
NodePtr<T> with_shape(NodePtr<T> n, std::vector<int64_t> shape) {
    if (Array<T>::count(shape) != n->value.numel()) throw ShapeError("with_shape numel mismatch");
    n->value.shape = std::move(shape);
    return n;
}

IndexVec make_index(std::vector<int64_t> v) {
    return std::make_shared<std::vector<int64_t>>(std::move(v));
}

}  // namespace

void ModelConfig::validate() const {
    require(grid_h >= 1 && grid_w >= 1 && grid_d >= 1, "model grid extents must be positive");
    require(horizon >= 1, "forecast horizon must be >= 1");
    require(embed_dim >= 1 && mlp_ratio >= 1 && recovery_dim >= 1, "model widths must be positive");
    require(grid_h % patch_3d[0] == 0 && grid_w % patch_3d[1] == 0 && grid_d % patch_3d[2] == 0,
            "grid extents must be divisible by the 3-d patch (pad the data first)");
    require(grid_h % patch_2d[0] == 0 && grid_w % patch_2d[1] == 0,
            "grid extents must be divisible by the 2-d patch (pad the data first)");
    require(grid_h / patch_3d[0] == grid_h / patch_2d[0] && grid_w / patch_3d[1] == grid_w / patch_2d[1],
            "2-d and 3-d patches must produce the same horizontal token grid");
    const int s = stages();
    require(s >= 1, "at least one stage");
    require(static_cast<int>(heads.size()) == s && static_cast<int>(windows.size()) == s,
            "heads and windows must list one entry per stage");
    require(shifts.empty() || static_cast<int>(shifts.size()) == s,
            "shifts must be empty or list one entry per stage");
    for (int i = 0; i < s; ++i) {
        require(stage_depths[i] >= 2 && stage_depths[i] % 2 == 0,
                "stage depths must be positive and even (W-MSA/SW-MSA pairs)");
        require(stage_dim(i) % heads[i] == 0, "heads must divide the stage embedding dimension");
        for (int k = 0; k < 4; ++k) {
            require(windows[i][k] >= 1, "window extents must be >= 1");
            const auto sh = shift_for(i);
            require(sh[k] >= 0 && sh[k] < windows[i][k], "shift must satisfy 0 <= shift < window");
        }
    }
}

std::string ModelConfig::to_json() const {
    json j;
    j["grid"] = {grid_h, grid_w, grid_d};
    j["horizon"] = horizon;
    j["patch_3d"] = patch_3d;
    j["patch_2d"] = patch_2d;
    j["embed_dim"] = embed_dim;
    j["stage_depths"] = stage_depths;
    j["heads"] = heads;
    j["windows"] = windows;
    j["shifts"] = shifts;
    j["mlp_ratio"] = mlp_ratio;
    j["recovery_dim"] = recovery_dim;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed model config: ") + e.what());
    }
    ModelConfig c;
    auto grid = j.at("grid");
    c.grid_h = grid.at(0);
    c.grid_w = grid.at(1);
    c.grid_d = grid.at(2);
    c.horizon = j.at("horizon");
    c.patch_3d = j.at("patch_3d");
    c.patch_2d = j.at("patch_2d");
    c.embed_dim = j.at("embed_dim");
    c.stage_depths = j.at("stage_depths").get<std::vector<int>>();
    c.heads = j.at("heads").get<std::vector<int>>();
    c.windows = j.at("windows").get<std::vector<std::array<int, 4>>>();
    c.shifts = j.value("shifts", std::vector<std::array<int, 4>>{});
    c.mlp_ratio = j.at("mlp_ratio");
    c.recovery_dim = j.at("recovery_dim");
    c.validate();
    return c;
}

int64_t window_count(const TokenDims& dims, const std::array<int, 4>& window) {
    return ceil_div(dims.h, window[0]) * ceil_div(dims.w, window[1]) *
           ceil_div(dims.d, window[2]) * ceil_div(dims.t, window[3]);
}

std::vector<std::vector<int64_t>> naive_shifted_groups(const TokenDims& dims,
                                                       const std::array<int, 4>& window,
                                                       const std::array<int, 4>& shift) {
    // Bands are defined over the window-padded extents so the grouping is
    // exactly what the cyclic-shift-with-mask path reproduces.
    const int ext[4] = {dims.h, dims.w, dims.d, dims.t};
    int bands[4];
    for (int k = 0; k < 4; ++k) {
        const int ep = static_cast<int>(ceil_div(ext[k], window[k])) * window[k];
        bands[k] = (ep - 1 + shift[k]) / window[k] + 1;
    }
    std::map<int64_t, std::vector<int64_t>> groups;
    for (int h = 0; h < dims.h; ++h)
        for (int w = 0; w < dims.w; ++w)
            for (int d = 0; d < dims.d; ++d)
                for (int t = 0; t < dims.t; ++t) {
                    const int x[4] = {h, w, d, t};
                    int64_t id = 0;
                    for (int k = 0; k < 4; ++k) id = id * bands[k] + (x[k] + shift[k]) / window[k];
                    const int64_t row = ((static_cast<int64_t>(h) * dims.w + w) * dims.d + d) * dims.t + t;
                    groups[id].push_back(row);
                }
    std::vector<std::vector<int64_t>> out;
    out.reserve(groups.size());
    for (auto& [id, rows] : groups) out.push_back(std::move(rows));
    return out;
}

WindowLayout build_window_layout(const TokenDims& dims, const std::array<int, 4>& window,
                                 const std::array<int, 4>& shift) {
    const int ext[4] = {dims.h, dims.w, dims.d, dims.t};
    int nwin[4], epad[4], bands[4];
    for (int k = 0; k < 4; ++k) {
        nwin[k] = static_cast<int>(ceil_div(ext[k], window[k]));
        epad[k] = nwin[k] * window[k];
        bands[k] = (epad[k] - 1 + shift[k]) / window[k] + 1;
    }

    WindowLayout lay;
    lay.n_windows = static_cast<int64_t>(nwin[0]) * nwin[1] * nwin[2] * nwin[3];
    lay.win = static_cast<int64_t>(window[0]) * window[1] * window[2] * window[3];
    auto part = std::make_shared<std::vector<int64_t>>(lay.n_windows * lay.win, -1);
    auto labels = std::make_shared<std::vector<int64_t>>(lay.n_windows * lay.win, 0);
    auto rev = std::make_shared<std::vector<int64_t>>(dims.count(), -1);

    int64_t slot_global = 0;
    bool masked = false;
    for (int ah = 0; ah < nwin[0]; ++ah)
        for (int aw = 0; aw < nwin[1]; ++aw)
            for (int ad = 0; ad < nwin[2]; ++ad)
                for (int at = 0; at < nwin[3]; ++at) {
                    const int64_t widx = ((static_cast<int64_t>(ah) * nwin[1] + aw) * nwin[2] + ad) * nwin[3] + at;
                    for (int ih = 0; ih < window[0]; ++ih)
                        for (int iw = 0; iw < window[1]; ++iw)
                            for (int id = 0; id < window[2]; ++id)
                                for (int it = 0; it < window[3]; ++it, ++slot_global) {
                                    const int p[4] = {ah * window[0] + ih, aw * window[1] + iw,
                                                      ad * window[2] + id, at * window[3] + it};
                                    int x[4];
                                    bool real = true;
                                    for (int k = 0; k < 4; ++k) {
                                        x[k] = (p[k] + shift[k]) % epad[k];
                                        real = real && x[k] < ext[k];
                                    }
                                    const int64_t slot = widx * lay.win +
                                                         ((static_cast<int64_t>(ih) * window[1] + iw) * window[2] + id) *
                                                                 window[3] +
                                                         it;
                                    if (!real) {
                                        (*labels)[slot] = -(slot_global + 1);  // pads attend only themselves
                                        continue;
                                    }
                                    int64_t lab = 0;
                                    for (int k = 0; k < 4; ++k) lab = lab * bands[k] + (x[k] + shift[k]) / window[k];
                                    (*labels)[slot] = lab;
                                    const int64_t row =
                                        ((static_cast<int64_t>(x[0]) * dims.w + x[1]) * dims.d + x[2]) * dims.t + x[3];
                                    (*part)[slot] = row;
                                    (*rev)[row] = slot;
                                }
                }

    for (int64_t wdx = 0; wdx < lay.n_windows && !masked; ++wdx)
        for (int64_t i = 1; i < lay.win && !masked; ++i)
            masked = (*labels)[wdx * lay.win + i] != (*labels)[wdx * lay.win];

    lay.partition = part;
    lay.reverse = rev;
    lay.labels = labels;
    lay.masked = masked;
    return lay;
}

// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> SurrogateModel<T>::reg(const std::string& name, Array<T> init) {
    auto p = nn::make_param(std::move(init), name);
    params_.emplace_back(name, p);
    return p;
}

template <typename T>
BatchNormLayer<T> SurrogateModel<T>::make_bn(const std::string& name, int64_t c) {
    BatchNormLayer<T> bn;
    bn.g = reg(name + ".g", Array<T>({c}, T(1)));
    bn.b = reg(name + ".b", Array<T>({c}, T(0)));
    bn.rm = std::make_shared<Array<T>>(std::vector<int64_t>{c});
    bn.rv = std::make_shared<Array<T>>(Array<T>({c}, T(1)));
    buffers_.emplace_back(name + ".running_mean", bn.rm);
    buffers_.emplace_back(name + ".running_var", bn.rv);
    return bn;
}

template <typename T>
SurrogateModel<T>::SurrogateModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto tn = [&](std::vector<int64_t> shape) {
        Array<T> a(std::move(shape));
        for (auto& x : a.data) {
            double v = dist(rng);
            while (std::abs(v) > 0.04) v = dist(rng);  // truncate at 2 sigma
            x = T(v);
        }
        return a;
    };
    auto zeros = [](std::vector<int64_t> shape) { return Array<T>(std::move(shape)); };

    const int C = cfg_.embed_dim;
    d3_tokens_ = cfg_.grid_d / cfg_.patch_3d[2];
    TokenDims d0{cfg_.grid_h / cfg_.patch_3d[0], cfg_.grid_w / cfg_.patch_3d[1], d3_tokens_ + 1,
                 cfg_.horizon + 1};
    dims_.push_back(d0);
    for (int s = 0; s + 1 < cfg_.stages(); ++s) {
        const TokenDims& p = dims_.back();
        dims_.push_back({static_cast<int>(ceil_div(p.h, 2)), static_cast<int>(ceil_div(p.w, 2)),
                         static_cast<int>(ceil_div(p.d, 2)), p.t});
    }

    const int64_t pv3 = static_cast<int64_t>(cfg_.patch_3d[0]) * cfg_.patch_3d[1] * cfg_.patch_3d[2];
    const int64_t pv2 = static_cast<int64_t>(cfg_.patch_2d[0]) * cfg_.patch_2d[1];
    embed3_w_ = reg("enc.embed3.w", tn({4 * pv3, C}));
    embed3_b_ = reg("enc.embed3.b", zeros({C}));
    embed2_w_ = reg("enc.embed2.w", tn({2 * pv2, C}));
    embed2_b_ = reg("enc.embed2.b", zeros({C}));
    pos_spatial_ = reg("enc.pos.spatial", tn({static_cast<int64_t>(d0.h) * d0.w * d0.d, C}));
    pos_temporal_ = reg("enc.pos.temporal", tn({d0.t, C}));

    blocks_.resize(cfg_.stages());
    for (int s = 0; s < cfg_.stages(); ++s) {
        const int64_t cs = cfg_.stage_dim(s);
        for (int b = 0; b < cfg_.stage_depths[s]; ++b) {
            const std::string base = "enc.s" + std::to_string(s) + ".b" + std::to_string(b);
            BlockWeights<T> blk;
            blk.ln1_g = reg(base + ".ln1.g", Array<T>({cs}, T(1)));
            blk.ln1_b = reg(base + ".ln1.b", zeros({cs}));
            blk.attn.wq = reg(base + ".attn.wq", tn({cs, cs}));
            blk.attn.bq = reg(base + ".attn.bq", zeros({cs}));
            blk.attn.wk = reg(base + ".attn.wk", tn({cs, cs}));
            blk.attn.bk = reg(base + ".attn.bk", zeros({cs}));
            blk.attn.wv = reg(base + ".attn.wv", tn({cs, cs}));
            blk.attn.bv = reg(base + ".attn.bv", zeros({cs}));
            blk.attn.wo = reg(base + ".attn.wo", tn({cs, cs}));
            blk.attn.bo = reg(base + ".attn.bo", zeros({cs}));
            blk.ln2_g = reg(base + ".ln2.g", Array<T>({cs}, T(1)));
            blk.ln2_b = reg(base + ".ln2.b", zeros({cs}));
            blk.mlp_w1 = reg(base + ".mlp.w1", tn({cs, cs * cfg_.mlp_ratio}));
            blk.mlp_b1 = reg(base + ".mlp.b1", zeros({cs * cfg_.mlp_ratio}));
            blk.mlp_w2 = reg(base + ".mlp.w2", tn({cs * cfg_.mlp_ratio, cs}));
            blk.mlp_b2 = reg(base + ".mlp.b2", zeros({cs}));
            blocks_[s].push_back(std::move(blk));
        }
        if (s + 1 < cfg_.stages()) {
            const std::string base = "enc.m" + std::to_string(s);
            merge_w_.push_back(reg(base + ".w", tn({8 * cs, 2 * cs})));
            merge_b_.push_back(reg(base + ".b", zeros({2 * cs})));
        }
    }

    const int transitions = cfg_.stages() - 1;
    for (int u = 0; u < transitions; ++u) {
        const int tr = transitions - 1 - u;               // inverts merge `tr`
        const int64_t cin = cfg_.stage_dim(tr + 1);
        const int64_t cout = cfg_.stage_dim(tr);
        const std::string base = "dec.up" + std::to_string(u);
        UpStage up;
        up.up_w = reg(base + ".w", tn({cin, 8 * cout}));
        up.up_b = reg(base + ".b", zeros({8 * cout}));
        up.up_bn = make_bn(base + ".bn", cout);
        up.fuse_w = reg(base + ".fuse.w", tn({2 * cout, cout}));
        up.fuse_b = reg(base + ".fuse.b", zeros({cout}));
        up.fuse_bn = make_bn(base + ".fuse.bn", cout);
        ups_.push_back(std::move(up));
    }

    const int64_t cr = cfg_.recovery_dim;
    rec3_w_ = reg("dec.rec3.w", tn({C, pv3 * cr}));
    rec3_b_ = reg("dec.rec3.b", zeros({pv3 * cr}));
    rec3_bn_ = make_bn("dec.rec3.bn", cr);
    head3_w_ = reg("dec.head3.w", tn({cr, 3}));
    head3_b_ = reg("dec.head3.b", zeros({3}));
    rec2_w_ = reg("dec.rec2.w", tn({C, pv2 * cr}));
    rec2_b_ = reg("dec.rec2.b", zeros({pv2 * cr}));
    rec2_bn_ = make_bn("dec.rec2.bn", cr);
    head2_w_ = reg("dec.head2.w", tn({cr, 1}));
    head2_b_ = reg("dec.head2.b", zeros({1}));
}

template <typename T>
size_t SurrogateModel<T>::param_count() const {
    size_t n = 0;
    for (const auto& [name, p] : params_) n += p->value.data.size();
    return n;
}

template <typename T>
size_t SurrogateModel<T>::param_count_prefix(const std::string& prefix) const {
    size_t n = 0;
    for (const auto& [name, p] : params_)
        if (name.rfind(prefix, 0) == 0) n += p->value.data.size();
    return n;
}

// --- index tables -----------------------------------------------------------

template <typename T>
typename SurrogateModel<T>::Tables& SurrogateModel<T>::ensure_tables(int batch) {
    auto it = tables_.find(batch);
    if (it != tables_.end()) return it->second;

    const int H = cfg_.grid_h, W = cfg_.grid_w, D = cfg_.grid_d;
    const int ph = cfg_.patch_3d[0], pw = cfg_.patch_3d[1], pd = cfg_.patch_3d[2];
    const int qh = cfg_.patch_2d[0], qw = cfg_.patch_2d[1];
    const TokenDims d0 = dims_[0];
    const int Tt = d0.t;
    const int D3 = d3_tokens_;
    const int64_t n3 = static_cast<int64_t>(d0.h) * d0.w * D3 * Tt;
    const int64_t n2 = static_cast<int64_t>(d0.h) * d0.w * Tt;
    const int64_t n0 = d0.count();

    Tables tb;

    {   // 3-d patch embedding: one row of 4 channels per mesh cell
        std::vector<int64_t> idx(static_cast<size_t>(batch) * n3 * ph * pw * pd);
        size_t c = 0;
        for (int b = 0; b < batch; ++b)
            for (int hh = 0; hh < d0.h; ++hh)
                for (int ww = 0; ww < d0.w; ++ww)
                    for (int dd = 0; dd < D3; ++dd)
                        for (int t = 0; t < Tt; ++t)
                            for (int oh = 0; oh < ph; ++oh)
                                for (int ow = 0; ow < pw; ++ow)
                                    for (int od = 0; od < pd; ++od)
                                        idx[c++] = (((static_cast<int64_t>(b) * Tt + t) * D + (dd * pd + od)) * H +
                                                    (hh * ph + oh)) * W +
                                                   (ww * pw + ow);
        tb.embed3 = make_index(std::move(idx));
    }
    {   // 2-d patch embedding
        std::vector<int64_t> idx(static_cast<size_t>(batch) * n2 * qh * qw);
        size_t c = 0;
        for (int b = 0; b < batch; ++b)
            for (int hh = 0; hh < d0.h; ++hh)
                for (int ww = 0; ww < d0.w; ++ww)
                    for (int t = 0; t < Tt; ++t)
                        for (int oh = 0; oh < qh; ++oh)
                            for (int ow = 0; ow < qw; ++ow)
                                idx[c++] = ((static_cast<int64_t>(b) * Tt + t) * H + (hh * qh + oh)) * W +
                                           (ww * qw + ow);
        tb.embed2 = make_index(std::move(idx));
    }
    {   // canonical token order over the depth-concatenated grid
        std::vector<int64_t> idx(static_cast<size_t>(batch) * n0);
        std::vector<int64_t> sp(static_cast<size_t>(batch) * n0), tp(static_cast<size_t>(batch) * n0);
        size_t c = 0;
        for (int b = 0; b < batch; ++b)
            for (int hh = 0; hh < d0.h; ++hh)
                for (int ww = 0; ww < d0.w; ++ww)
                    for (int d = 0; d < d0.d; ++d)
                        for (int t = 0; t < Tt; ++t, ++c) {
                            if (d < D3)
                                idx[c] = (static_cast<int64_t>(b) * n3) +
                                         ((static_cast<int64_t>(hh) * d0.w + ww) * D3 + d) * Tt + t;
                            else
                                idx[c] = static_cast<int64_t>(batch) * n3 + static_cast<int64_t>(b) * n2 +
                                         (static_cast<int64_t>(hh) * d0.w + ww) * Tt + t;
                            sp[c] = (static_cast<int64_t>(hh) * d0.w + ww) * d0.d + d;
                            tp[c] = t;
                        }
        tb.canon = make_index(std::move(idx));
        tb.pos_spatial = make_index(std::move(sp));
        tb.pos_temporal = make_index(std::move(tp));
    }

    // per-stage window machinery
    tb.stages.resize(cfg_.stages());
    for (int s = 0; s < cfg_.stages(); ++s) {
        const TokenDims dims = dims_[s];
        const int heads = cfg_.heads[s];
        StageTables st;
        st.plain = build_window_layout(dims, cfg_.windows[s], {0, 0, 0, 0});
        st.shifted = build_window_layout(dims, cfg_.windows[s], cfg_.shift_for(s));

        auto expand = [&](WindowLayout& lay) {
            const int64_t n = dims.count();
            auto part = std::make_shared<std::vector<int64_t>>();
            part->reserve(static_cast<size_t>(batch) * lay.partition->size());
            for (int b = 0; b < batch; ++b)
                for (int64_t v : *lay.partition) part->push_back(v < 0 ? -1 : v + b * n);
            auto rev = std::make_shared<std::vector<int64_t>>();
            rev->reserve(static_cast<size_t>(batch) * lay.reverse->size());
            const int64_t wslots = lay.n_windows * lay.win;
            for (int b = 0; b < batch; ++b)
                for (int64_t v : *lay.reverse) rev->push_back(v < 0 ? -1 : v + b * wslots);
            WindowLayout out = lay;
            out.partition = part;
            out.reverse = rev;
            return out;
        };
        auto build_mask = [&](const WindowLayout& lay) -> std::shared_ptr<Array<T>> {
            if (!lay.masked) return nullptr;
            auto mask = std::make_shared<Array<T>>(
                std::vector<int64_t>{lay.n_windows * heads * lay.win * lay.win});
            size_t c = 0;
            for (int64_t wdx = 0; wdx < lay.n_windows; ++wdx) {
                const int64_t* lab = lay.labels->data() + wdx * lay.win;
                for (int h = 0; h < heads; ++h)
                    for (int64_t i = 0; i < lay.win; ++i)
                        for (int64_t j = 0; j < lay.win; ++j)
                            mask->data[c++] = lab[i] == lab[j] ? T(0) : T(-1e9);
            }
            return mask;
        };
        st.plain_mask = build_mask(st.plain);
        st.shifted_mask = build_mask(st.shifted);
        const WindowLayout single_plain = st.plain;
        st.plain = expand(st.plain);
        st.shifted = expand(st.shifted);

        // head split/merge between [B*NW*win, C] rows and [B*NW*heads, win, dh]
        const int64_t nw = single_plain.n_windows;
        const int64_t win = single_plain.win;
        const int64_t groups = static_cast<int64_t>(batch) * nw;
        {
            std::vector<int64_t> split(groups * heads * win);
            size_t c = 0;
            for (int64_t g = 0; g < groups; ++g)
                for (int h = 0; h < heads; ++h)
                    for (int64_t i = 0; i < win; ++i) split[c++] = (g * win + i) * heads + h;
            st.head_split = make_index(std::move(split));
            std::vector<int64_t> merge(groups * win * heads);
            c = 0;
            for (int64_t g = 0; g < groups; ++g)
                for (int64_t i = 0; i < win; ++i)
                    for (int h = 0; h < heads; ++h) merge[c++] = (g * heads + h) * win + i;
            st.head_merge = make_index(std::move(merge));
        }
        tb.stages[s] = std::move(st);
    }

    // merges with pad-to-even folded into the table
    for (int tr = 0; tr + 1 < cfg_.stages(); ++tr) {
        const TokenDims in = dims_[tr], out = dims_[tr + 1];
        std::vector<int64_t> idx(static_cast<size_t>(batch) * out.count() * 8);
        size_t c = 0;
        for (int b = 0; b < batch; ++b)
            for (int hh = 0; hh < out.h; ++hh)
                for (int ww = 0; ww < out.w; ++ww)
                    for (int dd = 0; dd < out.d; ++dd)
                        for (int t = 0; t < out.t; ++t)
                            for (int oh = 0; oh < 2; ++oh)
                                for (int ow = 0; ow < 2; ++ow)
                                    for (int od = 0; od < 2; ++od) {
                                        const int sh = 2 * hh + oh, sw = 2 * ww + ow, sd = 2 * dd + od;
                                        idx[c++] = (sh < in.h && sw < in.w && sd < in.d)
                                                       ? static_cast<int64_t>(b) * in.count() +
                                                             ((static_cast<int64_t>(sh) * in.w + sw) * in.d + sd) *
                                                                 in.t + t
                                                       : -1;
                                    }
        tb.merge.push_back(make_index(std::move(idx)));
    }

    // up-conv scatters (invert the merges, cropping the padded-even cells)
    for (int u = 0; u + 1 < cfg_.stages(); ++u) {
        const int tr = cfg_.stages() - 2 - u;
        const TokenDims fine = dims_[tr], coarse = dims_[tr + 1];
        std::vector<int64_t> idx(static_cast<size_t>(batch) * fine.count());
        size_t c = 0;
        for (int b = 0; b < batch; ++b)
            for (int hh = 0; hh < fine.h; ++hh)
                for (int ww = 0; ww < fine.w; ++ww)
                    for (int dd = 0; dd < fine.d; ++dd)
                        for (int t = 0; t < fine.t; ++t) {
                            const int64_t coarse_row =
                                static_cast<int64_t>(b) * coarse.count() +
                                ((static_cast<int64_t>(hh / 2) * coarse.w + ww / 2) * coarse.d + dd / 2) * coarse.t +
                                t;
                            const int64_t offset = (static_cast<int64_t>(hh % 2) * 2 + (ww % 2)) * 2 + (dd % 2);
                            idx[c++] = coarse_row * 8 + offset;
                        }
        tb.up.push_back(make_index(std::move(idx)));
    }

    {   // stream split on the stage-0 grid
        std::vector<int64_t> s3(static_cast<size_t>(batch) * n3), s2(static_cast<size_t>(batch) * n2);
        size_t c3 = 0, c2 = 0;
        for (int b = 0; b < batch; ++b)
            for (int hh = 0; hh < d0.h; ++hh)
                for (int ww = 0; ww < d0.w; ++ww)
                    for (int d = 0; d < d0.d; ++d)
                        for (int t = 0; t < Tt; ++t) {
                            const int64_t row = static_cast<int64_t>(b) * n0 +
                                                ((static_cast<int64_t>(hh) * d0.w + ww) * d0.d + d) * Tt + t;
                            if (d < D3)
                                s3[c3++] = row;
                            else
                                s2[c2++] = row;
                        }
        tb.split3 = make_index(std::move(s3));
        tb.split2 = make_index(std::move(s2));
    }

    {   // patch recovery scatters to mesh cells, forecast slots t = 1..T only
        const int Tf = cfg_.horizon;
        const int64_t pv3 = static_cast<int64_t>(ph) * pw * pd;
        std::vector<int64_t> c3(static_cast<size_t>(batch) * Tf * D * H * W);
        size_t c = 0;
        for (int b = 0; b < batch; ++b)
            for (int t = 1; t <= Tf; ++t)
                for (int dz = 0; dz < D; ++dz)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j) {
                            const int64_t tok = static_cast<int64_t>(b) * n3 +
                                                ((static_cast<int64_t>(i / ph) * d0.w + (j / pw)) * D3 + dz / pd) * Tt +
                                                t;
                            const int64_t off = (static_cast<int64_t>(i % ph) * pw + (j % pw)) * pd + (dz % pd);
                            c3[c++] = tok * pv3 + off;
                        }
        tb.cells3 = make_index(std::move(c3));

        const int64_t pv2 = static_cast<int64_t>(qh) * qw;
        std::vector<int64_t> c2(static_cast<size_t>(batch) * Tf * H * W);
        c = 0;
        for (int b = 0; b < batch; ++b)
            for (int t = 1; t <= Tf; ++t)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const int64_t tok = static_cast<int64_t>(b) * n2 +
                                            (static_cast<int64_t>(i / qh) * d0.w + (j / qw)) * Tt + t;
                        const int64_t off = static_cast<int64_t>(i % qh) * qw + (j % qw);
                        c2[c++] = tok * pv2 + off;
                    }
        tb.cells2 = make_index(std::move(c2));
    }

    return tables_.emplace(batch, std::move(tb)).first->second;
}

template <typename T>
const WindowLayout& SurrogateModel<T>::layout(int stage, bool shifted, int batch) {
    auto& tb = ensure_tables(batch);
    return shifted ? tb.stages[stage].shifted : tb.stages[stage].plain;
}

// --- architecture pieces ----------------------------------------------------

template <typename T>
NodePtr<T> SurrogateModel<T>::patch_embed_3d(Tape<T>* tape, const NodePtr<T>& x3, int batch) {
    auto& tb = ensure_tables(batch);
    const int64_t pv3 = static_cast<int64_t>(cfg_.patch_3d[0]) * cfg_.patch_3d[1] * cfg_.patch_3d[2];
    auto patches = nn::gather_rows(tape, x3, tb.embed3, pv3, 4, true);
    return nn::linear(tape, patches, embed3_w_, embed3_b_);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::patch_embed_2d(Tape<T>* tape, const NodePtr<T>& x2, int batch) {
    auto& tb = ensure_tables(batch);
    const int64_t pv2 = static_cast<int64_t>(cfg_.patch_2d[0]) * cfg_.patch_2d[1];
    auto patches = nn::gather_rows(tape, x2, tb.embed2, pv2, 2, true);
    return nn::linear(tape, patches, embed2_w_, embed2_b_);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::concat_depth(Tape<T>* tape, const NodePtr<T>& t3, const NodePtr<T>& t2,
                                           int batch) {
    const int64_t C = cfg_.embed_dim;
    auto& tb = ensure_tables(batch);
    const TokenDims d0 = dims_[0];
    const int64_t n3 = static_cast<int64_t>(d0.h) * d0.w * d3_tokens_ * d0.t;
    const int64_t n2 = static_cast<int64_t>(d0.h) * d0.w * d0.t;
    if (t3->value.rows(C) != batch * n3 || t2->value.rows(C) != batch * n2)
        throw ShapeError("concat_depth stream extents do not match the token grid");
    auto stacked = nn::vstack(tape, t3, t2, C);
    return nn::gather_rows(tape, stacked, tb.canon, 1, C, true);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::add_positional(Tape<T>* tape, const NodePtr<T>& tokens, int batch) {
    auto& tb = ensure_tables(batch);
    return nn::add_positional(tape, tokens, pos_spatial_, pos_temporal_, tb.pos_spatial,
                              tb.pos_temporal, cfg_.embed_dim);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::window_attention(Tape<T>* tape, const NodePtr<T>& tokens, int stage,
                                               int block, int batch, bool shifted) {
    auto& tb = ensure_tables(batch);
    const StageTables& st = tb.stages[stage];
    const WindowLayout& lay = shifted ? st.shifted : st.plain;
    const auto mask = shifted ? st.shifted_mask : st.plain_mask;
    const BlockWeights<T>& blk = blocks_[stage][block];
    const int64_t C = cfg_.stage_dim(stage);
    const int heads = cfg_.heads[stage];
    const int64_t dh = C / heads;
    const int64_t groups = static_cast<int64_t>(batch) * lay.n_windows;

    auto winrows = nn::gather_rows(tape, tokens, lay.partition, 1, C, true);
    auto q = nn::linear(tape, winrows, blk.attn.wq, blk.attn.bq);
    auto k = nn::linear(tape, winrows, blk.attn.wk, blk.attn.bk);
    auto v = nn::linear(tape, winrows, blk.attn.wv, blk.attn.bv);
    auto split = [&](const NodePtr<T>& x) {
        return with_shape(nn::gather_rows(tape, x, st.head_split, 1, dh, true),
                          {groups * heads, lay.win, dh});
    };
    auto out = attention(tape, split(q), split(k), split(v), mask);
    auto merged = nn::gather_rows(tape, out, st.head_merge, heads, dh, true);
    auto projected = nn::linear(tape, merged, blk.attn.wo, blk.attn.bo);
    return nn::gather_rows(tape, projected, lay.reverse, 1, C, true);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::wmsa(Tape<T>* tape, const NodePtr<T>& tokens, int stage, int block,
                                   int batch) {
    return window_attention(tape, tokens, stage, block, batch, false);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::swmsa(Tape<T>* tape, const NodePtr<T>& tokens, int stage, int block,
                                    int batch) {
    return window_attention(tape, tokens, stage, block, batch, true);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::attn_sublayer(Tape<T>* tape, const NodePtr<T>& tokens, int stage,
                                            int block, int batch) {
    const BlockWeights<T>& blk = blocks_[stage][block];
    const int64_t C = cfg_.stage_dim(stage);
    auto normed = nn::layer_norm(tape, tokens, blk.ln1_g, blk.ln1_b, C);
    auto attended = window_attention(tape, normed, stage, block, batch, block % 2 == 1);
    return nn::add(tape, attended, tokens);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::mlp_sublayer(Tape<T>* tape, const NodePtr<T>& tokens, int stage,
                                           int block, int) {
    const BlockWeights<T>& blk = blocks_[stage][block];
    const int64_t C = cfg_.stage_dim(stage);
    auto normed = nn::layer_norm(tape, tokens, blk.ln2_g, blk.ln2_b, C);
    auto hidden = nn::gelu(tape, nn::linear(tape, normed, blk.mlp_w1, blk.mlp_b1));
    auto projected = nn::linear(tape, hidden, blk.mlp_w2, blk.mlp_b2);
    return nn::add(tape, projected, tokens);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::swin_block_pair(Tape<T>* tape, const NodePtr<T>& tokens, int stage,
                                              int pair, int batch) {
    auto z = attn_sublayer(tape, tokens, stage, 2 * pair, batch);
    z = mlp_sublayer(tape, z, stage, 2 * pair, batch);
    z = attn_sublayer(tape, z, stage, 2 * pair + 1, batch);
    return mlp_sublayer(tape, z, stage, 2 * pair + 1, batch);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::merge_groups(Tape<T>* tape, const NodePtr<T>& tokens, int transition,
                                           int batch) {
    auto& tb = ensure_tables(batch);
    const int64_t C = cfg_.stage_dim(transition);
    return nn::gather_rows(tape, tokens, tb.merge[transition], 8, C, true);
}

template <typename T>
NodePtr<T> SurrogateModel<T>::patch_merge(Tape<T>* tape, const NodePtr<T>& tokens, int transition,
                                          int batch) {
    auto grouped = merge_groups(tape, tokens, transition, batch);
    return nn::linear(tape, grouped, merge_w_[transition], merge_b_[transition]);
}

template <typename T>
typename SurrogateModel<T>::Output SurrogateModel<T>::decode(Tape<T>* tape, const NodePtr<T>& latent,
                                                             const std::vector<NodePtr<T>>& skips,
                                                             int batch, bool training,
                                                             bool update_stats) {
    auto& tb = ensure_tables(batch);
    const int transitions = cfg_.stages() - 1;
    if (static_cast<int>(skips.size()) != transitions)
        throw ShapeError("decoder expects one skip per merge transition");

    NodePtr<T> x = latent;
    for (int u = 0; u < transitions; ++u) {
        const int tr = transitions - 1 - u;
        const int64_t cout = cfg_.stage_dim(tr);
        const UpStage& up = ups_[u];
        auto expanded = nn::linear(tape, x, up.up_w, up.up_b);
        auto fine = nn::gather_rows(tape, expanded, tb.up[u], 1, cout, true);
        fine = nn::batch_norm(tape, fine, up.up_bn.g, up.up_bn.b, up.up_bn.rm, up.up_bn.rv, cout,
                              training, update_stats);
        fine = nn::gelu(tape, fine);
        const NodePtr<T>& skip = skips[tr];
        if (skip->value.numel() != fine->value.numel())
            throw ShapeError("skip tensor extent does not match the decoder stage");
        auto fused = nn::concat_cols(tape, fine, skip, cout, cout);
        fused = nn::linear(tape, fused, up.fuse_w, up.fuse_b);
        fused = nn::batch_norm(tape, fused, up.fuse_bn.g, up.fuse_bn.b, up.fuse_bn.rm, up.fuse_bn.rv,
                               cout, training, update_stats);
        x = nn::gelu(tape, fused);
    }

    const int64_t C = cfg_.embed_dim;
    auto s3 = nn::gather_rows(tape, x, tb.split3, 1, C, true);
    auto s2 = nn::gather_rows(tape, x, tb.split2, 1, C, true);

    const int64_t cr = cfg_.recovery_dim;
    auto r3 = nn::linear(tape, s3, rec3_w_, rec3_b_);
    auto cells3 = nn::gather_rows(tape, r3, tb.cells3, 1, cr, true);
    cells3 = nn::batch_norm(tape, cells3, rec3_bn_.g, rec3_bn_.b, rec3_bn_.rm, rec3_bn_.rv, cr,
                            training, update_stats);
    cells3 = nn::gelu(tape, cells3);
    auto y3 = nn::linear(tape, cells3, head3_w_, head3_b_);

    auto r2 = nn::linear(tape, s2, rec2_w_, rec2_b_);
    auto cells2 = nn::gather_rows(tape, r2, tb.cells2, 1, cr, true);
    cells2 = nn::batch_norm(tape, cells2, rec2_bn_.g, rec2_bn_.b, rec2_bn_.rm, rec2_bn_.rv, cr,
                            training, update_stats);
    cells2 = nn::gelu(tape, cells2);
    auto y2 = nn::linear(tape, cells2, head2_w_, head2_b_);

    return {y3, y2};
}

template <typename T>
typename SurrogateModel<T>::Output SurrogateModel<T>::forward(Tape<T>* tape,
                                                              const EncodedInput<T>& input,
                                                              bool training, RecomputePolicy policy) {
    const int batch = input.batch;
    ensure_tables(batch);
    auto x3c = nn::constant(input.x3d);
    auto x2c = nn::constant(input.x2d);
    const bool ckpt = policy == RecomputePolicy::SwmsaBoundary;

    // Segment boundaries sit on the SW-MSA block outputs (post-residual), so
    // under the recompute policy only those activations stay resident.
    struct Cursor {
        int stage;
        int pair;
    };
    std::vector<Cursor> cursors;
    for (int s = 0; s < cfg_.stages(); ++s)
        for (int p = 0; p < cfg_.stage_depths[s] / 2; ++p) cursors.push_back({s, p});

    NodePtr<T> z;
    std::vector<NodePtr<T>> skips(cfg_.stages() - 1);

    for (size_t k = 0; k < cursors.size(); ++k) {
        const auto [s, p] = cursors[k];
        const bool first = k == 0;
        const bool stage_entry = p == 0 && s > 0;

        nn::SegmentFn<T> fn = [this, s, p, first, stage_entry, batch, x3c, x2c](
                                  Tape<T>* t, bool, const std::vector<NodePtr<T>>& in) {
            NodePtr<T> cur;
            std::vector<NodePtr<T>> outs;
            if (first) {
                auto t3 = patch_embed_3d(t, x3c, batch);
                auto t2 = patch_embed_2d(t, x2c, batch);
                cur = add_positional(t, concat_depth(t, t3, t2, batch), batch);
            } else {
                cur = in[0];
                const int ps = stage_entry ? s - 1 : s;
                const int pb = stage_entry ? cfg_.stage_depths[ps] - 1 : 2 * p - 1;
                cur = mlp_sublayer(t, cur, ps, pb, batch);  // trailing MLP of the previous pair
                if (stage_entry) {
                    outs.push_back(cur);  // skip tensor, pre-merge
                    cur = patch_merge(t, cur, s - 1, batch);
                }
            }
            cur = attn_sublayer(t, cur, s, 2 * p, batch);
            cur = mlp_sublayer(t, cur, s, 2 * p, batch);
            cur = attn_sublayer(t, cur, s, 2 * p + 1, batch);
            outs.insert(outs.begin(), cur);
            return outs;
        };

        std::vector<NodePtr<T>> ins;
        if (!first) ins.push_back(z);
        auto outs = nn::checkpoint(tape, ckpt, fn, ins);
        z = outs[0];
        if (stage_entry) skips[s - 1] = outs[1];
    }

    // final segment: trailing MLP of the last pair, then the decoder
    const int last_stage = cfg_.stages() - 1;
    nn::SegmentFn<T> tail = [this, last_stage, batch, training](Tape<T>* t, bool replay,
                                                                const std::vector<NodePtr<T>>& in) {
        auto latent = mlp_sublayer(t, in[0], last_stage, cfg_.stage_depths[last_stage] - 1, batch);
        std::vector<NodePtr<T>> sk(in.begin() + 1, in.end());
        auto out = decode(t, latent, sk, batch, training, training && !replay);
        return std::vector<NodePtr<T>>{out.y3d, out.y2d};
    };
    std::vector<NodePtr<T>> ins{z};
    for (auto& sk : skips) ins.push_back(sk);
    auto outs = nn::checkpoint(tape, ckpt, tail, ins);
    return {outs[0], outs[1]};
}

// --- checkpoint file --------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'T', 'C', 'K', 'P', 'T', '0', '1', '\n'};
}

template <typename T>
void SurrogateModel<T>::save(const std::string& path) const {
    json manifest;
    manifest["config"] = json::parse(cfg_.to_json());
    json tensors = json::array();
    uint64_t offset = 0;
    auto describe = [&](const std::string& name, size_t numel) {
        tensors.push_back({{"name", name}, {"numel", numel}, {"offset", offset}});
        offset += numel * 4;
    };
    for (const auto& [name, p] : params_) describe(name, p->value.data.size());
    for (const auto& [name, b] : buffers_) describe(name, b->data.size());
    manifest["tensors"] = tensors;
    manifest["element_type"] = "float32 little-endian";
    const std::string head = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f.write(kMagic, 8);
    const uint64_t len = head.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    auto dump = [&](const std::vector<T>& data) {
        std::vector<float> buf(data.begin(), data.end());
        f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    };
    for (const auto& [name, p] : params_) dump(p->value.data);
    for (const auto& [name, b] : buffers_) dump(b->data);
    if (!f) throw IoError("short write on checkpoint " + path);
}

template <typename T>
SurrogateModel<T> SurrogateModel<T>::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("not a model checkpoint: " + path);
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    std::string head(len, '\0');
    f.read(head.data(), static_cast<std::streamsize>(len));
    if (static_cast<uint64_t>(f.gcount()) != len) throw IoError("truncated checkpoint " + path);

    json manifest;
    try {
        manifest = json::parse(head);
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    ModelConfig cfg = ModelConfig::from_json(manifest.at("config").dump());
    SurrogateModel<T> model(cfg, 0);

    std::map<std::string, std::pair<uint64_t, size_t>> entries;
    for (const auto& t : manifest.at("tensors"))
        entries[t.at("name")] = {t.at("offset").get<uint64_t>(), t.at("numel").get<size_t>()};

    const std::streampos data_start = f.tellg();
    auto fill = [&](const std::string& name, std::vector<T>& dst) {
        auto it = entries.find(name);
        if (it == entries.end()) throw IoError("checkpoint is missing tensor " + name);
        if (it->second.second != dst.size())
            throw ShapeError("checkpoint tensor " + name + " has the wrong shape");
        std::vector<float> buf(dst.size());
        f.seekg(data_start + static_cast<std::streamoff>(it->second.first));
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        if (static_cast<size_t>(f.gcount()) != buf.size() * 4)
            throw IoError("truncated tensor " + name + " in " + path);
        for (size_t i = 0; i < buf.size(); ++i) dst[i] = T(buf[i]);
    };
    for (auto& [name, p] : model.params_) fill(name, p->value.data);
    for (auto& [name, b] : model.buffers_) fill(name, b->data);
    return model;
}

template class SurrogateModel<float>;
template class SurrogateModel<double>;

}  // namespace tidecast
