// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tidecast/nn/ops.hpp"

namespace tidecast {

enum class RecomputePolicy { None, SwmsaBoundary };

// Architecture hyperparameters bound to a fixed (patch-divisible) mesh.
struct ModelConfig {
    int grid_h = 60, grid_w = 40, grid_d = 4;
    int horizon = 24;  // forecast steps T; the input carries T+1 temporal slots
    std::array<int, 3> patch_3d{5, 5, 4};
    std::array<int, 2> patch_2d{5, 5};
    int embed_dim = 24;
    std::vector<int> stage_depths{2, 2, 2};  // blocks per stage, even (W-MSA/SW-MSA pairs)
    std::vector<int> heads{3, 6, 12};
    std::vector<std::array<int, 4>> windows{{4, 4, 2, 2}, {2, 2, 2, 2}, {2, 2, 2, 2}};
    std::vector<std::array<int, 4>> shifts;  // empty: floor(window/2) per stage
    int mlp_ratio = 4;
    int recovery_dim = 16;  // decoder channels ahead of the 1x1 output heads

    int stages() const { return static_cast<int>(stage_depths.size()); }
    int stage_dim(int s) const { return embed_dim << s; }
    std::array<int, 4> shift_for(int s) const {
        if (!shifts.empty()) return shifts.at(s);
        const auto& w = windows.at(s);
        return {w[0] / 2, w[1] / 2, w[2] / 2, w[3] / 2};
    }
    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// Token-grid extents at one stage; token row order is (h, w, d, t) C-order,
// batches stacked in front.
struct TokenDims {
    int h = 0, w = 0, d = 0, t = 0;
    int64_t count() const { return static_cast<int64_t>(h) * w * d * t; }
    bool operator==(const TokenDims&) const = default;
};

// Number of regular windows for a token grid (grid padded up to the window).
int64_t window_count(const TokenDims& dims, const std::array<int, 4>& window);

// Token-index groups of the naive shifted partition: windows shifted by
// `shift`, clipped at the grid edges, so group extents vary. The cyclic
// shift + mask path must reproduce the attention this partition defines.
std::vector<std::vector<int64_t>> naive_shifted_groups(const TokenDims& dims,
                                                       const std::array<int, 4>& window,
                                                       const std::array<int, 4>& shift);

// Partition / reverse index tables for (optionally cyclically shifted)
// window attention, with region labels turned into an additive mask.
struct WindowLayout {
    int64_t n_windows = 0;
    int64_t win = 0;  // tokens per window
    nn::IndexVec partition;  // [n_windows * win] token row per window slot, -1 = pad
    nn::IndexVec reverse;    // [count] window slot per token row
    std::shared_ptr<std::vector<int64_t>> labels;  // region label per window slot
    bool masked = false;     // any pair of slots with differing labels
};

WindowLayout build_window_layout(const TokenDims& dims, const std::array<int, 4>& window,
                                 const std::array<int, 4>& shift);

// Spec-level patch merging on an even-extent token grid: concatenates the
// 2x2x2 spatial neighborhood to 8C channels and projects to 2C. Odd extents
// are a shape error; the model pads to even internally before merging.
template <typename T>
nn::NodePtr<T> merge_patch_tokens(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens,
                                  const TokenDims& dims, const nn::NodePtr<T>& weight,
                                  const nn::NodePtr<T>& bias) {
    if (dims.h % 2 || dims.w % 2 || dims.d % 2)
        throw ShapeError("patch merging requires even spatial token extents");
    const int64_t C = weight->value.dim(0) / 8;
    if (tokens->value.rows(C) % dims.count() != 0)
        throw ShapeError("token matrix does not match the stated dims");
    const int64_t batch = tokens->value.rows(C) / dims.count();
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(batch * dims.count());
    for (int64_t b = 0; b < batch; ++b)
        for (int h = 0; h < dims.h; h += 2)
            for (int w = 0; w < dims.w; w += 2)
                for (int d = 0; d < dims.d; d += 2)
                    for (int t = 0; t < dims.t; ++t)
                        for (int oh = 0; oh < 2; ++oh)
                            for (int ow = 0; ow < 2; ++ow)
                                for (int od = 0; od < 2; ++od)
                                    idx->push_back(b * dims.count() +
                                                   ((static_cast<int64_t>(h + oh) * dims.w + (w + ow)) * dims.d +
                                                    (d + od)) * dims.t + t);
    auto grouped = nn::gather_rows(tape, tokens, idx, 8, C, true);
    return nn::linear(tape, grouped, weight, bias);
}

// softmax(Q K^T / sqrt(d)) V over [B, n, d] tensors, optional additive mask
// tiled over the leading dim.
template <typename T>
nn::NodePtr<T> attention(nn::Tape<T>* tape, const nn::NodePtr<T>& Q, const nn::NodePtr<T>& K,
                         const nn::NodePtr<T>& V,
                         std::shared_ptr<nn::Array<T>> mask = nullptr) {
    const int64_t d = Q->value.shape.back();
    auto S = nn::bmm(tape, Q, K, true);
    S = nn::scale(tape, S, T(1.0 / std::sqrt(static_cast<double>(d))));
    if (mask) S = nn::add_const(tape, S, mask);
    auto P = nn::softmax_last(tape, S, S->value.shape.back());
    return nn::bmm(tape, P, V, false);
}

template <typename T>
struct AttentionWeights {
    nn::NodePtr<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct BlockWeights {
    nn::NodePtr<T> ln1_g, ln1_b;
    AttentionWeights<T> attn;
    nn::NodePtr<T> ln2_g, ln2_b;
    nn::NodePtr<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
struct BatchNormLayer {
    nn::NodePtr<T> g, b;
    std::shared_ptr<nn::Array<T>> rm, rv;
};

// Inputs for one batch, cell-channel-last so embedding is a row gather.
template <typename T>
struct EncodedInput {
    nn::Array<T> x3d;  // [B, T+1, D, H, W, 4]  channels u, v, w, mask
    nn::Array<T> x2d;  // [B, T+1, H, W, 2]     channels zeta, mask
    int batch = 1;
};

// The 4D windowed-attention encoder-decoder surrogate.
template <typename T>
class SurrogateModel {
  public:
    SurrogateModel(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<std::pair<std::string, nn::NodePtr<T>>>& parameters() const { return params_; }
    const std::vector<std::pair<std::string, std::shared_ptr<nn::Array<T>>>>& buffers() const {
        return buffers_;
    }
    size_t param_count() const;
    size_t param_count_prefix(const std::string& prefix) const;

    struct Output {
        nn::NodePtr<T> y3d;  // rows [B*T*D*H*W, 3] in (b, t, d, i, j) order, channels u, v, w
        nn::NodePtr<T> y2d;  // rows [B*T*H*W, 1]
    };

    // training=true uses batch statistics in the decoder norms (and updates
    // running statistics); eval mode is deterministic.
    Output forward(nn::Tape<T>* tape, const EncodedInput<T>& input, bool training,
                   RecomputePolicy policy = RecomputePolicy::None);

    // --- architecture pieces, exposed for direct verification ---
    nn::NodePtr<T> patch_embed_3d(nn::Tape<T>* tape, const nn::NodePtr<T>& x3, int batch);
    nn::NodePtr<T> patch_embed_2d(nn::Tape<T>* tape, const nn::NodePtr<T>& x2, int batch);
    nn::NodePtr<T> concat_depth(nn::Tape<T>* tape, const nn::NodePtr<T>& t3,
                                const nn::NodePtr<T>& t2, int batch);
    nn::NodePtr<T> add_positional(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int batch);
    nn::NodePtr<T> wmsa(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int stage, int block,
                        int batch);
    nn::NodePtr<T> swmsa(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int stage, int block,
                         int batch);
    nn::NodePtr<T> swin_block_pair(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int stage,
                                   int pair, int batch);
    nn::NodePtr<T> patch_merge(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int transition,
                               int batch);
    // The 8C-channel neighbor grouping ahead of the merge projection.
    nn::NodePtr<T> merge_groups(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int transition,
                                int batch);
    const BlockWeights<T>& block_weights(int stage, int block) const {
        return blocks_.at(stage).at(block);
    }
    Output decode(nn::Tape<T>* tape, const nn::NodePtr<T>& latent,
                  const std::vector<nn::NodePtr<T>>& skips, int batch, bool training,
                  bool update_stats);

    TokenDims stage_dims(int s) const { return dims_.at(s); }
    const WindowLayout& layout(int stage, bool shifted, int batch);

    void save(const std::string& path) const;
    static SurrogateModel<T> load(const std::string& path);

  private:
    ModelConfig cfg_;
    std::vector<TokenDims> dims_;        // token dims entering each stage
    std::vector<TokenDims> merged_dims_; // dims after each merge (= dims_[s+1])
    int d3_tokens_ = 0;                  // depth extent of the 3-d stream after embedding

    nn::NodePtr<T> embed3_w_, embed3_b_, embed2_w_, embed2_b_;
    nn::NodePtr<T> pos_spatial_, pos_temporal_;
    std::vector<std::vector<BlockWeights<T>>> blocks_;
    std::vector<nn::NodePtr<T>> merge_w_, merge_b_;

    struct UpStage {
        nn::NodePtr<T> up_w, up_b;      // stride-2 transposed conv as a linear map
        BatchNormLayer<T> up_bn;
        nn::NodePtr<T> fuse_w, fuse_b;  // 1x1 fusion after the skip concat
        BatchNormLayer<T> fuse_bn;
    };
    std::vector<UpStage> ups_;
    nn::NodePtr<T> rec3_w_, rec3_b_, head3_w_, head3_b_;
    nn::NodePtr<T> rec2_w_, rec2_b_, head2_w_, head2_b_;
    BatchNormLayer<T> rec3_bn_, rec2_bn_;

    std::vector<std::pair<std::string, nn::NodePtr<T>>> params_;
    std::vector<std::pair<std::string, std::shared_ptr<nn::Array<T>>>> buffers_;

    // Precomputed index tables, one set per batch size.
    struct StageTables {
        WindowLayout plain, shifted;
        std::shared_ptr<nn::Array<T>> plain_mask, shifted_mask;  // [NW*heads, win, win] additive
        nn::IndexVec head_split, head_merge;
    };
    struct Tables {
        nn::IndexVec embed3, embed2, canon;
        nn::IndexVec pos_spatial, pos_temporal;
        std::vector<StageTables> stages;
        std::vector<nn::IndexVec> merge;      // token -> 8 source rows (padded to even)
        std::vector<nn::IndexVec> up;         // up-conv scatter per up stage
        nn::IndexVec split3, split2;
        nn::IndexVec cells3, cells2;          // recovery scatter to cells, t in 1..T
    };
    std::map<int, Tables> tables_;
    Tables& ensure_tables(int batch);

    nn::NodePtr<T> attn_sublayer(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int stage,
                                 int block, int batch);
    nn::NodePtr<T> mlp_sublayer(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int stage,
                                int block, int batch);
    nn::NodePtr<T> window_attention(nn::Tape<T>* tape, const nn::NodePtr<T>& tokens, int stage,
                                    int block, int batch, bool shifted);

    nn::NodePtr<T> reg(const std::string& name, nn::Array<T> init);
    BatchNormLayer<T> make_bn(const std::string& name, int64_t c);
};

extern template class SurrogateModel<float>;
extern template class SurrogateModel<double>;

}  // namespace tidecast
