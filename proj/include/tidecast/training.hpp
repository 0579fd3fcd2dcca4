// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "tidecast/model_io.hpp"

namespace tidecast {

enum class Regime { Fine, Coarse };

struct TrainConfig {
    int epochs = 30;
    int batch = 2;
    double lr = 3e-4;
    uint64_t seed = 7;
    RecomputePolicy recompute = RecomputePolicy::SwmsaBoundary;
    int prefetch = 2;
    Regime regime = Regime::Fine;
    double clip_norm = 1.0;     // global gradient norm
    double warmup_frac = 0.05;  // linear warmup share of total steps
    double lr_floor = 0.01;     // cosine decays to lr * lr_floor
    double val_fraction = 0.1;  // chronological tail held out when no val source given

    void validate() const {
        require(epochs >= 1 && batch >= 1 && prefetch >= 0, "train config must be positive");
        require(lr > 0 && clip_norm > 0, "learning rate and clip must be positive");
    }
};

// Normalized mean squared error over all variables, steps, and water cells.
template <typename T>
nn::NodePtr<T> loss(nn::Tape<T>* tape, const typename SurrogateModel<T>::Output& out,
                    const EncodedBatch<T>& batch) {
    if (out.y3d->value.numel() != batch.y3d->numel() ||
        out.y2d->value.numel() != batch.y2d->numel())
        throw ShapeError("prediction and target extents differ");
    auto sse3 = nn::weighted_sse(tape, out.y3d, batch.y3d, batch.w3d);
    auto sse2 = nn::weighted_sse(tape, out.y2d, batch.y2d, batch.w2d);
    auto total = nn::add(tape, sse3, sse2);
    return nn::scale(tape, total, T(1.0 / static_cast<double>(batch.weight_count)));
}

// Chronological contiguous view of another source.
class SubsetSource final : public SampleSource {
  public:
    SubsetSource(const SampleSource& inner, size_t lo, size_t hi)
        : inner_(inner), lo_(lo), hi_(hi) {
        require(lo <= hi && hi <= inner.size(), "subset range out of bounds");
    }
    size_t size() const override { return hi_ - lo_; }
    Sample get(size_t i) const override { return inner_.get(lo_ + i); }

  private:
    const SampleSource& inner_;
    size_t lo_, hi_;
};

struct History {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_loss;
    std::vector<double> epoch_seconds;
    int best_epoch = -1;
    double best_val = 0.0;
};

void save_history(const History& h, const std::string& path);

template <typename T>
struct TrainResult {
    History history;
};

// Adam with linear warmup and cosine decay; best-validation checkpoint is
// written to checkpoint_path when non-empty. Deterministic under the seed.
template <typename T>
TrainResult<T> train(SurrogateModel<T>& model, const SampleSource& train_src,
                     const SampleSource& val_src, const GridSpec& grid, const NormStats& stats,
                     const TrainConfig& cfg, const std::string& checkpoint_path);

// One loss/gradient evaluation under the given policy, with the
// activation-accounting meter exposed; used to check that recomputation
// changes memory, never values.
template <typename T>
struct ForwardProbe {
    double loss = 0.0;
    size_t retained_peak = 0;
    std::map<std::string, std::vector<T>> grads;  // for the requested parameter names
};

template <typename T>
ForwardProbe<T> recompute_forward(SurrogateModel<T>& model, const EncodedBatch<T>& batch,
                                  RecomputePolicy policy,
                                  const std::vector<std::string>& grad_names = {});

}  // namespace tidecast
