// SPDX-License-Identifier: Apache-2.0
#include "tidecast/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "json.hpp"

using json = nlohmann::json;

namespace tidecast {

void save_history(const History& h, const std::string& path) {
    json j;
    j["train_loss"] = h.train_loss;
    j["val_loss"] = h.val_loss;
    j["epoch_seconds"] = h.epoch_seconds;
    j["best_epoch"] = h.best_epoch;
    j["best_val"] = h.best_val;
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump(2) << "\n";
}

namespace {

template <typename T>
class Adam {
  public:
    Adam(SurrogateModel<T>& model, const TrainConfig& cfg, int64_t total_steps)
        : model_(model), cfg_(cfg), total_steps_(total_steps) {
        for (const auto& [name, p] : model.parameters()) {
            m_.emplace_back(p->value.data.size(), T(0));
            v_.emplace_back(p->value.data.size(), T(0));
        }
    }

    double lr_at(int64_t step) const {
        const double warm = std::max<int64_t>(1, static_cast<int64_t>(cfg_.warmup_frac * total_steps_));
        if (step < warm) return cfg_.lr * static_cast<double>(step + 1) / warm;
        const double progress =
            static_cast<double>(step - warm) / std::max<int64_t>(1, total_steps_ - warm);
        const double floor = cfg_.lr * cfg_.lr_floor;
        return floor + 0.5 * (cfg_.lr - floor) * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
    }

    void step() {
        // global-norm clip in double
        double norm_sq = 0.0;
        for (const auto& [name, p] : model_.parameters()) {
            if (p->grad.data.empty()) continue;
            for (T g : p->grad.data) norm_sq += static_cast<double>(g) * g;
        }
        const double norm = std::sqrt(norm_sq);
        const double clip = norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;

        const double lr = lr_at(t_);
        ++t_;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        size_t k = 0;
        for (const auto& [name, p] : model_.parameters()) {
            auto& m = m_[k];
            auto& v = v_[k];
            ++k;
            if (p->grad.data.empty()) continue;
            for (size_t i = 0; i < p->value.data.size(); ++i) {
                const double g = static_cast<double>(p->grad.data[i]) * clip;
                m[i] = T(b1 * m[i] + (1 - b1) * g);
                v[i] = T(b2 * v[i] + (1 - b2) * g * g);
                const double mh = m[i] / bc1, vh = v[i] / bc2;
                p->value.data[i] -= T(lr * mh / (std::sqrt(vh) + eps));
            }
            std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
        }
    }

  private:
    SurrogateModel<T>& model_;
    TrainConfig cfg_;
    int64_t total_steps_;
    int64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

template <typename T>
double eval_loss(SurrogateModel<T>& model, const SampleSource& src, const GridSpec& grid,
                 const NormStats& stats, const TrainConfig& cfg) {
    if (src.size() == 0) return 0.0;
    double total = 0.0;
    int64_t count = 0;
    for (size_t lo = 0; lo < src.size(); lo += cfg.batch) {
        const size_t hi = std::min(src.size(), lo + cfg.batch);
        std::vector<Sample> samples;
        for (size_t i = lo; i < hi; ++i) samples.push_back(src.get(i));
        auto enc = encode_batch<T>(std::span(samples), grid, stats, model.config());
        auto out = model.forward(nullptr, enc.input, /*training=*/false);
        auto l = loss<T>(nullptr, out, enc);
        total += static_cast<double>(l->value.data[0]) * enc.weight_count;
        count += enc.weight_count;
    }
    return total / count;
}

}  // namespace

template <typename T>
TrainResult<T> train(SurrogateModel<T>& model, const SampleSource& train_src,
                     const SampleSource& val_src, const GridSpec& grid, const NormStats& stats,
                     const TrainConfig& cfg, const std::string& checkpoint_path) {
    cfg.validate();
    require(train_src.size() > 0, "training sample set is empty");

    const int64_t batches_per_epoch =
        (static_cast<int64_t>(train_src.size()) + cfg.batch - 1) / cfg.batch;
    Adam<T> opt(model, cfg, batches_per_epoch * cfg.epochs);

    TrainResult<T> result;
    History& hist = result.history;
    hist.best_val = std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto order = epoch_order(train_src.size(), cfg.seed, epoch, true);

        // one producer item = one encoded batch; decode/encode overlaps compute
        BatchLoader<EncodedBatch<T>> ld(
            epoch_order(static_cast<size_t>(batches_per_epoch), 0, 0, false), 1, cfg.prefetch,
            [&](size_t b) {
                const size_t lo = b * cfg.batch,
                             hi = std::min(order.size(), lo + cfg.batch);
                std::vector<Sample> samples;
                samples.reserve(hi - lo);
                for (size_t i = lo; i < hi; ++i) samples.push_back(train_src.get(order[i]));
                return encode_batch<T>(std::span(samples), grid, stats, model.config());
            });

        double epoch_loss = 0.0;
        int64_t weight_total = 0;
        while (auto item = ld.next()) {
            EncodedBatch<T>& enc = item->front();
            nn::Tape<T> tape;
            auto out = model.forward(&tape, enc.input, /*training=*/true, cfg.recompute);
            auto l = loss(&tape, out, enc);
            const double lval = l->value.data[0];
            if (!std::isfinite(lval)) throw TrainingError("loss diverged", epoch);
            epoch_loss += lval * enc.weight_count;
            weight_total += enc.weight_count;
            l->ensure_grad();
            l->grad.data[0] = T(1);
            tape.backward();
            opt.step();
        }
        hist.train_loss.push_back(epoch_loss / std::max<int64_t>(1, weight_total));

        const double val = eval_loss(model, val_src, grid, stats, cfg);
        hist.val_loss.push_back(val);
        if (val_src.size() == 0 ? epoch == cfg.epochs - 1 : val < hist.best_val) {
            hist.best_val = val;
            hist.best_epoch = epoch;
            if (!checkpoint_path.empty()) model.save(checkpoint_path);
        }
        hist.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return result;
}

template <typename T>
ForwardProbe<T> recompute_forward(SurrogateModel<T>& model, const EncodedBatch<T>& batch,
                                  RecomputePolicy policy, const std::vector<std::string>& grad_names) {
    for (const auto& [name, p] : model.parameters()) {
        p->grad.data.clear();
        p->grad.shape.clear();
    }
    nn::Tape<T> tape;
    auto out = model.forward(&tape, batch.input, /*training=*/true, policy);
    auto l = loss(&tape, out, batch);
    l->ensure_grad();
    l->grad.data[0] = T(1);
    tape.backward();

    ForwardProbe<T> probe;
    probe.loss = l->value.data[0];
    probe.retained_peak = tape.meter->peak;
    for (const auto& want : grad_names)
        for (const auto& [name, p] : model.parameters())
            if (name == want) probe.grads[name] = p->grad.data;
    for (const auto& [name, p] : model.parameters()) {
        p->grad.data.clear();
        p->grad.shape.clear();
    }
    return probe;
}

template TrainResult<float> train(SurrogateModel<float>&, const SampleSource&, const SampleSource&,
                                  const GridSpec&, const NormStats&, const TrainConfig&,
                                  const std::string&);
template TrainResult<double> train(SurrogateModel<double>&, const SampleSource&,
                                   const SampleSource&, const GridSpec&, const NormStats&,
                                   const TrainConfig&, const std::string&);
template ForwardProbe<float> recompute_forward(SurrogateModel<float>&, const EncodedBatch<float>&,
                                               RecomputePolicy, const std::vector<std::string>&);
template ForwardProbe<double> recompute_forward(SurrogateModel<double>&,
                                                const EncodedBatch<double>&, RecomputePolicy,
                                                const std::vector<std::string>&);

}  // namespace tidecast
