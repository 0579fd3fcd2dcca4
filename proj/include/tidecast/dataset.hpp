// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "tidecast/grid.hpp"

namespace tidecast {

// Per-variable z-score statistics; computed over training data only,
// excluding land cells.
struct NormStats {
    double mean_u = 0, std_u = 1;
    double mean_v = 0, std_v = 1;
    double mean_w = 0, std_w = 1;
    double mean_zeta = 0, std_zeta = 1;

    void validate() const;
};

NormStats compute_norm_stats(const std::vector<State>& states, const GridSpec& grid);
NormStats compute_norm_stats(const class TrajectoryReader& reader);
void save_norm_stats(const NormStats& s, const std::string& path);
NormStats load_norm_stats(const std::string& path);

// One training instance: initial condition at t0, boundary rings for t1..T,
// and the T interior truth states.
struct Sample {
    State initial;
    BoundarySeries boundaries;
    std::vector<State> targets;
    double interval = 0.0;
    bool normalized = false;
};

// Resample the staggered snapshot to cell centers: u, v become the mean of
// the two bracketing faces (replicated over the D levels of the barotropic
// column); zeta passes through; w is absent on the staggered container and
// stays zero.
State interpolate_to_centers(const StaggeredState& s, const GridSpec& grid);

struct PadRecord {
    int dh = 0, dw = 0, dd = 0;  // zero cells appended on the high side
    bool any() const { return dh || dw || dd; }
};

struct PaddedState {
    State state;
    PadRecord pad;
};

PaddedState pad_to_patch_multiple(const State& s, int patch_h, int patch_w, int patch_d = 1);
State crop_from_pad(const State& s, const PadRecord& pad);

// Grid for the padded arrays: appended cells are marked land so they stay
// zero and are excluded from every statistic.
GridSpec pad_grid(const GridSpec& grid, const PadRecord& pad);

State normalize(const State& s, const NormStats& stats, const GridSpec& grid);
State denormalize(const State& s, const NormStats& stats, const GridSpec& grid);

// Sliding-window extraction: sample k starts at state k*stride, uses it as
// the initial condition and the next `length` states as targets. Returns
// floor((N-1-length)/stride)+1 samples; an over-short trajectory gives none.
std::vector<Sample> window_samples(const Trajectory& traj, int length = 24, int stride = 6);
int window_count(int n_states, int length, int stride);

Sample make_window_sample(const Trajectory& traj, int start, int length);

// Keep every factor-th state; the interval scales by the factor.
Trajectory resample_coarse(const Trajectory& traj, int factor);

// --- sample directory format -------------------------------------------
// samples/{split}/{index:06d}/ with meta.json and raw float32 little-endian
// C-order files initial_{var}.bin, boundary.bin, target_{var}.bin.

void save_sample(const Sample& s, const GridSpec& grid, const std::string& dir);
Sample load_sample(const GridSpec& grid, const std::string& dir);

// --- sources and the prefetching loader ----------------------------------

class SampleSource {
  public:
    virtual ~SampleSource() = default;
    virtual size_t size() const = 0;
    virtual Sample get(size_t index) const = 0;
};

class VectorSampleSource final : public SampleSource {
  public:
    explicit VectorSampleSource(std::vector<Sample> samples) : samples_(std::move(samples)) {}
    size_t size() const override { return samples_.size(); }
    Sample get(size_t i) const override { return samples_.at(i); }

  private:
    std::vector<Sample> samples_;
};

// Materializes sliding windows straight from a trajectory directory, with an
// optional coarse resampling factor applied first.
class WindowSampleSource final : public SampleSource {
  public:
    WindowSampleSource(std::shared_ptr<TrajectoryReader> reader, int length, int stride,
                       int coarse_factor = 1);
    size_t size() const override { return count_; }
    Sample get(size_t index) const override;
    const GridSpec& grid() const;
    double interval() const { return interval_; }

  private:
    std::shared_ptr<TrajectoryReader> reader_;
    int length_, stride_, factor_;
    size_t count_ = 0;
    double interval_ = 0.0;
};

// Deterministic epoch order: identity when seed == 0 is not special; the
// permutation depends only on (seed, epoch).
std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch, bool shuffle);

// Bounded-queue producer/consumer loader. One producer thread maps indices
// to items batch by batch; with prefetch_depth == 0 the mapping runs inline
// on the consumer. Batch contents and order depend only on (order, batch),
// never on the prefetch depth. Exceptions from the producer surface on
// next() with the offending batch.
template <typename Item>
class BatchLoader {
  public:
    using MapFn = std::function<Item(size_t index)>;

    BatchLoader(std::vector<size_t> order, int batch, int prefetch_depth, MapFn fn)
        : order_(std::move(order)), batch_(batch), depth_(prefetch_depth), fn_(std::move(fn)) {
        require(batch_ >= 1, "batch size must be >= 1");
        require(depth_ >= 0, "prefetch depth must be >= 0");
        n_batches_ = (order_.size() + batch_ - 1) / batch_;
        if (depth_ > 0 && n_batches_ > 0)
            producer_ = std::thread([this] { produce(); });
    }

    ~BatchLoader() {
        {
            std::lock_guard<std::mutex> lk(m_);
            stop_ = true;
        }
        cv_space_.notify_all();
        if (producer_.joinable()) producer_.join();
    }

    size_t batch_count() const { return n_batches_; }

    // Returns nullopt when the epoch is exhausted.
    std::optional<std::vector<Item>> next() {
        if (next_batch_ >= n_batches_) return std::nullopt;
        if (depth_ == 0) {
            std::vector<Item> out = make_batch(next_batch_);
            ++next_batch_;
            return out;
        }
        std::unique_lock<std::mutex> lk(m_);
        cv_data_.wait(lk, [this] { return !queue_.empty() || error_; });
        if (error_ && queue_.empty()) std::rethrow_exception(error_);
        std::vector<Item> out = std::move(queue_.front());
        queue_.pop_front();
        ++next_batch_;
        lk.unlock();
        cv_space_.notify_one();
        return out;
    }

  private:
    std::vector<Item> make_batch(size_t b) {
        std::vector<Item> items;
        const size_t lo = b * batch_, hi = std::min(order_.size(), lo + batch_);
        items.reserve(hi - lo);
        for (size_t i = lo; i < hi; ++i) items.push_back(fn_(order_[i]));
        return items;
    }

    void produce() {
        for (size_t b = 0; b < n_batches_; ++b) {
            std::vector<Item> items;
            try {
                items = make_batch(b);
            } catch (...) {
                std::lock_guard<std::mutex> lk(m_);
                error_ = std::current_exception();
                cv_data_.notify_all();
                return;
            }
            std::unique_lock<std::mutex> lk(m_);
            cv_space_.wait(lk, [this] { return queue_.size() < static_cast<size_t>(depth_) || stop_; });
            if (stop_) return;
            queue_.push_back(std::move(items));
            lk.unlock();
            cv_data_.notify_one();
        }
    }

    std::vector<size_t> order_;
    int batch_;
    int depth_;
    MapFn fn_;
    size_t n_batches_ = 0;
    size_t next_batch_ = 0;

    std::mutex m_;
    std::condition_variable cv_data_, cv_space_;
    std::deque<std::vector<Item>> queue_;
    std::exception_ptr error_;
    bool stop_ = false;
    std::thread producer_;
};

// Spec-level convenience: batches of samples in seeded shuffled order.
std::unique_ptr<BatchLoader<Sample>> loader(const SampleSource& samples, int batch,
                                            int prefetch_depth, uint64_t seed, int epoch = 0,
                                            bool shuffle = true);

}  // namespace tidecast
