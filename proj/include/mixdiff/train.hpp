#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mixdiff/backbone.hpp"
#include "mixdiff/decode.hpp"
#include "mixdiff/synth.hpp"

namespace mixdiff {

struct TrainConfig {
    int steps = 2000;
    double lr = 2e-3;
    int batch_und = 8;
    int batch_gen = 0;
    int batch_inter = 0;
    double w_und = 1.0;
    double w_gen = 1.0;
    double w_inter = 1.0;
    AugmentConfig augment{0.3, 0.2, 16};
    bool augment_enabled = false;  // stage flag: augmentation activates in the final stage
    int pack_max_len = 256;
    double t_floor = 1e-3;
    TSampling t_sampling = TSampling::LOG_UNIFORM;
    double rms_beta = 0.999;
    double rms_eps = 1e-8;
    uint64_t seed = 1234;
    int log_every = 50;
    bool log_timing = true;

    void validate() const;
    std::string serialize() const;
    static TrainConfig deserialize(const std::string& text);
};

struct StepMetrics {
    int step = 0;
    double loss = 0.0, loss_und = 0.0, loss_gen = 0.0, loss_inter = 0.0;
    double wall_ms = 0.0;
};

// Line-delimited metrics stream. Per-step lines are deterministic given the
// seed; wall-clock fields are only emitted when timing logging is on.
class MetricsWriter {
public:
    void open(const std::string& path, bool log_timing);
    bool is_open() const { return os_.is_open(); }
    void write_train(const StepMetrics& m);
    void write_eval(int step, double accuracy, double mean_len, int block_len, double tau);

private:
    std::ofstream os_;
    bool log_timing_ = true;
};

struct TrainResult {
    int steps_done = 0;
    bool diverged = false;
    double last_loss = 0.0;
};

// Joint training loop over the three losses with sample packing, strict
// isolation, and a momentum-free adaptive optimizer (second-moment scaling
// with bias correction).
class Trainer {
public:
    Trainer(Backbone& model, const Corpus& corpus, TrainConfig cfg);

    TrainResult run(int n_steps, MetricsWriter* metrics = nullptr);
    int step() const { return step_; }

    // Checkpoint with optimizer state so a resumed run reproduces the
    // uninterrupted trajectory exactly.
    void save(const std::string& path);
    void load(const std::string& path);

private:
    struct PackResult {
        double loss_scaled = 0.0;
        double loss_raw = 0.0;
        int kind = 0;  // 0 und, 1 gen, 2 inter
        GradMap grads;
    };
    StepMetrics train_step();

    Backbone& model_;
    const Corpus& corpus_;
    TrainConfig cfg_;
    ParamStore opt_v_;  // second-moment accumulators, one per parameter
    int step_ = 0;
};

struct EvalResult {
    double accuracy = 0.0;
    double mean_len = 0.0;
    int n = 0;
    double wall_s = 0.0;
    int64_t forward_passes = 0;
    int64_t tokens = 0;
};

// Exact-match evaluation of decoded answers against the deterministic rule.
EvalResult eval_und(DecodeModel& model, const std::vector<UndSample>& split, const DecodeConfig& cfg);

DecodeWorkItem work_item_from(const UndSample& sample);

struct CacheBenchRow {
    int prefix_len = 0;
    double secs_uncached = 0.0;
    double secs_cached = 0.0;
    double speedup = 0.0;
    int64_t pos_uncached = 0;
    int64_t pos_cached = 0;
    double pos_ratio = 0.0;
    double analytic_ratio = 0.0;
};

// Cached vs full-recompute decoding at several prefix lengths with a
// deterministic workload (tau = 1 forces one committed token per pass).
// Reports wall-clock speedup and the hardware-independent recomputed-position
// counts next to the analytic cost model.
std::vector<CacheBenchRow> bench_cache(Backbone& model, const std::vector<int>& prefix_lens,
                                       int block_len, int n_blocks);

std::string format_cache_table(const std::vector<CacheBenchRow>& rows);

// Human-readable summary of metrics streams plus optional threshold/cache
// tables; writes tab-separated plot data next to `plot_prefix` when given.
std::string report(const std::vector<std::string>& metrics_files,
                   const std::string& threshold_table_file, const std::string& cache_table_file,
                   const std::string& plot_prefix = "");

}  // namespace mixdiff
