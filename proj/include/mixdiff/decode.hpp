#pragma once

#include <vector>

#include "mixdiff/backbone.hpp"
#include "mixdiff/layout.hpp"
#include "mixdiff/masked_diffusion.hpp"
#include "mixdiff/rng.hpp"

namespace mixdiff {

struct AugmentConfig {
    double p_ext = 0.0;
    double p_trunc = 0.0;
    int min_trunc_len = 16;

    void validate() const;
};

// Stochastic length perturbation of a training response: with prob p_ext
// append k ~ UniformInt[1, |r0|] EOS tokens; else with prob p_trunc (and only
// when |r0| > min_trunc_len) truncate to a uniform random prefix length in
// [1, |r0|-1]; else return r0 unchanged.
TokenSequence augment(const TokenSequence& r0, const AugmentConfig& cfg, Rng& rng);

struct DecodeConfig {
    int block_len = 32;
    double tau = 0.9;  // confidence threshold in (0, 1]; tokens need max prob > tau
    int max_blocks = 8;

    void validate(int max_seq_len, int prefix_len) const;
};

struct DecodeResult {
    std::vector<int> tokens;      // generated tokens; never contains MASK or EOS
    bool terminated = false;      // EOS was produced inside a completed block
    int blocks_used = 0;
    int64_t forward_passes = 0;
    int64_t committed_tokens = 0;
};

// Blockwise variable-length decoding: append a block of MASK tokens, run
// repeated forward passes committing every position whose max softmax
// probability clears tau (falling back to the single best position when none
// does, which guarantees progress), then either terminate on EOS or extend
// the cache with the completed block and continue.
DecodeResult decode(DecodeModel& model, const KVCache& cache0, const DecodeConfig& cfg);

// Same loop but recomputing the full sequence every pass instead of reusing
// cached keys/values; the baseline side of the cache speedup comparison.
DecodeResult decode_full_recompute(DecodeModel& model, const SegmentLayout& prefix_layout,
                                   const MixedInput& prefix_inputs, const DecodeConfig& cfg);

struct ThresholdProbeRow {
    double tau = 0.0;
    double tokens_per_s = 0.0;
    double passes_per_token = 0.0;
    double mean_len = 0.0;
    double accuracy = 0.0;
};

// Decoding workload: a cached prefix plus the reference answer for accuracy.
struct DecodeWorkItem {
    SegmentLayout prefix_layout;
    MixedInput prefix_inputs;
    std::vector<int> expected;
};

// Fixed-workload threshold sweep; forward-pass counts are the deterministic,
// hardware-independent figure of merit.
std::vector<ThresholdProbeRow> throughput_probe(DecodeModel& model,
                                                const std::vector<DecodeWorkItem>& workload,
                                                const std::vector<double>& taus,
                                                const DecodeConfig& base);

std::string format_probe_table(const std::vector<ThresholdProbeRow>& rows);

}  // namespace mixdiff
