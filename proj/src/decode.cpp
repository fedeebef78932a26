#include "mixdiff/decode.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace mixdiff {

void AugmentConfig::validate() const {
    if (p_ext < 0.0 || p_ext > 1.0 || p_trunc < 0.0 || p_trunc > 1.0)
        throw std::invalid_argument("augment: probabilities must lie in [0,1]");
    if (p_ext + p_trunc > 1.0)
        throw std::invalid_argument("augment: p_ext + p_trunc must not exceed 1");
    if (min_trunc_len < 1) throw std::invalid_argument("augment: min_trunc_len must be positive");
}

TokenSequence augment(const TokenSequence& r0, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    if (r0.ids.empty()) throw std::invalid_argument("augment: empty response");
    if (r0.contains_mask()) throw std::invalid_argument("augment: response contains MASK");

    const double u = rng.uniform();
    const int n = r0.size();
    TokenSequence out = r0;
    if (u < cfg.p_ext) {
        const int k = static_cast<int>(rng.range_inclusive(1, n));
        out.ids.insert(out.ids.end(), k, r0.eos_id);
    } else if (u < cfg.p_ext + cfg.p_trunc && n > cfg.min_trunc_len) {
        const int keep = static_cast<int>(rng.range_inclusive(1, n - 1));
        out.ids.resize(keep);
    }
    return out;
}

void DecodeConfig::validate(int max_seq_len, int prefix_len) const {
    if (block_len < 1) throw std::invalid_argument("decode: block_len must be >= 1");
    if (!(tau > 0.0 && tau <= 1.0))
        throw std::invalid_argument("decode: tau must lie in (0,1]");
    if (max_blocks < 1) throw std::invalid_argument("decode: max_blocks must be >= 1");
    if (static_cast<int64_t>(max_blocks) * block_len > max_seq_len - prefix_len)
        throw std::invalid_argument("decode: max_blocks * block_len exceeds the sequence budget");
}

namespace {

struct BlockState {
    std::vector<int> tokens;  // current block content (MASK where undecided)
    int n_masked = 0;
};

// Commit pass: accept every masked position whose max softmax probability
// clears tau; if none does, commit the single highest-confidence position.
// The MASK column is excluded: the predictor models clean tokens, which by
// contract never contain MASK. Returns the number of committed tokens.
int commit_from_logits(const Tensor& logits, std::vector<int>& block, int mask_id, double tau) {
    const int L = static_cast<int>(block.size());
    const int vsz = logits.cols();
    int committed = 0;
    int best_pos = -1, best_tok = -1;
    double best_conf = -1.0;
    for (int i = 0; i < L; ++i) {
        if (block[i] != mask_id) continue;
        double m = -HUGE_VAL;
        int arg = 0;
        for (int j = 0; j < vsz; ++j) {
            if (j == mask_id) continue;
            if (logits.at(i, j) > m) {
                m = logits.at(i, j);
                arg = j;
            }
        }
        double z = 0.0;
        for (int j = 0; j < vsz; ++j) {
            if (j == mask_id) continue;
            z += std::exp(logits.at(i, j) - m);
        }
        double conf = 1.0 / z;  // softmax probability of the argmax
        if (conf > tau) {
            block[i] = arg;
            ++committed;
        } else if (conf > best_conf) {
            best_conf = conf;
            best_pos = i;
            best_tok = arg;
        }
    }
    if (committed == 0 && best_pos >= 0) {
        block[best_pos] = best_tok;
        committed = 1;
    }
    return committed;
}

Segment response_block_segment(const SegmentLayout& prefix, int block_len) {
    Segment s;
    s.modality = Modality::TEXT;
    s.role = Role::RESPONSE;
    s.length = block_len;
    if (!prefix.segments.empty()) {
        s.sample_id = prefix.segments.back().sample_id;
        s.turn_index = prefix.segments.back().turn_index;
    }
    s.active = true;
    return s;
}

}  // namespace

DecodeResult decode(DecodeModel& model, const KVCache& cache0, const DecodeConfig& cfg) {
    cfg.validate(model.config().max_seq_len, cache0.prefix_len);
    const int mask_id = model.config().mask_id;
    const int eos_id = model.config().eos_id;
    const int L = cfg.block_len;

    KVCache cache = cache0;  // the caller's cache is never touched
    DecodeResult result;

    for (int b = 0; b < cfg.max_blocks; ++b) {
        Segment block_seg = response_block_segment(cache.prefix_layout, L);
        SegmentLayout combined = cache.prefix_layout.with_appended(block_seg);
        std::vector<int> block(L, mask_id);
        int masked = L;
        while (masked > 0) {
            Tensor logits = model.forward_und(block, combined, &cache);
            ++result.forward_passes;
            int committed = commit_from_logits(logits, block, mask_id, cfg.tau);
            result.committed_tokens += committed;
            masked -= committed;
        }
        ++result.blocks_used;

        bool has_eos = false;
        for (int id : block)
            if (id == eos_id) has_eos = true;
        if (has_eos) {
            for (int id : block) {
                if (id == eos_id) break;
                result.tokens.push_back(id);
            }
            result.terminated = true;
            return result;
        }
        result.tokens.insert(result.tokens.end(), block.begin(), block.end());
        if (b + 1 == cfg.max_blocks) break;  // budget exhausted, flagged non-terminated

        block_seg.active = false;
        MixedInput block_in;
        block_in.tokens = block;
        cache = model.extend_cache(cache, {block_seg}, block_in);
    }
    result.terminated = false;
    return result;
}

DecodeResult decode_full_recompute(DecodeModel& model, const SegmentLayout& prefix_layout,
                                   const MixedInput& prefix_inputs, const DecodeConfig& cfg) {
    cfg.validate(model.config().max_seq_len, prefix_layout.total_len());
    const int mask_id = model.config().mask_id;
    const int eos_id = model.config().eos_id;
    const int L = cfg.block_len;

    SegmentLayout done_layout = prefix_layout;
    std::vector<int> done_tokens = prefix_inputs.tokens;
    DecodeResult result;

    for (int b = 0; b < cfg.max_blocks; ++b) {
        Segment block_seg = response_block_segment(done_layout, L);
        block_seg.active = false;
        SegmentLayout combined = done_layout.with_appended(block_seg);
        std::vector<int> block(L, mask_id);
        int masked = L;
        while (masked > 0) {
            std::vector<int> tokens = done_tokens;
            tokens.insert(tokens.end(), block.begin(), block.end());
            Tensor all_logits = model.forward_und(tokens, combined, nullptr);
            ++result.forward_passes;
            // rows for the active block are the trailing L discrete rows
            Tensor logits = Tensor::zeros({L, all_logits.cols()});
            const int off = all_logits.rows() - L;
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < all_logits.cols(); ++j) logits.at(i, j) = all_logits.at(off + i, j);
            int committed = commit_from_logits(logits, block, mask_id, cfg.tau);
            result.committed_tokens += committed;
            masked -= committed;
        }
        ++result.blocks_used;

        bool has_eos = false;
        for (int id : block)
            if (id == eos_id) has_eos = true;
        if (has_eos) {
            for (int id : block) {
                if (id == eos_id) break;
                result.tokens.push_back(id);
            }
            result.terminated = true;
            return result;
        }
        result.tokens.insert(result.tokens.end(), block.begin(), block.end());
        done_layout = combined;
        done_tokens.insert(done_tokens.end(), block.begin(), block.end());
    }
    result.terminated = false;
    return result;
}

std::vector<ThresholdProbeRow> throughput_probe(DecodeModel& model,
                                                const std::vector<DecodeWorkItem>& workload,
                                                const std::vector<double>& taus,
                                                const DecodeConfig& base) {
    std::vector<ThresholdProbeRow> rows;
    rows.reserve(taus.size());
    for (double tau : taus) {
        DecodeConfig cfg = base;
        cfg.tau = tau;
        int64_t passes = 0, tokens = 0, exact = 0;
        auto t0 = std::chrono::steady_clock::now();
        for (const auto& item : workload) {
            KVCache cache = model.write_cache(item.prefix_layout, item.prefix_inputs);
            DecodeResult r = decode(model, cache, cfg);
            passes += r.forward_passes;
            tokens += static_cast<int64_t>(r.tokens.size());
            if (r.tokens == item.expected) ++exact;
        }
        auto t1 = std::chrono::steady_clock::now();
        double secs = std::chrono::duration<double>(t1 - t0).count();
        ThresholdProbeRow row;
        row.tau = tau;
        row.tokens_per_s = secs > 0.0 ? static_cast<double>(tokens) / secs : 0.0;
        row.passes_per_token = tokens > 0 ? static_cast<double>(passes) / static_cast<double>(tokens) : 0.0;
        row.mean_len = workload.empty() ? 0.0 : static_cast<double>(tokens) / static_cast<double>(workload.size());
        row.accuracy = workload.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(workload.size());
        rows.push_back(row);
    }
    return rows;
}

std::string format_probe_table(const std::vector<ThresholdProbeRow>& rows) {
    std::ostringstream os;
    os << "# mixdiff-threshold-table-v1\n";
    os << "# tau tokens_per_s passes_per_token mean_len accuracy\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.3f %.3f %.6f %.3f %.6f\n", r.tau, r.tokens_per_s,
                      r.passes_per_token, r.mean_len, r.accuracy);
        os << buf;
    }
    return os.str();
}

}  // namespace mixdiff
