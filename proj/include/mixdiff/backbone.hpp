#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/layout.hpp"
#include "mixdiff/masked_diffusion.hpp"
#include "mixdiff/rectified_flow.hpp"
#include "mixdiff/rng.hpp"

namespace mixdiff {

struct ModelConfig {
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 66;  // includes the reserved MASK and EOS ids
    int mask_id = 64;
    int eos_id = 65;
    int latent_dim = 2;
    int max_seq_len = 1024;
    double rope_base = 10000.0;
    double time_freq_scale = 100.0;
    bool shared_layernorm = false;
    double init_sigma = 0.02;
    uint64_t init_seed = 42;

    int d_head() const { return d_model / n_heads; }
    void validate() const;
    std::string serialize() const;  // flat key=value block
    static ModelConfig deserialize(const std::string& text);
    uint64_t digest() const;
};

// Named parameter tensors in stable insertion order (checkpoint and optimizer
// iteration order). Values live behind stable addresses.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return map_.count(name) != 0; }
    const std::vector<std::string>& names() const { return names_; }
    std::vector<Tensor*> pointers();
    int64_t total_entries() const;

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, Tensor> map_;
};

struct CacheError : std::runtime_error {
    explicit CacheError(const std::string& what) : std::runtime_error(what) {}
};

// Per-layer attention keys/values for an immutable prefix. Keys are stored
// post-rotary at their absolute in-sample positions, so cached and uncached
// paths see bit-identical key rows. Immutable once written; extend_cache
// returns a new cache and leaves the old one untouched.
struct KVCache {
    int prefix_len = 0;
    uint64_t fingerprint = 0;
    SegmentLayout prefix_layout;
    std::vector<Tensor> keys;    // per layer [P x d_model]
    std::vector<Tensor> values;  // per layer [P x d_model]
};

// Inputs for one forward pass. tokens covers the discrete (TEXT/VIS_ENC)
// positions and latents the VIS_LAT positions, both in layout order. When a
// cache is supplied they cover only positions at or past the prefix boundary.
struct MixedInput {
    std::vector<int> tokens;
    Tensor latents;                     // [n_lat x latent_dim]
    std::vector<double> segment_times;  // per layout segment; read for VIS_LAT
};

// Tape handles produced by one traced forward pass. Row order follows the
// processed (active) positions: und_logits has one row per discrete position,
// gen_velocity one row per latent position. Invalid Var when a side is empty.
struct TracedForward {
    Var und_logits;
    Var gen_velocity;
    std::vector<int> disc_positions;  // active-relative row -> position
    std::vector<int> lat_positions;
};

// The surface blockwise decoding needs from a model; lets tests drive the
// decode loop with hand-set predictors.
class DecodeModel {
public:
    virtual ~DecodeModel() = default;
    virtual const ModelConfig& config() const = 0;
    virtual Tensor forward_und(const std::vector<int>& tokens, const SegmentLayout& layout,
                               const KVCache* cache) = 0;
    virtual KVCache write_cache(const SegmentLayout& prefix_layout,
                                const MixedInput& prefix_inputs) = 0;
    virtual KVCache extend_cache(const KVCache& cache, const std::vector<Segment>& block_segments,
                                 const MixedInput& block_inputs) = 0;
};

// Shared-attention two-expert transformer. The understanding expert embeds
// and decodes discrete TEXT/VIS_ENC tokens (categorical logits); the
// generation expert embeds latent VIS_LAT rows with an added time embedding
// and predicts velocity vectors. Per-layer attention projections are the
// same tensors for both experts; layer norms, feed-forward blocks, embedders
// and heads are per expert.
class Backbone : public DecodeModel {
public:
    explicit Backbone(const ModelConfig& cfg);

    const ModelConfig& config() const override { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // Traced forward over the active positions of `layout` (all positions
    // when cache is null). Records every op on the tape.
    TracedForward trace(Tape& tape, const MixedInput& input, const SegmentLayout& layout,
                        const KVCache* cache = nullptr);

    // Inference surfaces (values only).
    Tensor forward_und(const std::vector<int>& tokens, const SegmentLayout& layout,
                       const KVCache* cache = nullptr) override;
    Tensor forward_gen(const LatentSequence& latents, double t, const std::vector<int>& prompt_tokens,
                       const SegmentLayout& layout, const KVCache* cache = nullptr);

    // Cache lifecycle. The prefix must contain no MASK token and no active
    // segment; extend appends a fully-denoised block.
    KVCache write_cache(const SegmentLayout& prefix_layout, const MixedInput& prefix_inputs) override;
    KVCache extend_cache(const KVCache& cache, const std::vector<Segment>& block_segments,
                         const MixedInput& block_inputs) override;

    // Adapters for the loss modules.
    LogitsFn logits_fn();
    VelocityFn velocity_fn(std::vector<int> discrete_tokens);

    // Velocity field with the prompt prefix cached once and reused each step.
    VelocityField velocity_field(const std::vector<int>& prompt_tokens,
                                 const SegmentLayout& prompt_layout, int n_lat_tokens,
                                 int sample_id = 0, int turn_index = 0);

    uint64_t fingerprint_of(const SegmentLayout& prefix_layout) const;

    // Cost instrumentation: positions processed by forward passes.
    int64_t positions_computed() const { return positions_computed_.load(); }
    void reset_positions_computed() { positions_computed_.store(0); }

    Backbone(Backbone&& o) noexcept
        : cfg_(std::move(o.cfg_)),
          params_(std::move(o.params_)),
          positions_computed_(o.positions_computed_.load()) {}

private:
    TracedForward trace_impl(Tape& tape, const MixedInput& input, const SegmentLayout& layout,
                             const KVCache* cache, std::vector<std::pair<Tensor, Tensor>>* kv_out);
    Var routed_layer_norm(Tape& tape, Var x, const std::vector<int>& disc_rows,
                          const std::vector<int>& lat_rows, const std::string& base);
    Var expert_ffn(Tape& tape, Var rows, const std::string& base);
    Var time_embedding(Tape& tape, double t);
    Var param(Tape& tape, const std::string& name) { return tape.param(&params_.at(name)); }
    std::string ln_name(const std::string& base, const char* expert) const;

    ModelConfig cfg_;
    ParamStore params_;
    std::atomic<int64_t> positions_computed_{0};
};

// Checkpoint file: magic + version + config digest header, the serialized
// config, then named double-precision tensor records. Round-trips bit-exact.
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const std::vector<std::pair<std::string, const Tensor*>>& records);
struct Checkpoint {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> records;
    const Tensor* find(const std::string& name) const;
};
Checkpoint load_checkpoint(const std::string& path);

void save_model(const std::string& path, Backbone& model);
Backbone load_model(const std::string& path);

}  // namespace mixdiff
