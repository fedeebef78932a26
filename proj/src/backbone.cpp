#include "mixdiff/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mixdiff {

// ---------------------------------------------------------------------------
// config

void ModelConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
        throw std::invalid_argument("config: dimensions must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("config: d_model must equal n_heads * d_head");
    if (d_head() % 2 != 0) throw std::invalid_argument("config: head dim must be even");
    if (vocab_size < 3) throw std::invalid_argument("config: vocabulary too small");
    if (mask_id < 0 || mask_id >= vocab_size || eos_id < 0 || eos_id >= vocab_size || mask_id == eos_id)
        throw std::invalid_argument("config: MASK/EOS ids must be distinct ids inside the vocabulary");
    if (latent_dim <= 0) throw std::invalid_argument("config: latent_dim must be positive");
    if (max_seq_len <= 0) throw std::invalid_argument("config: max_seq_len must be positive");
}

std::string ModelConfig::serialize() const {
    std::ostringstream os;
    os << "format=mixdiff-model-config-v1\n";
    os << "d_model=" << d_model << "\n";
    os << "n_layers=" << n_layers << "\n";
    os << "n_heads=" << n_heads << "\n";
    os << "d_ff=" << d_ff << "\n";
    os << "vocab_size=" << vocab_size << "\n";
    os << "mask_id=" << mask_id << "\n";
    os << "eos_id=" << eos_id << "\n";
    os << "latent_dim=" << latent_dim << "\n";
    os << "max_seq_len=" << max_seq_len << "\n";
    os << "rope_base=" << rope_base << "\n";
    os << "time_freq_scale=" << time_freq_scale << "\n";
    os << "shared_layernorm=" << (shared_layernorm ? 1 : 0) << "\n";
    os << "init_sigma=" << init_sigma << "\n";
    os << "init_seed=" << init_seed << "\n";
    return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    bool saw_format = false;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("config: bad line: " + line);
        std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "format") {
            if (value != "mixdiff-model-config-v1")
                throw std::invalid_argument("config: unsupported format " + value);
            saw_format = true;
        } else if (key == "d_model") cfg.d_model = std::stoi(value);
        else if (key == "n_layers") cfg.n_layers = std::stoi(value);
        else if (key == "n_heads") cfg.n_heads = std::stoi(value);
        else if (key == "d_ff") cfg.d_ff = std::stoi(value);
        else if (key == "vocab_size") cfg.vocab_size = std::stoi(value);
        else if (key == "mask_id") cfg.mask_id = std::stoi(value);
        else if (key == "eos_id") cfg.eos_id = std::stoi(value);
        else if (key == "latent_dim") cfg.latent_dim = std::stoi(value);
        else if (key == "max_seq_len") cfg.max_seq_len = std::stoi(value);
        else if (key == "rope_base") cfg.rope_base = std::stod(value);
        else if (key == "time_freq_scale") cfg.time_freq_scale = std::stod(value);
        else if (key == "shared_layernorm") cfg.shared_layernorm = std::stoi(value) != 0;
        else if (key == "init_sigma") cfg.init_sigma = std::stod(value);
        else if (key == "init_seed") cfg.init_seed = std::stoull(value);
        else throw std::invalid_argument("config: unknown key " + key);
    }
    if (!saw_format) throw std::invalid_argument("config: missing format line");
    cfg.validate();
    return cfg;
}

static uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t ModelConfig::digest() const { return fnv1a(serialize()); }

// ---------------------------------------------------------------------------
// param store

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    if (map_.count(name)) throw std::invalid_argument("params: duplicate name " + name);
    names_.push_back(name);
    return map_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("params: unknown name " + name);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("params: unknown name " + name);
    return it->second;
}

std::vector<Tensor*> ParamStore::pointers() {
    std::vector<Tensor*> out;
    out.reserve(names_.size());
    for (const auto& n : names_) out.push_back(&map_.at(n));
    return out;
}

int64_t ParamStore::total_entries() const {
    int64_t n = 0;
    for (const auto& kv : map_) n += kv.second.numel();
    return n;
}

// ---------------------------------------------------------------------------
// backbone

static Tensor gaussian(const std::vector<int>& shape, double sigma, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    for (double& x : t.data) x = sigma * rng.normal();
    return t;
}

std::string Backbone::ln_name(const std::string& base, const char* expert) const {
    return base + "." + (cfg_.shared_layernorm ? "und" : expert);
}

Backbone::Backbone(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const int d = cfg_.d_model;
    const double s = cfg_.init_sigma;

    params_.add("und.embed", gaussian({cfg_.vocab_size, d}, s, rng));
    params_.add("gen.in.w", gaussian({cfg_.latent_dim, d}, s, rng));
    params_.add("gen.in.b", Tensor::zeros({1, d}));
    params_.add("gen.time.w1", gaussian({d, d}, s, rng));
    params_.add("gen.time.b1", Tensor::zeros({1, d}));
    params_.add("gen.time.w2", gaussian({d, d}, s, rng));
    params_.add("gen.time.b2", Tensor::zeros({1, d}));

    auto add_ln = [&](const std::string& base) {
        params_.add(base + ".und.g", Tensor::full({1, d}, 1.0));
        params_.add(base + ".und.b", Tensor::zeros({1, d}));
        if (!cfg_.shared_layernorm) {
            params_.add(base + ".gen.g", Tensor::full({1, d}, 1.0));
            params_.add(base + ".gen.b", Tensor::zeros({1, d}));
        }
    };
    auto add_ffn = [&](const std::string& base) {
        params_.add(base + ".w1", gaussian({d, cfg_.d_ff}, s, rng));
        params_.add(base + ".b1", Tensor::zeros({1, cfg_.d_ff}));
        params_.add(base + ".w2", gaussian({cfg_.d_ff, d}, s, rng));
        params_.add(base + ".b2", Tensor::zeros({1, d}));
    };

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string lp = "layers." + std::to_string(l) + ".";
        params_.add(lp + "attn.wq", gaussian({d, d}, s, rng));
        params_.add(lp + "attn.wk", gaussian({d, d}, s, rng));
        params_.add(lp + "attn.wv", gaussian({d, d}, s, rng));
        params_.add(lp + "attn.wo", gaussian({d, d}, s, rng));
        add_ln(lp + "ln1");
        add_ln(lp + "ln2");
        add_ffn(lp + "ffn.und");
        add_ffn(lp + "ffn.gen");
    }
    add_ln("final_ln");
    params_.add("und.head.w", gaussian({d, cfg_.vocab_size}, s, rng));
    params_.add("und.head.b", Tensor::zeros({1, cfg_.vocab_size}));
    params_.add("gen.head.w", gaussian({d, cfg_.latent_dim}, s, rng));
    params_.add("gen.head.b", Tensor::zeros({1, cfg_.latent_dim}));
}

Var Backbone::routed_layer_norm(Tape& tape, Var x, const std::vector<int>& disc_rows,
                                const std::vector<int>& lat_rows, const std::string& base) {
    const int n = tape.val(x).rows();
    if (lat_rows.empty())
        return tape.layer_norm(x, param(tape, ln_name(base, "und") + ".g"),
                               param(tape, ln_name(base, "und") + ".b"));
    if (disc_rows.empty())
        return tape.layer_norm(x, param(tape, ln_name(base, "gen") + ".g"),
                               param(tape, ln_name(base, "gen") + ".b"));
    Var xd = tape.layer_norm(tape.gather_rows(x, disc_rows), param(tape, ln_name(base, "und") + ".g"),
                             param(tape, ln_name(base, "und") + ".b"));
    Var xl = tape.layer_norm(tape.gather_rows(x, lat_rows), param(tape, ln_name(base, "gen") + ".g"),
                             param(tape, ln_name(base, "gen") + ".b"));
    return tape.add(tape.scatter_rows(xd, disc_rows, n), tape.scatter_rows(xl, lat_rows, n));
}

Var Backbone::expert_ffn(Tape& tape, Var rows, const std::string& base) {
    Var h = tape.silu(tape.add_rowvec(tape.matmul(rows, param(tape, base + ".w1")),
                                      param(tape, base + ".b1")));
    return tape.add_rowvec(tape.matmul(h, param(tape, base + ".w2")), param(tape, base + ".b2"));
}

Var Backbone::time_embedding(Tape& tape, double t) {
    const int d = cfg_.d_model;
    const int half = d / 2;
    Tensor feats = Tensor::zeros({1, d});
    for (int j = 0; j < half; ++j) {
        double freq = std::pow(10000.0, -static_cast<double>(j) / half);
        double a = cfg_.time_freq_scale * t * freq;
        feats.data[2 * j] = std::sin(a);
        feats.data[2 * j + 1] = std::cos(a);
    }
    Var h = tape.silu(tape.add_rowvec(tape.matmul(tape.constant(std::move(feats)), param(tape, "gen.time.w1")),
                                      param(tape, "gen.time.b1")));
    return tape.add_rowvec(tape.matmul(h, param(tape, "gen.time.w2")), param(tape, "gen.time.b2"));
}

uint64_t Backbone::fingerprint_of(const SegmentLayout& prefix_layout) const {
    return fnv1a(serialize_layout(prefix_layout), cfg_.digest() | 1ULL);
}

TracedForward Backbone::trace(Tape& tape, const MixedInput& input, const SegmentLayout& layout,
                              const KVCache* cache) {
    return trace_impl(tape, input, layout, cache, nullptr);
}

TracedForward Backbone::trace_impl(Tape& tape, const MixedInput& input, const SegmentLayout& layout,
                                   const KVCache* cache,
                                   std::vector<std::pair<Tensor, Tensor>>* kv_out) {
    layout.validate();
    const int n_total = layout.total_len();
    if (n_total > cfg_.max_seq_len)
        throw std::invalid_argument("forward: sequence length " + std::to_string(n_total) +
                                    " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    int prefix = 0;
    if (cache) {
        prefix = prefix_boundary(layout);
        if (prefix != cache->prefix_len)
            throw CacheError("cache covers " + std::to_string(cache->prefix_len) +
                             " positions but layout prefix is " + std::to_string(prefix));
        if (fingerprint_of(cache->prefix_layout) != cache->fingerprint)
            throw CacheError("cache fingerprint mismatch");
        if (cache->prefix_layout.segments.size() > layout.segments.size())
            throw CacheError("layout has fewer segments than the cached prefix");
        SegmentLayout head;
        head.segments.assign(layout.segments.begin(),
                             layout.segments.begin() + cache->prefix_layout.segments.size());
        for (auto& s : head.segments) s.active = false;
        if (serialize_layout(head) != serialize_layout(cache->prefix_layout))
            throw CacheError("layout prefix does not match the cached layout");
        if (static_cast<int>(cache->keys.size()) != cfg_.n_layers)
            throw CacheError("cache layer count mismatch");
    }
    const int n_act = n_total - prefix;
    if (n_act <= 0) throw std::invalid_argument("forward: no positions to process");

    // sample-local positions across the combined layout
    std::vector<int> pos_local(n_total);
    {
        int pos = 0, cur_sample = -1, sample_start = 0;
        for (const auto& s : layout.segments) {
            if (s.sample_id != cur_sample) {
                cur_sample = s.sample_id;
                sample_start = pos;
            }
            for (int i = 0; i < s.length; ++i, ++pos) pos_local[pos] = pos - sample_start;
        }
    }
    std::vector<int> act_pos_local(pos_local.begin() + prefix, pos_local.end());

    // active-row modality split, plus per-latent-segment spans for time rows
    std::vector<int> disc_rows, lat_rows;
    TracedForward out;
    std::vector<std::pair<int, int>> lat_spans;  // (segment index, active length)
    {
        int pos = 0;
        for (size_t si = 0; si < layout.segments.size(); ++si) {
            const Segment& s = layout.segments[si];
            int act_in_seg = 0;
            for (int i = 0; i < s.length; ++i, ++pos) {
                if (pos < prefix) continue;
                const int row = pos - prefix;
                if (s.modality == Modality::VIS_LAT) {
                    lat_rows.push_back(row);
                    out.lat_positions.push_back(pos);
                    ++act_in_seg;
                } else {
                    disc_rows.push_back(row);
                    out.disc_positions.push_back(pos);
                }
            }
            if (act_in_seg > 0 && s.modality == Modality::VIS_LAT)
                lat_spans.emplace_back(static_cast<int>(si), act_in_seg);
        }
    }

    if (static_cast<int>(input.tokens.size()) != static_cast<int>(disc_rows.size()))
        throw std::invalid_argument("forward: got " + std::to_string(input.tokens.size()) +
                                    " tokens for " + std::to_string(disc_rows.size()) +
                                    " discrete positions");
    for (int id : input.tokens)
        if (id < 0 || id >= cfg_.vocab_size)
            throw std::invalid_argument("forward: token id " + std::to_string(id) + " outside vocabulary");
    if (!lat_rows.empty()) {
        if (input.latents.rows() != static_cast<int>(lat_rows.size()) ||
            input.latents.cols() != cfg_.latent_dim)
            throw std::invalid_argument("forward: latents " + input.latents.shape_str() +
                                        " do not match layout latent positions");
        if (!input.latents.all_finite())
            throw std::invalid_argument("forward: latent rows must be finite");
        if (input.segment_times.size() != layout.segments.size())
            throw std::invalid_argument("forward: segment_times must have one entry per segment");
        for (const auto& span : lat_spans) {
            double t = input.segment_times[span.first];
            if (!(t >= 0.0 && t <= 1.0))
                throw std::invalid_argument("forward: time outside [0,1]");
        }
    }

    positions_computed_.fetch_add(n_act, std::memory_order_relaxed);

    const bool all_disc = lat_rows.empty();
    const bool all_lat = disc_rows.empty();

    // embeddings
    Var x;
    Var xd, xl;
    if (!disc_rows.empty()) xd = tape.embed_rows(param(tape, "und.embed"), input.tokens);
    if (!lat_rows.empty()) {
        Var lin = tape.add_rowvec(tape.matmul(tape.constant(input.latents), param(tape, "gen.in.w")),
                                  param(tape, "gen.in.b"));
        std::vector<Var> trows;
        for (const auto& span : lat_spans) {
            Var e = time_embedding(tape, input.segment_times[span.first]);
            trows.push_back(tape.tile_row(e, span.second));
        }
        Var tall = trows.size() == 1 ? trows[0] : tape.concat_rows(trows);
        xl = tape.add(lin, tall);
    }
    if (all_disc) x = xd;
    else if (all_lat) x = xl;
    else x = tape.add(tape.scatter_rows(xd, disc_rows, n_act), tape.scatter_rows(xl, lat_rows, n_act));

    // mask rows for active queries over every key position
    const AttentionMask full_mask = build_mask(layout);
    Tensor bias = Tensor::zeros({n_act, n_total});
    for (int r = 0; r < n_act; ++r)
        for (int k = 0; k < n_total; ++k)
            if (!full_mask.at(prefix + r, k)) bias.at(r, k) = -1e30;

    if (kv_out) kv_out->assign(cfg_.n_layers, {});

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string lp = "layers." + std::to_string(l) + ".";
        Var xn = routed_layer_norm(tape, x, disc_rows, lat_rows, lp + "ln1");
        Var q = tape.rope(tape.matmul(xn, param(tape, lp + "attn.wq")), act_pos_local, cfg_.n_heads,
                          cfg_.rope_base);
        Var k = tape.rope(tape.matmul(xn, param(tape, lp + "attn.wk")), act_pos_local, cfg_.n_heads,
                          cfg_.rope_base);
        Var v = tape.matmul(xn, param(tape, lp + "attn.wv"));
        if (kv_out) (*kv_out)[l] = {tape.val(k), tape.val(v)};
        Var k_all = k, v_all = v;
        if (cache && prefix > 0) {
            k_all = tape.concat_rows({tape.constant(cache->keys[l]), k});
            v_all = tape.concat_rows({tape.constant(cache->values[l]), v});
        }
        Var attn = tape.attention(q, k_all, v_all, bias, cfg_.n_heads);
        x = tape.add(x, tape.matmul(attn, param(tape, lp + "attn.wo")));

        Var xn2 = routed_layer_norm(tape, x, disc_rows, lat_rows, lp + "ln2");
        if (!disc_rows.empty()) {
            Var rows = all_disc ? xn2 : tape.gather_rows(xn2, disc_rows);
            Var f = expert_ffn(tape, rows, lp + "ffn.und");
            x = tape.add(x, all_disc ? f : tape.scatter_rows(f, disc_rows, n_act));
        }
        if (!lat_rows.empty()) {
            Var rows = all_lat ? xn2 : tape.gather_rows(xn2, lat_rows);
            Var f = expert_ffn(tape, rows, lp + "ffn.gen");
            x = tape.add(x, all_lat ? f : tape.scatter_rows(f, lat_rows, n_act));
        }
    }

    if (!disc_rows.empty()) {
        Var rows = all_disc ? x : tape.gather_rows(x, disc_rows);
        Var ln = tape.layer_norm(rows, param(tape, ln_name("final_ln", "und") + ".g"),
                                 param(tape, ln_name("final_ln", "und") + ".b"));
        out.und_logits = tape.add_rowvec(tape.matmul(ln, param(tape, "und.head.w")),
                                         param(tape, "und.head.b"));
    }
    if (!lat_rows.empty()) {
        Var rows = all_lat ? x : tape.gather_rows(x, lat_rows);
        Var ln = tape.layer_norm(rows, param(tape, ln_name("final_ln", "gen") + ".g"),
                                 param(tape, ln_name("final_ln", "gen") + ".b"));
        out.gen_velocity = tape.add_rowvec(tape.matmul(ln, param(tape, "gen.head.w")),
                                           param(tape, "gen.head.b"));
    }
    return out;
}

Tensor Backbone::forward_und(const std::vector<int>& tokens, const SegmentLayout& layout,
                             const KVCache* cache) {
    MixedInput in;
    in.tokens = tokens;
    Tape tape;
    TracedForward out = trace(tape, in, layout, cache);
    if (!out.und_logits.valid())
        throw std::invalid_argument("forward_und: layout has no discrete positions");
    if (!out.lat_positions.empty())
        throw std::invalid_argument("forward_und: layout has latent positions; use forward_gen or trace");
    return tape.val(out.und_logits);
}

Tensor Backbone::forward_gen(const LatentSequence& latents, double t,
                             const std::vector<int>& prompt_tokens, const SegmentLayout& layout,
                             const KVCache* cache) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("forward_gen: t outside [0,1]");
    MixedInput in;
    in.tokens = prompt_tokens;
    in.latents = latents;
    in.segment_times.assign(layout.segments.size(), t);
    Tape tape;
    TracedForward out = trace(tape, in, layout, cache);
    if (!out.gen_velocity.valid())
        throw std::invalid_argument("forward_gen: layout has no latent positions");
    return tape.val(out.gen_velocity);
}

KVCache Backbone::write_cache(const SegmentLayout& prefix_layout, const MixedInput& prefix_inputs) {
    for (const auto& s : prefix_layout.segments)
        if (s.active) throw std::invalid_argument("write_cache: prefix must not contain active segments");
    for (int id : prefix_inputs.tokens)
        if (id == cfg_.mask_id)
            throw std::invalid_argument("write_cache: MASK token in prefix (a masked position is not fixed)");

    KVCache cache;
    cache.prefix_layout = prefix_layout;
    cache.prefix_len = prefix_layout.total_len();
    cache.fingerprint = fingerprint_of(prefix_layout);
    cache.keys.resize(cfg_.n_layers);
    cache.values.resize(cfg_.n_layers);
    if (cache.prefix_len == 0) {
        for (int l = 0; l < cfg_.n_layers; ++l) {
            cache.keys[l] = Tensor::zeros({0, cfg_.d_model});
            cache.values[l] = Tensor::zeros({0, cfg_.d_model});
        }
        return cache;
    }
    std::vector<std::pair<Tensor, Tensor>> kv;
    Tape tape;
    trace_impl(tape, prefix_inputs, prefix_layout, nullptr, &kv);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        cache.keys[l] = std::move(kv[l].first);
        cache.values[l] = std::move(kv[l].second);
    }
    return cache;
}

KVCache Backbone::extend_cache(const KVCache& cache, const std::vector<Segment>& block_segments,
                               const MixedInput& block_inputs) {
    for (int id : block_inputs.tokens)
        if (id == cfg_.mask_id)
            throw std::invalid_argument("extend_cache: block still contains MASK tokens");

    KVCache out;
    out.prefix_layout = cache.prefix_layout;
    int block_len = 0;
    for (const auto& s : block_segments) block_len += s.length;
    if (block_len == 0) {
        out = cache;
        return out;
    }

    SegmentLayout combined = cache.prefix_layout;
    for (Segment s : block_segments) {
        s.active = true;
        combined.segments.push_back(s);
    }
    std::vector<std::pair<Tensor, Tensor>> kv;
    Tape tape;
    trace_impl(tape, block_inputs, combined, &cache, &kv);

    for (Segment s : block_segments) {
        s.active = false;
        out.prefix_layout.segments.push_back(s);
    }
    out.prefix_len = cache.prefix_len + block_len;
    out.fingerprint = fingerprint_of(out.prefix_layout);
    out.keys.resize(cfg_.n_layers);
    out.values.resize(cfg_.n_layers);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        Tensor k = Tensor::zeros({out.prefix_len, cfg_.d_model});
        Tensor v = Tensor::zeros({out.prefix_len, cfg_.d_model});
        auto append = [](Tensor& dst, const Tensor& head, const Tensor& tail) {
            if (!head.data.empty())
                std::memcpy(dst.data.data(), head.data.data(), head.data.size() * sizeof(double));
            if (!tail.data.empty())
                std::memcpy(dst.data.data() + head.data.size(), tail.data.data(),
                            tail.data.size() * sizeof(double));
        };
        append(k, cache.keys[l], kv[l].first);
        append(v, cache.values[l], kv[l].second);
        out.keys[l] = std::move(k);
        out.values[l] = std::move(v);
    }
    return out;
}

LogitsFn Backbone::logits_fn() {
    return [this](Tape& tape, const TokenSequence& xt, const SegmentLayout& layout) {
        MixedInput in;
        in.tokens = xt.ids;
        TracedForward out = trace(tape, in, layout, nullptr);
        if (!out.und_logits.valid()) throw std::invalid_argument("logits_fn: no discrete positions");
        return out.und_logits;
    };
}

VelocityFn Backbone::velocity_fn(std::vector<int> discrete_tokens) {
    return [this, tokens = std::move(discrete_tokens)](Tape& tape, const LatentSequence& vt,
                                                       const std::vector<double>& segment_times,
                                                       const SegmentLayout& layout) {
        MixedInput in;
        in.tokens = tokens;
        in.latents = vt;
        in.segment_times = segment_times;
        TracedForward out = trace(tape, in, layout, nullptr);
        if (!out.gen_velocity.valid()) throw std::invalid_argument("velocity_fn: no latent positions");
        return out.gen_velocity;
    };
}

VelocityField Backbone::velocity_field(const std::vector<int>& prompt_tokens,
                                       const SegmentLayout& prompt_layout, int n_lat_tokens,
                                       int sample_id, int turn_index) {
    MixedInput prefix_in;
    prefix_in.tokens = prompt_tokens;
    KVCache cache = write_cache(prompt_layout, prefix_in);

    SegmentLayout combined = prompt_layout;
    Segment lat;
    lat.modality = Modality::VIS_LAT;
    lat.role = Role::TARGET;
    lat.length = n_lat_tokens;
    lat.sample_id = sample_id;
    lat.turn_index = turn_index;
    lat.active = true;
    combined.segments.push_back(lat);

    return [this, cache = std::move(cache), combined](const Tensor& z, double t) {
        return forward_gen(z, t, {}, combined, &cache);
    };
}

// ---------------------------------------------------------------------------
// checkpoints

static void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
static void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
static uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
static uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

static const char kCkptMagic[8] = {'M', 'I', 'X', 'D', 'I', 'F', 'F', '1'};

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const std::vector<std::pair<std::string, const Tensor*>>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kCkptMagic, 8);
    write_u32(os, 1);  // version
    write_u64(os, cfg.digest());
    const std::string cfg_text = cfg.serialize();
    write_u32(os, static_cast<uint32_t>(cfg_text.size()));
    os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    write_u32(os, static_cast<uint32_t>(records.size()));
    for (const auto& [name, tensor] : records) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(tensor->shape.size()));
        for (int d : tensor->shape) write_u32(os, static_cast<uint32_t>(d));
        os.write(reinterpret_cast<const char*>(tensor->data.data()),
                 static_cast<std::streamsize>(tensor->data.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : records)
        if (n == name) return &t;
    return nullptr;
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t version = read_u32(is);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    uint64_t digest = read_u64(is);
    uint32_t cfg_len = read_u32(is);
    std::string cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), cfg_len);
    Checkpoint ckpt;
    ckpt.config = ModelConfig::deserialize(cfg_text);
    if (ckpt.config.digest() != digest) throw std::runtime_error("checkpoint: config digest mismatch");
    uint32_t n_records = read_u32(is);
    ckpt.records.reserve(n_records);
    for (uint32_t r = 0; r < n_records; ++r) {
        uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t ndim = read_u32(is);
        std::vector<int> shape(ndim);
        for (uint32_t i = 0; i < ndim; ++i) shape[i] = static_cast<int>(read_u32(is));
        Tensor t = Tensor::zeros(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated record " + name);
        ckpt.records.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

void save_model(const std::string& path, Backbone& model) {
    std::vector<std::pair<std::string, const Tensor*>> records;
    for (const auto& name : model.params().names())
        records.emplace_back(name, &model.params().at(name));
    save_checkpoint(path, model.config(), records);
}

Backbone load_model(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    Backbone model(ckpt.config);
    for (const auto& name : model.params().names()) {
        const Tensor* rec = ckpt.find(name);
        if (!rec) throw std::runtime_error("checkpoint: missing tensor " + name);
        Tensor& dst = model.params().at(name);
        if (rec->shape != dst.shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        dst = *rec;
    }
    return model;
}

}  // namespace mixdiff
