#include "mixdiff/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mixdiff {

// ---------------------------------------------------------------------------
// config

void TrainConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("train: steps must be >= 0");
    if (lr <= 0.0) throw std::invalid_argument("train: lr must be positive");
    if (batch_und < 0 || batch_gen < 0 || batch_inter < 0)
        throw std::invalid_argument("train: batch sizes must be >= 0");
    if (batch_und + batch_gen + batch_inter == 0)
        throw std::invalid_argument("train: at least one batch size must be positive");
    if (w_und < 0.0 || w_gen < 0.0 || w_inter < 0.0)
        throw std::invalid_argument("train: loss weights must be >= 0");
    if (w_und + w_gen + w_inter <= 0.0)
        throw std::invalid_argument("train: at least one loss weight must be positive");
    if (pack_max_len < 8) throw std::invalid_argument("train: pack_max_len too small");
    if (t_floor <= 0.0 || t_floor >= 1.0) throw std::invalid_argument("train: t_floor must be in (0,1)");
    if (rms_beta <= 0.0 || rms_beta >= 1.0) throw std::invalid_argument("train: rms_beta must be in (0,1)");
    augment.validate();
}

std::string TrainConfig::serialize() const {
    char buf[64];
    std::ostringstream os;
    os << "format=mixdiff-train-config-v1\n";
    os << "steps=" << steps << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", lr);
    os << "lr=" << buf << "\n";
    os << "batch_und=" << batch_und << "\n";
    os << "batch_gen=" << batch_gen << "\n";
    os << "batch_inter=" << batch_inter << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", w_und);
    os << "w_und=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", w_gen);
    os << "w_gen=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", w_inter);
    os << "w_inter=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", augment.p_ext);
    os << "p_ext=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", augment.p_trunc);
    os << "p_trunc=" << buf << "\n";
    os << "min_trunc_len=" << augment.min_trunc_len << "\n";
    os << "augment_enabled=" << (augment_enabled ? 1 : 0) << "\n";
    os << "pack_max_len=" << pack_max_len << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", t_floor);
    os << "t_floor=" << buf << "\n";
    os << "t_sampling=" << (t_sampling == TSampling::LOG_UNIFORM ? "log_uniform" : "uniform") << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", rms_beta);
    os << "rms_beta=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", rms_eps);
    os << "rms_eps=" << buf << "\n";
    os << "seed=" << seed << "\n";
    os << "log_every=" << log_every << "\n";
    os << "log_timing=" << (log_timing ? 1 : 0) << "\n";
    return os.str();
}

TrainConfig TrainConfig::deserialize(const std::string& text) {
    TrainConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("train config: bad line " + line);
        std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "format") {
            if (value != "mixdiff-train-config-v1")
                throw std::invalid_argument("train config: unsupported format " + value);
        } else if (key == "steps") c.steps = std::stoi(value);
        else if (key == "lr") c.lr = std::stod(value);
        else if (key == "batch_und") c.batch_und = std::stoi(value);
        else if (key == "batch_gen") c.batch_gen = std::stoi(value);
        else if (key == "batch_inter") c.batch_inter = std::stoi(value);
        else if (key == "w_und") c.w_und = std::stod(value);
        else if (key == "w_gen") c.w_gen = std::stod(value);
        else if (key == "w_inter") c.w_inter = std::stod(value);
        else if (key == "p_ext") c.augment.p_ext = std::stod(value);
        else if (key == "p_trunc") c.augment.p_trunc = std::stod(value);
        else if (key == "min_trunc_len") c.augment.min_trunc_len = std::stoi(value);
        else if (key == "augment_enabled") c.augment_enabled = std::stoi(value) != 0;
        else if (key == "pack_max_len") c.pack_max_len = std::stoi(value);
        else if (key == "t_floor") c.t_floor = std::stod(value);
        else if (key == "t_sampling") {
            if (value == "log_uniform") c.t_sampling = TSampling::LOG_UNIFORM;
            else if (value == "uniform") c.t_sampling = TSampling::UNIFORM;
            else throw std::invalid_argument("train config: unknown t_sampling " + value);
        }
        else if (key == "rms_beta") c.rms_beta = std::stod(value);
        else if (key == "rms_eps") c.rms_eps = std::stod(value);
        else if (key == "seed") c.seed = std::stoull(value);
        else if (key == "log_every") c.log_every = std::stoi(value);
        else if (key == "log_timing") c.log_timing = std::stoi(value) != 0;
        else throw std::invalid_argument("train config: unknown key " + key);
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// metrics

void MetricsWriter::open(const std::string& path, bool log_timing) {
    log_timing_ = log_timing;
    os_.open(path, std::ios::trunc);
    if (!os_) throw std::runtime_error("metrics: cannot open " + path);
    os_ << "# mixdiff-metrics-v1\n";
}

void MetricsWriter::write_train(const StepMetrics& m) {
    if (!os_.is_open()) return;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "step=%d kind=train loss=%.12g loss_und=%.12g loss_gen=%.12g loss_inter=%.12g",
                  m.step, m.loss, m.loss_und, m.loss_gen, m.loss_inter);
    os_ << buf;
    if (log_timing_) {
        std::snprintf(buf, sizeof(buf), " wall_ms=%.3f", m.wall_ms);
        os_ << buf;
    }
    os_ << "\n";
    os_.flush();
}

void MetricsWriter::write_eval(int step, double accuracy, double mean_len, int block_len, double tau) {
    if (!os_.is_open()) return;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "step=%d kind=eval accuracy=%.6f mean_len=%.3f block_len=%d tau=%.3f\n",
                  step, accuracy, mean_len, block_len, tau);
    os_ << buf;
    os_.flush();
}

// ---------------------------------------------------------------------------
// trainer

Trainer::Trainer(Backbone& model, const Corpus& corpus, TrainConfig cfg)
    : model_(model), corpus_(corpus), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.batch_und > 0 && corpus_.und.empty())
        throw std::invalid_argument("train: batch_und > 0 but corpus has no und samples");
    if (cfg_.batch_gen > 0 && corpus_.gen.empty())
        throw std::invalid_argument("train: batch_gen > 0 but corpus has no gen samples");
    if (cfg_.batch_inter > 0 && corpus_.inter.empty())
        throw std::invalid_argument("train: batch_inter > 0 but corpus has no interleaved samples");
    if (corpus_.spec.vocab_size != model_.config().vocab_size ||
        corpus_.spec.mask_id != model_.config().mask_id ||
        corpus_.spec.eos_id != model_.config().eos_id ||
        corpus_.spec.d_lat != model_.config().latent_dim)
        throw std::invalid_argument("train: corpus spec incompatible with model config");
    for (const auto& name : model_.params().names())
        opt_v_.add(name, Tensor::zeros(model_.params().at(name).shape));
}

namespace {

struct UndPackData {
    SegmentLayout layout;
    TokenSequence x0;
    MdmDraw draw;
};

struct LatPackData {
    SegmentLayout layout;
    std::vector<int> tokens;
    Tensor data;
    Tensor noise;
    std::vector<double> seg_times;
    LossMode mode = LossMode::GEN;
};

void append_rows(Tensor& dst, const Tensor& src) {
    if (dst.shape.empty() || dst.rows() == 0) {
        dst = src;
        return;
    }
    if (dst.cols() != src.cols()) throw std::invalid_argument("pack: latent width mismatch");
    dst.data.insert(dst.data.end(), src.data.begin(), src.data.end());
    dst.shape[0] += src.rows();
}

}  // namespace

StepMetrics Trainer::train_step() {
    const auto t_start = std::chrono::steady_clock::now();
    const MaskSchedule schedule = MaskSchedule::linear();
    const int mask_id = model_.config().mask_id;
    const int eos_id = model_.config().eos_id;
    Rng step_rng(hash_combine(cfg_.seed, 0x57455054ULL, static_cast<uint64_t>(step_)));

    // --- assemble packed und batches
    std::vector<UndPackData> und_packs;
    {
        UndPackData cur;
        int slot = 0;
        for (int b = 0; b < cfg_.batch_und; ++b, ++slot) {
            const auto& sample = corpus_.und[step_rng.below(static_cast<int64_t>(corpus_.und.size()))];
            Rng srng = step_rng.fork(0x100 + slot);
            TokenSequence resp{sample.response, mask_id, eos_id};
            if (cfg_.augment_enabled) resp = augment(resp, cfg_.augment, srng);

            SegmentLayout sl;
            sl.segments.push_back({Modality::VIS_ENC, Role::CONDITION,
                                   static_cast<int>(sample.vis_tokens.size()), slot, 0, false});
            sl.segments.push_back({Modality::TEXT, Role::PROMPT,
                                   static_cast<int>(sample.prompt.size()), slot, 0, false});
            sl.segments.push_back({Modality::TEXT, Role::RESPONSE, resp.size(), slot, 0, false});
            const int len = sl.total_len();
            MdmDraw draw = sample_mdm_draw(len, sl, schedule, cfg_.t_floor, srng, cfg_.t_sampling);

            if (cur.layout.total_len() > 0 && cur.layout.total_len() + len > cfg_.pack_max_len) {
                und_packs.push_back(std::move(cur));
                cur = UndPackData{};
            }
            for (const auto& s : sl.segments) cur.layout.segments.push_back(s);
            cur.x0.mask_id = mask_id;
            cur.x0.eos_id = eos_id;
            auto toks = sample.vis_tokens;
            toks.insert(toks.end(), sample.prompt.begin(), sample.prompt.end());
            toks.insert(toks.end(), resp.ids.begin(), resp.ids.end());
            cur.x0.ids.insert(cur.x0.ids.end(), toks.begin(), toks.end());
            cur.draw = cur.draw.kept.empty() ? draw : cur.draw.concat(draw);
        }
        if (cur.layout.total_len() > 0) und_packs.push_back(std::move(cur));
    }

    // --- assemble packed latent batches (gen and interleaved)
    std::vector<LatPackData> lat_packs;
    auto pack_latents = [&](int count, bool interleaved, uint64_t salt) {
        LatPackData cur;
        cur.mode = interleaved ? LossMode::INTERLEAVED : LossMode::GEN;
        for (int b = 0; b < count; ++b) {
            Rng srng = step_rng.fork(salt + b);
            SegmentLayout sl;
            std::vector<int> toks;
            Tensor data;
            if (interleaved) {
                const auto& s = corpus_.inter[step_rng.below(static_cast<int64_t>(corpus_.inter.size()))];
                sl = s.layout(corpus_.spec.n_lat_tokens, b);
                toks = s.tokens;
                data = s.latents;
            } else {
                const auto& s = corpus_.gen[step_rng.below(static_cast<int64_t>(corpus_.gen.size()))];
                sl = s.layout(b);
                toks = s.prompt;
                data = s.latent;
            }
            RfDraw draw = sample_rf_draw(data.rows(), data.cols(), srng);
            if (cur.layout.total_len() > 0 && cur.layout.total_len() + sl.total_len() > cfg_.pack_max_len) {
                lat_packs.push_back(std::move(cur));
                cur = LatPackData{};
                cur.mode = interleaved ? LossMode::INTERLEAVED : LossMode::GEN;
            }
            for (const auto& s : sl.segments) cur.layout.segments.push_back(s);
            cur.tokens.insert(cur.tokens.end(), toks.begin(), toks.end());
            append_rows(cur.data, data);
            append_rows(cur.noise, draw.noise);
            cur.seg_times.insert(cur.seg_times.end(), sl.segments.size(), draw.t);
        }
        if (cur.layout.total_len() > 0) lat_packs.push_back(std::move(cur));
    };
    pack_latents(cfg_.batch_gen, false, 0x200);
    pack_latents(cfg_.batch_inter, true, 0x300);

    // fix pack-local sample ids so packs stay isolated and contiguous
    for (auto& p : und_packs) {
        int sid = -1, next = -1;
        for (auto& s : p.layout.segments) {
            if (s.sample_id != sid) {
                sid = s.sample_id;
                ++next;
            }
            s.sample_id = next;
        }
    }
    for (auto& p : lat_packs) {
        int sid = -1, next = -1;
        for (auto& s : p.layout.segments) {
            if (s.sample_id != sid) {
                sid = s.sample_id;
                ++next;
            }
            s.sample_id = next;
        }
    }

    // --- forward/backward, one tape per pack
    const double und_scale = cfg_.batch_und > 0 ? cfg_.w_und / cfg_.batch_und : 0.0;
    const double gen_scale = cfg_.batch_gen > 0 ? cfg_.w_gen / cfg_.batch_gen : 0.0;
    const double inter_scale = cfg_.batch_inter > 0 ? cfg_.w_inter / cfg_.batch_inter : 0.0;

    std::vector<std::function<PackResult()>> tasks;
    for (auto& p : und_packs) {
        tasks.push_back([this, p = std::move(p), und_scale]() {
            Tape tape;
            Var raw = mdm_loss_traced(tape, p.x0, p.layout, model_.logits_fn(), p.draw);
            Var scaled = tape.scale(raw, und_scale);
            PackResult r;
            r.kind = 0;
            r.loss_raw = tape.val(raw).item();
            r.loss_scaled = tape.val(scaled).item();
            r.grads = tape.backward(scaled);
            return r;
        });
    }
    for (auto& p : lat_packs) {
        const double scale = p.mode == LossMode::GEN ? gen_scale : inter_scale;
        tasks.push_back([this, p = std::move(p), scale]() {
            Tape tape;
            VelocityFn fn = model_.velocity_fn(p.tokens);
            Var raw = rf_loss_traced(tape, p.data, p.layout, fn, p.noise, p.seg_times, p.mode);
            Var scaled = tape.scale(raw, scale);
            PackResult r;
            r.kind = p.mode == LossMode::GEN ? 1 : 2;
            r.loss_raw = tape.val(raw).item();
            r.loss_scaled = tape.val(scaled).item();
            r.grads = tape.backward(scaled);
            return r;
        });
    }

    std::vector<PackResult> results(tasks.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int i = 0; i < static_cast<int>(tasks.size()); ++i) results[i] = tasks[i]();

    // deterministic accumulation in pack order
    StepMetrics m;
    m.step = step_ + 1;
    GradMap merged;
    for (auto& r : results) {
        m.loss += r.loss_scaled;
        if (r.kind == 0) m.loss_und += r.loss_raw;
        if (r.kind == 1) m.loss_gen += r.loss_raw;
        if (r.kind == 2) m.loss_inter += r.loss_raw;
        for (auto& [p, g] : r.grads) {
            auto it = merged.find(p);
            if (it == merged.end()) {
                merged.emplace(p, std::move(g));
            } else {
                for (size_t j = 0; j < g.data.size(); ++j) it->second.data[j] += g.data[j];
            }
        }
    }
    if (cfg_.batch_und > 0) m.loss_und /= cfg_.batch_und;
    if (cfg_.batch_gen > 0) m.loss_gen /= cfg_.batch_gen;
    if (cfg_.batch_inter > 0) m.loss_inter /= cfg_.batch_inter;

    if (!std::isfinite(m.loss)) {  // divergence: leave parameters at the last good step
        m.loss = std::nan("");
        return m;
    }

    // adaptive update: per-coordinate second-moment scaling, bias-corrected
    ++step_;
    const double beta = cfg_.rms_beta;
    const double bias_corr = 1.0 - std::pow(beta, step_);
    for (const auto& name : model_.params().names()) {
        Tensor& p = model_.params().at(name);
        Tensor& v = opt_v_.at(name);
        const Tensor* g = nullptr;
        auto it = merged.find(&p);
        if (it != merged.end()) g = &it->second;
        for (size_t e = 0; e < p.data.size(); ++e) {
            const double gi = g ? g->data[e] : 0.0;
            v.data[e] = beta * v.data[e] + (1.0 - beta) * gi * gi;
            const double vhat = v.data[e] / bias_corr;
            p.data[e] -= cfg_.lr * gi / (std::sqrt(vhat) + cfg_.rms_eps);
        }
    }

    const auto t_end = std::chrono::steady_clock::now();
    m.wall_ms = std::chrono::duration<double, std::milli>(t_end - t_start).count();
    return m;
}

TrainResult Trainer::run(int n_steps, MetricsWriter* metrics) {
    TrainResult result;
    for (int i = 0; i < n_steps; ++i) {
        StepMetrics m = train_step();
        if (!std::isfinite(m.loss)) {
            result.diverged = true;
            break;
        }
        result.last_loss = m.loss;
        ++result.steps_done;
        if (metrics && (step_ % cfg_.log_every == 0 || i + 1 == n_steps)) metrics->write_train(m);
    }
    return result;
}

void Trainer::save(const std::string& path) {
    std::vector<std::pair<std::string, const Tensor*>> records;
    for (const auto& name : model_.params().names())
        records.emplace_back(name, &model_.params().at(name));
    Tensor step_t = Tensor::scalar(static_cast<double>(step_));
    for (const auto& name : model_.params().names())
        records.emplace_back("opt.v." + name, &opt_v_.at(name));
    records.emplace_back("opt.step", &step_t);
    save_checkpoint(path, model_.config(), records);
}

void Trainer::load(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.config.digest() != model_.config().digest())
        throw std::runtime_error("train: checkpoint config does not match the model");
    for (const auto& name : model_.params().names()) {
        const Tensor* rec = ckpt.find(name);
        if (!rec) throw std::runtime_error("train: checkpoint missing tensor " + name);
        model_.params().at(name) = *rec;
        const Tensor* vrec = ckpt.find("opt.v." + name);
        if (!vrec) throw std::runtime_error("train: checkpoint missing optimizer state for " + name);
        opt_v_.at(name) = *vrec;
    }
    const Tensor* st = ckpt.find("opt.step");
    if (!st) throw std::runtime_error("train: checkpoint missing opt.step");
    step_ = static_cast<int>(st->item());
}

// ---------------------------------------------------------------------------
// evaluation and benchmarks

DecodeWorkItem work_item_from(const UndSample& sample) {
    DecodeWorkItem item;
    item.prefix_layout.segments.push_back(
        {Modality::VIS_ENC, Role::CONDITION, static_cast<int>(sample.vis_tokens.size()), 0, 0, false});
    item.prefix_layout.segments.push_back(
        {Modality::TEXT, Role::PROMPT, static_cast<int>(sample.prompt.size()), 0, 0, false});
    item.prefix_inputs.tokens = sample.vis_tokens;
    item.prefix_inputs.tokens.insert(item.prefix_inputs.tokens.end(), sample.prompt.begin(),
                                     sample.prompt.end());
    item.expected = sample.response;
    return item;
}

EvalResult eval_und(DecodeModel& model, const std::vector<UndSample>& split, const DecodeConfig& cfg) {
    EvalResult r;
    r.n = static_cast<int>(split.size());
    int exact = 0;
    int64_t len_sum = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& sample : split) {
        DecodeWorkItem item = work_item_from(sample);
        KVCache cache = model.write_cache(item.prefix_layout, item.prefix_inputs);
        DecodeResult d = decode(model, cache, cfg);
        if (d.tokens == item.expected) ++exact;
        len_sum += static_cast<int64_t>(d.tokens.size());
        r.forward_passes += d.forward_passes;
        r.tokens += static_cast<int64_t>(d.tokens.size());
    }
    const auto t1 = std::chrono::steady_clock::now();
    r.wall_s = std::chrono::duration<double>(t1 - t0).count();
    if (r.n > 0) {
        r.accuracy = static_cast<double>(exact) / r.n;
        r.mean_len = static_cast<double>(len_sum) / r.n;
    }
    return r;
}

std::vector<CacheBenchRow> bench_cache(Backbone& model, const std::vector<int>& prefix_lens,
                                       int block_len, int n_blocks) {
    std::vector<CacheBenchRow> rows;
    const int content_tokens = 48;
    for (int P : prefix_lens) {
        SegmentLayout prefix_layout;
        MixedInput prefix_inputs;
        if (P > 0) {
            prefix_layout.segments.push_back({Modality::TEXT, Role::PROMPT, P, 0, 0, false});
            prefix_inputs.tokens.resize(P);
            for (int i = 0; i < P; ++i) prefix_inputs.tokens[i] = (i * 7 + 3) % content_tokens;
        }
        DecodeConfig cfg;
        cfg.block_len = block_len;
        cfg.tau = 1.0;  // nothing clears the threshold, so exactly one commit per pass
        cfg.max_blocks = n_blocks;

        CacheBenchRow row;
        row.prefix_len = P;

        model.reset_positions_computed();
        auto t0 = std::chrono::steady_clock::now();
        KVCache cache = model.write_cache(prefix_layout, prefix_inputs);
        DecodeResult cached = decode(model, cache, cfg);
        auto t1 = std::chrono::steady_clock::now();
        row.pos_cached = model.positions_computed();
        row.secs_cached = std::chrono::duration<double>(t1 - t0).count();

        model.reset_positions_computed();
        auto t2 = std::chrono::steady_clock::now();
        DecodeResult full = decode_full_recompute(model, prefix_layout, prefix_inputs, cfg);
        auto t3 = std::chrono::steady_clock::now();
        row.pos_uncached = model.positions_computed();
        row.secs_uncached = std::chrono::duration<double>(t3 - t2).count();

        if (cached.tokens != full.tokens)
            throw std::runtime_error("bench_cache: cached and uncached decodes disagree");

        // analytic cost model: every used block takes block_len passes; the
        // uncached pass recomputes prefix + completed + active, the cached one
        // only the active block, plus the initial write and per-block extends.
        const int64_t B = cached.blocks_used;
        const int64_t L = block_len;
        int64_t analytic_unc = 0;
        for (int64_t b = 0; b < B; ++b) analytic_unc += L * (P + (b + 1) * L);
        const int64_t analytic_cached = P + B * L * L + (B - 1) * L;
        row.pos_ratio = static_cast<double>(row.pos_uncached) / static_cast<double>(row.pos_cached);
        row.analytic_ratio = static_cast<double>(analytic_unc) / static_cast<double>(analytic_cached);
        row.speedup = row.secs_cached > 0.0 ? row.secs_uncached / row.secs_cached : 0.0;
        rows.push_back(row);
    }
    return rows;
}

std::string format_cache_table(const std::vector<CacheBenchRow>& rows) {
    std::ostringstream os;
    os << "# mixdiff-cache-table-v1\n";
    os << "# prefix_len secs_uncached secs_cached speedup pos_uncached pos_cached pos_ratio analytic_ratio\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d %.6f %.6f %.3f %lld %lld %.4f %.4f\n", r.prefix_len,
                      r.secs_uncached, r.secs_cached, r.speedup,
                      static_cast<long long>(r.pos_uncached), static_cast<long long>(r.pos_cached),
                      r.pos_ratio, r.analytic_ratio);
        os << buf;
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// report

namespace {

std::map<std::string, std::string> parse_kv_line(const std::string& line) {
    std::map<std::string, std::string> out;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
        auto eq = tok.find('=');
        if (eq != std::string::npos) out[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    return out;
}

}  // namespace

std::string report(const std::vector<std::string>& metrics_files,
                   const std::string& threshold_table_file, const std::string& cache_table_file,
                   const std::string& plot_prefix) {
    std::ostringstream os;

    for (const auto& path : metrics_files) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("report: cannot open " + path);
        std::string line;
        std::vector<std::map<std::string, std::string>> train_recs, eval_recs;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            auto kv = parse_kv_line(line);
            if (kv["kind"] == "train") train_recs.push_back(kv);
            else if (kv["kind"] == "eval") eval_recs.push_back(kv);
        }
        if (train_recs.empty() && eval_recs.empty()) continue;
        os << "== " << path << " ==\n";
        if (!train_recs.empty()) {
            const auto& last = train_recs.back();
            os << "train: " << train_recs.size() << " records, final step " << last.at("step")
               << ", loss " << last.at("loss") << " (und " << last.at("loss_und") << ", gen "
               << last.at("loss_gen") << ", inter " << last.at("loss_inter") << ")\n";
        }
        for (const auto& e : eval_recs)
            os << "eval: step " << e.at("step") << " accuracy " << e.at("accuracy") << " mean_len "
               << e.at("mean_len") << " block_len " << e.at("block_len") << " tau " << e.at("tau")
               << "\n";
        if (!plot_prefix.empty() && !train_recs.empty()) {
            std::ofstream plot(plot_prefix + ".loss.tsv", std::ios::trunc);
            plot << "step\tloss\tloss_und\tloss_gen\tloss_inter\n";
            for (const auto& r : train_recs)
                plot << r.at("step") << "\t" << r.at("loss") << "\t" << r.at("loss_und") << "\t"
                     << r.at("loss_gen") << "\t" << r.at("loss_inter") << "\n";
        }
    }

    if (!threshold_table_file.empty()) {
        std::ifstream is(threshold_table_file);
        if (!is) throw std::runtime_error("report: cannot open " + threshold_table_file);
        std::string line;
        std::vector<std::vector<double>> rows;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::istringstream ls(line);
            std::vector<double> row;
            double x;
            while (ls >> x) row.push_back(x);
            if (row.size() >= 5) rows.push_back(row);
        }
        if (!rows.empty()) {
            os << "== threshold sweep ==\n";
            char buf[64];
            auto print_row = [&](const char* label, int idx, double mult, const char* fmt) {
                os << label;
                for (const auto& r : rows) {
                    std::snprintf(buf, sizeof(buf), fmt, r[idx] * mult);
                    os << " " << buf;
                }
                os << "\n";
            };
            print_row("confidence threshold  |", 0, 1.0, "%8.2f");
            print_row("accuracy (%)          |", 4, 100.0, "%8.1f");
            print_row("throughput (tokens/s) |", 1, 1.0, "%8.1f");
            print_row("passes per token      |", 2, 1.0, "%8.3f");
            print_row("mean length           |", 3, 1.0, "%8.1f");
            if (!plot_prefix.empty()) {
                std::ofstream plot(plot_prefix + ".threshold.tsv", std::ios::trunc);
                plot << "tau\ttokens_per_s\tpasses_per_token\tmean_len\taccuracy\n";
                for (const auto& r : rows)
                    plot << r[0] << "\t" << r[1] << "\t" << r[2] << "\t" << r[3] << "\t" << r[4] << "\n";
            }
        }
    }

    if (!cache_table_file.empty()) {
        std::ifstream is(cache_table_file);
        if (!is) throw std::runtime_error("report: cannot open " + cache_table_file);
        std::string line;
        std::vector<std::vector<double>> rows;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::istringstream ls(line);
            std::vector<double> row;
            double x;
            while (ls >> x) row.push_back(x);
            if (row.size() >= 8) rows.push_back(row);
        }
        if (!rows.empty()) {
            os << "== cache speedup ==\n";
            char buf[160];
            for (const auto& r : rows) {
                std::snprintf(buf, sizeof(buf),
                              "prefix %5d: %.2fx wall speedup (%.4fs vs %.4fs), recompute ratio %.2f (model %.2f)\n",
                              static_cast<int>(r[0]), r[3], r[1], r[2], r[6], r[7]);
                os << buf;
            }
            if (!plot_prefix.empty()) {
                std::ofstream plot(plot_prefix + ".cache.tsv", std::ios::trunc);
                plot << "prefix_len\tspeedup\tpos_ratio\tanalytic_ratio\n";
                for (const auto& r : rows)
                    plot << static_cast<int>(r[0]) << "\t" << r[3] << "\t" << r[6] << "\t" << r[7] << "\n";
            }
        }
    }
    return os.str();
}

}  // namespace mixdiff
