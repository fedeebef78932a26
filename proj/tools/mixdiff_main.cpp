// Command-line driver: corpus generation, training, evaluation, latent
// sampling, cache/threshold benchmarks and report assembly.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mixdiff/backbone.hpp"
#include "mixdiff/decode.hpp"
#include "mixdiff/synth.hpp"
#include "mixdiff/train.hpp"

using namespace mixdiff;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << text;
}

std::vector<UndSample> held_out_split(const WorldSpec& spec, int n, uint64_t seed) {
    Corpus c = make_corpus(spec, n, 0, 0, seed);
    return c.und;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale mixture-of-diffusion trainer and toolbox"};
    app.require_subcommand(1);

    // ---- gen-data
    auto* gen_data = app.add_subcommand("gen-data", "generate the synthetic corpus");
    std::string gd_out = "corpus";
    int gd_und = 50000, gd_gen = 50000, gd_inter = 10000;
    uint64_t gd_seed = 7;
    WorldSpec gd_spec;
    gen_data->add_option("--out", gd_out, "output directory");
    gen_data->add_option("--n-und", gd_und, "understanding samples");
    gen_data->add_option("--n-gen", gd_gen, "generation samples");
    gen_data->add_option("--n-inter", gd_inter, "interleaved samples");
    gen_data->add_option("--seed", gd_seed, "corpus seed");
    gen_data->add_option("--classes", gd_spec.n_classes, "number of image classes");
    gen_data->add_option("--questions", gd_spec.n_questions, "number of question kinds");
    gen_data->add_option("--vis-len", gd_spec.vis_len, "visual-encoder block length");
    gen_data->add_option("--lat-tokens", gd_spec.n_lat_tokens, "latent tokens per image");
    gen_data->add_option("--d-lat", gd_spec.d_lat, "latent dimension");
    gen_data->add_option("--sigma", gd_spec.sigma, "latent component sigma");

    // ---- train
    auto* train_cmd = app.add_subcommand("train", "train from a corpus");
    std::string tr_corpus = "corpus", tr_out = "model.ckpt", tr_metrics = "", tr_config = "",
                tr_resume = "";
    TrainConfig tr_cfg;
    int tr_steps = -1;
    bool tr_augment = false, tr_no_timing = false;
    train_cmd->add_option("--corpus", tr_corpus, "corpus directory");
    train_cmd->add_option("--out", tr_out, "checkpoint output path");
    train_cmd->add_option("--metrics", tr_metrics, "metrics stream path");
    train_cmd->add_option("--config", tr_config, "train config file (key=value)");
    train_cmd->add_option("--resume", tr_resume, "resume from checkpoint");
    train_cmd->add_option("--steps", tr_steps, "override step count");
    train_cmd->add_option("--lr", tr_cfg.lr, "learning rate");
    train_cmd->add_option("--batch-und", tr_cfg.batch_und, "understanding samples per step");
    train_cmd->add_option("--batch-gen", tr_cfg.batch_gen, "generation samples per step");
    train_cmd->add_option("--batch-inter", tr_cfg.batch_inter, "interleaved samples per step");
    train_cmd->add_option("--seed", tr_cfg.seed, "training seed");
    train_cmd->add_option("--pack-len", tr_cfg.pack_max_len, "packed sequence budget");
    train_cmd->add_option("--p-ext", tr_cfg.augment.p_ext, "EOS extension probability");
    train_cmd->add_option("--p-trunc", tr_cfg.augment.p_trunc, "truncation probability");
    train_cmd->add_flag("--augment", tr_augment, "enable adaptive length augmentation");
    train_cmd->add_flag("--no-timing", tr_no_timing, "omit wall-clock fields from metrics");

    // ---- eval-und
    auto* eval_cmd = app.add_subcommand("eval-und", "exact-match evaluation of decoded answers");
    std::string ev_ckpt = "model.ckpt", ev_corpus = "corpus", ev_metrics = "";
    int ev_n = 200, ev_block = 32, ev_max_blocks = 8;
    double ev_tau = 0.9;
    uint64_t ev_seed = 99;
    eval_cmd->add_option("--ckpt", ev_ckpt, "model checkpoint");
    eval_cmd->add_option("--corpus", ev_corpus, "corpus directory (for the world spec)");
    eval_cmd->add_option("--n", ev_n, "held-out sample count");
    eval_cmd->add_option("--eval-seed", ev_seed, "held-out split seed");
    eval_cmd->add_option("--block-len", ev_block, "decode block length");
    eval_cmd->add_option("--tau", ev_tau, "confidence threshold");
    eval_cmd->add_option("--max-blocks", ev_max_blocks, "decode block budget");
    eval_cmd->add_option("--metrics", ev_metrics, "append an eval record to this metrics file");

    // ---- sample-latent
    auto* sample_cmd = app.add_subcommand("sample-latent", "conditional latent generation");
    std::string sl_ckpt = "model.ckpt", sl_out = "latents.txt";
    int sl_class = 0, sl_n = 64, sl_steps = 50;
    uint64_t sl_seed = 11;
    sample_cmd->add_option("--ckpt", sl_ckpt, "model checkpoint");
    sample_cmd->add_option("--class", sl_class, "prompt class");
    sample_cmd->add_option("--n", sl_n, "number of samples");
    sample_cmd->add_option("--steps", sl_steps, "Euler steps");
    sample_cmd->add_option("--seed", sl_seed, "sampling seed");
    sample_cmd->add_option("--out", sl_out, "output text file (one sample per line)");

    // ---- bench-cache
    auto* bench_cmd = app.add_subcommand("bench-cache", "cached vs full-recompute decode timing");
    std::string bc_ckpt = "", bc_out = "cache_table.txt";
    std::string bc_prefixes = "0,64,256,512";
    int bc_block = 32, bc_blocks = 16;
    bench_cmd->add_option("--ckpt", bc_ckpt, "model checkpoint (fresh random model when omitted)");
    bench_cmd->add_option("--prefixes", bc_prefixes, "comma-separated prefix lengths");
    bench_cmd->add_option("--block", bc_block, "decode block length");
    bench_cmd->add_option("--blocks", bc_blocks, "blocks per decode");
    bench_cmd->add_option("--out", bc_out, "output table path");

    // ---- bench-threshold
    auto* thr_cmd = app.add_subcommand("bench-threshold", "confidence-threshold sweep");
    std::string th_ckpt = "model.ckpt", th_corpus = "corpus", th_out = "threshold_table.txt";
    std::string th_taus = "0.2,0.4,0.6,0.8,0.9,1.0";
    int th_n = 100, th_block = 32, th_max_blocks = 8;
    uint64_t th_seed = 99;
    thr_cmd->add_option("--ckpt", th_ckpt, "model checkpoint");
    thr_cmd->add_option("--corpus", th_corpus, "corpus directory");
    thr_cmd->add_option("--taus", th_taus, "comma-separated thresholds");
    thr_cmd->add_option("--n", th_n, "workload size");
    thr_cmd->add_option("--eval-seed", th_seed, "workload split seed");
    thr_cmd->add_option("--block-len", th_block, "decode block length");
    thr_cmd->add_option("--max-blocks", th_max_blocks, "decode block budget");
    thr_cmd->add_option("--out", th_out, "output table path");

    // ---- report
    auto* rep_cmd = app.add_subcommand("report", "summarize metrics and benchmark tables");
    std::vector<std::string> rp_metrics;
    std::string rp_threshold = "", rp_cache = "", rp_plot = "", rp_out = "";
    rep_cmd->add_option("--metrics", rp_metrics, "metrics files");
    rep_cmd->add_option("--threshold-table", rp_threshold, "threshold sweep table");
    rep_cmd->add_option("--cache-table", rp_cache, "cache bench table");
    rep_cmd->add_option("--plot-prefix", rp_plot, "prefix for tab-separated plot data");
    rep_cmd->add_option("--out", rp_out, "write the summary here instead of stdout");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen_data) {
            gd_spec.validate();
            Corpus c = make_corpus(gd_spec, gd_und, gd_gen, gd_inter, gd_seed);
            save_corpus(c, gd_out);
            std::printf("wrote %zu und / %zu gen / %zu interleaved samples to %s\n", c.und.size(),
                        c.gen.size(), c.inter.size(), gd_out.c_str());
        } else if (*train_cmd) {
            // a config file replaces the flag defaults; --steps/--augment/--no-timing
            // still override afterwards
            if (!tr_config.empty()) tr_cfg = TrainConfig::deserialize(read_file(tr_config));
            if (tr_steps >= 0) tr_cfg.steps = tr_steps;
            if (tr_augment) tr_cfg.augment_enabled = true;
            if (tr_no_timing) tr_cfg.log_timing = false;

            Corpus corpus = load_corpus(tr_corpus);
            ModelConfig mc;
            mc.vocab_size = corpus.spec.vocab_size;
            mc.mask_id = corpus.spec.mask_id;
            mc.eos_id = corpus.spec.eos_id;
            mc.latent_dim = corpus.spec.d_lat;
            Backbone model = tr_resume.empty() ? Backbone(mc) : load_model(tr_resume);
            Trainer trainer(model, corpus, tr_cfg);
            if (!tr_resume.empty()) trainer.load(tr_resume);

            MetricsWriter metrics;
            if (!tr_metrics.empty()) metrics.open(tr_metrics, tr_cfg.log_timing);
            TrainResult r = trainer.run(tr_cfg.steps, tr_metrics.empty() ? nullptr : &metrics);
            trainer.save(tr_out);
            std::printf("trained %d steps (final loss %.6f)%s; checkpoint at %s\n", r.steps_done,
                        r.last_loss, r.diverged ? " [diverged, last good step kept]" : "",
                        tr_out.c_str());
            if (r.diverged) return 2;
        } else if (*eval_cmd) {
            Backbone model = load_model(ev_ckpt);
            Corpus corpus = load_corpus(ev_corpus);
            auto split = held_out_split(corpus.spec, ev_n, ev_seed);
            DecodeConfig cfg;
            cfg.block_len = ev_block;
            cfg.tau = ev_tau;
            cfg.max_blocks = ev_max_blocks;
            EvalResult r = eval_und(model, split, cfg);
            std::printf("eval-und: accuracy %.4f mean_len %.2f n %d passes %lld wall %.2fs\n",
                        r.accuracy, r.mean_len, r.n, static_cast<long long>(r.forward_passes),
                        r.wall_s);
            if (!ev_metrics.empty()) {
                std::ofstream os(ev_metrics, std::ios::app);
                char buf[256];
                std::snprintf(buf, sizeof(buf),
                              "step=0 kind=eval accuracy=%.6f mean_len=%.3f block_len=%d tau=%.3f\n",
                              r.accuracy, r.mean_len, ev_block, ev_tau);
                os << buf;
            }
        } else if (*sample_cmd) {
            Backbone model = load_model(sl_ckpt);
            WorldSpec spec;  // only token conventions are needed for the prompt
            spec.vocab_size = model.config().vocab_size;
            spec.mask_id = model.config().mask_id;
            spec.eos_id = model.config().eos_id;
            spec.d_lat = model.config().latent_dim;
            SegmentLayout prompt_layout;
            prompt_layout.segments.push_back({Modality::TEXT, Role::PROMPT, 1, 0, 0, false});
            VelocityField field = model.velocity_field({spec.class_token(sl_class)}, prompt_layout,
                                                       spec.n_lat_tokens);
            EulerPlan plan = EulerPlan::uniform(sl_steps);
            Rng rng(sl_seed);
            std::ofstream os(sl_out, std::ios::trunc);
            char buf[64];
            for (int i = 0; i < sl_n; ++i) {
                Tensor z = euler_sample(field, spec.n_lat_tokens, model.config().latent_dim, plan, rng);
                for (size_t j = 0; j < z.data.size(); ++j) {
                    std::snprintf(buf, sizeof(buf), "%.17g", z.data[j]);
                    os << (j ? " " : "") << buf;
                }
                os << "\n";
            }
            std::printf("wrote %d samples for class %d to %s\n", sl_n, sl_class, sl_out.c_str());
        } else if (*bench_cmd) {
            ModelConfig mc;
            Backbone model = bc_ckpt.empty() ? Backbone(mc) : load_model(bc_ckpt);
            std::vector<int> prefixes;
            std::istringstream ps(bc_prefixes);
            std::string tok;
            while (std::getline(ps, tok, ',')) prefixes.push_back(std::stoi(tok));
            auto rows = bench_cache(model, prefixes, bc_block, bc_blocks);
            write_file(bc_out, format_cache_table(rows));
            std::fputs(format_cache_table(rows).c_str(), stdout);
        } else if (*thr_cmd) {
            Backbone model = load_model(th_ckpt);
            Corpus corpus = load_corpus(th_corpus);
            auto split = held_out_split(corpus.spec, th_n, th_seed);
            std::vector<DecodeWorkItem> workload;
            workload.reserve(split.size());
            for (const auto& s : split) workload.push_back(work_item_from(s));
            std::vector<double> taus;
            std::istringstream ts(th_taus);
            std::string tok;
            while (std::getline(ts, tok, ',')) taus.push_back(std::stod(tok));
            DecodeConfig base;
            base.block_len = th_block;
            base.max_blocks = th_max_blocks;
            auto rows = throughput_probe(model, workload, taus, base);
            write_file(th_out, format_probe_table(rows));
            std::fputs(format_probe_table(rows).c_str(), stdout);
        } else if (*rep_cmd) {
            std::string text = report(rp_metrics, rp_threshold, rp_cache, rp_plot);
            if (rp_out.empty()) std::fputs(text.c_str(), stdout);
            else write_file(rp_out, text);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
