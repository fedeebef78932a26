#include <doctest.h>

#include <stdexcept>

#include <array>
#include <cmath>
#include <functional>
#include <map>

#include "mixdiff/backbone.hpp"
#include "mixdiff/masked_diffusion.hpp"

using namespace mixdiff;

namespace {

constexpr int kV = 3;
constexpr int kMask = 3;  // one past the vocabulary for the toy chain

using ToyState = std::array<int, 2>;
using PredictorFn = std::function<Tensor(const ToyState&)>;  // -> logits [2 x 3]

// Exhaustive enumeration of the reverse dynamics over all (state, step)
// paths: the independent oracle for the sampler.
std::map<ToyState, double> enumerate_chain(const PredictorFn& predictor,
                                           const std::vector<double>& grid,
                                           const MaskSchedule& sched) {
    std::map<ToyState, double> dist;
    dist[{kMask, kMask}] = 1.0;
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        const double at = sched.alpha(grid[k]);
        const double as = sched.alpha(grid[k + 1]);
        const double p_stay = (1.0 - as) / (1.0 - at);
        std::map<ToyState, double> next;
        for (const auto& [state, p] : dist) {
            Tensor logits = predictor(state);
            // per-position outcome distributions
            std::array<std::array<double, 4>, 2> outcome{};  // [pos][token or mask]
            for (int i = 0; i < 2; ++i) {
                if (state[i] != kMask) {
                    outcome[i][state[i]] = 1.0;
                    continue;
                }
                outcome[i][kMask] = p_stay;
                double m = std::max({logits.at(i, 0), logits.at(i, 1), logits.at(i, 2)});
                double z = 0.0;
                for (int j = 0; j < kV; ++j) z += std::exp(logits.at(i, j) - m);
                for (int j = 0; j < kV; ++j)
                    outcome[i][j] = (1.0 - p_stay) * std::exp(logits.at(i, j) - m) / z;
            }
            for (int a = 0; a <= kMask; ++a)
                for (int b = 0; b <= kMask; ++b) {
                    double q = outcome[0][a] * outcome[1][b];
                    if (q > 0.0) next[{a, b}] += p * q;
                }
        }
        dist = std::move(next);
    }
    return dist;
}

// state-dependent toy predictor: position logits shift with the other
// position's decoded token
Tensor toy_predictor(const ToyState& state) {
    Tensor logits = Tensor::zeros({2, kV});
    for (int i = 0; i < 2; ++i) {
        const int other = state[1 - i];
        logits.at(i, 0) = 0.3;
        logits.at(i, 1) = other == 1 ? 1.4 : -0.2;
        logits.at(i, 2) = other == 2 ? 0.9 : 0.1;
    }
    return logits;
}

double tv_distance(const std::map<ToyState, double>& a, const std::map<ToyState, double>& b) {
    std::map<ToyState, double> keys = a;
    for (const auto& [k, v] : b) keys.try_emplace(k, 0.0);
    double tv = 0.0;
    for (const auto& [k, _] : keys) {
        double pa = a.count(k) ? a.at(k) : 0.0;
        double pb = b.count(k) ? b.at(k) : 0.0;
        tv += std::fabs(pa - pb);
    }
    return tv / 2.0;
}

std::map<ToyState, double> simulate_chain(const PredictorFn& predictor,
                                          const std::vector<double>& grid,
                                          const MaskSchedule& sched, int runs, Rng& rng) {
    std::map<ToyState, double> counts;
    for (int r = 0; r < runs; ++r) {
        TokenSequence x;
        x.ids = {kMask, kMask};
        x.mask_id = kMask;
        x.eos_id = -1;
        for (size_t k = 0; k + 1 < grid.size(); ++k) {
            ToyState st = {x.ids[0], x.ids[1]};
            x = reverse_step(x, grid[k], grid[k + 1], predictor(st), sched, rng);
        }
        counts[{x.ids[0], x.ids[1]}] += 1.0;
    }
    for (auto& [k, v] : counts) v /= runs;
    return counts;
}

}  // namespace

TEST_CASE("schedule contract") {
    MaskSchedule lin = MaskSchedule::linear();
    CHECK(lin.alpha(0.0) == 0.0);
    CHECK(lin.alpha(1.0) == 1.0);
    CHECK_THROWS_AS(MaskSchedule([](double) { return 0.5; }), std::invalid_argument);
    CHECK_THROWS_AS(MaskSchedule([](double t) { return 1.0 - t; }), std::invalid_argument);
    // any strictly increasing map with the right endpoints is accepted
    MaskSchedule quad([](double t) { return t * t; });
    CHECK(quad.alpha(0.5) == 0.25);
}

TEST_CASE("forward_mask endpoints and Monte Carlo fraction") {
    MaskSchedule lin = MaskSchedule::linear();
    Rng rng(123);
    TokenSequence x0;
    x0.ids.assign(10000, 1);
    x0.mask_id = 5;
    x0.eos_id = 4;

    TokenSequence clean = forward_mask(x0, 1.0, lin, rng);
    CHECK(clean.ids == x0.ids);

    TokenSequence prior = forward_mask(x0, 0.0, lin, rng);
    for (int id : prior.ids) CHECK(id == 5);

    // alpha(t) = 0.25 -> masked fraction 0.75 +/- 0.02
    TokenSequence mid = forward_mask(x0, 0.25, lin, rng);
    int masked = 0;
    for (int id : mid.ids)
        if (id == 5) ++masked;
    CHECK(std::fabs(masked / 10000.0 - 0.75) < 0.02);

    TokenSequence bad = x0;
    bad.ids[3] = 5;
    CHECK_THROWS_AS(forward_mask(bad, 0.5, lin, rng), std::invalid_argument);
}

TEST_CASE("reverse transition probabilities in closed form") {
    MaskSchedule lin = MaskSchedule::linear();
    CHECK(stay_mask_prob(lin, 0.25, 0.5) == 0.5 / 0.75);
    // stay-mask plus decode mass is a valid per-position distribution
    for (double t : {0.0, 0.1, 0.45, 0.8}) {
        for (double s : {0.5, 0.9, 1.0}) {
            if (s <= t) continue;
            double stay = stay_mask_prob(lin, t, s);
            double decode = (lin.alpha(s) - lin.alpha(t)) / (1.0 - lin.alpha(t));
            CHECK(std::fabs(stay + decode - 1.0) <= 1e-15);
        }
    }
    CHECK_THROWS_AS(stay_mask_prob(lin, 0.5, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(stay_mask_prob(lin, 0.5, 0.25), std::invalid_argument);
}

TEST_CASE("terminal reverse step decodes every mask") {
    MaskSchedule lin = MaskSchedule::linear();
    Rng rng(7);
    TokenSequence x;
    x.ids = {kMask, 1, kMask, kMask, 2};
    x.mask_id = kMask;
    Tensor logits = Tensor::zeros({5, kV});
    TokenSequence out = reverse_step(x, 0.3, 1.0, logits, lin, rng);
    CHECK(!out.contains_mask());
    CHECK(out.ids[1] == 1);  // unmasked positions copied verbatim
    CHECK(out.ids[4] == 2);
}

TEST_CASE("reverse step rejects non-finite logits at masked positions") {
    MaskSchedule lin = MaskSchedule::linear();
    Rng rng(7);
    TokenSequence x;
    x.ids = {kMask, 0};
    x.mask_id = kMask;
    Tensor logits = Tensor::zeros({2, kV});
    logits.at(0, 1) = HUGE_VAL;
    CHECK_THROWS_AS(reverse_step(x, 0.2, 0.8, logits, lin, rng), std::runtime_error);
}

TEST_CASE("reverse chain matches exhaustive enumeration (tv < 0.04 at 20k runs)") {
    MaskSchedule lin = MaskSchedule::linear();
    std::vector<double> grid = {0.0, 0.25, 0.5, 0.75, 1.0};
    auto exact = enumerate_chain(toy_predictor, grid, lin);
    double mass = 0.0;
    for (const auto& [k, v] : exact) {
        CHECK(k[0] != kMask);
        CHECK(k[1] != kMask);
        mass += v;
    }
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));

    Rng rng(2024);
    auto mc = simulate_chain(toy_predictor, grid, lin, 20000, rng);
    CHECK(tv_distance(exact, mc) < 0.04);
}

TEST_CASE("composition consistency for a state-independent predictor") {
    MaskSchedule lin = MaskSchedule::linear();
    Tensor fixed = Tensor::zeros({2, kV});
    fixed.at(0, 0) = 1.0;
    fixed.at(0, 2) = -0.5;
    fixed.at(1, 1) = 0.7;
    PredictorFn pred = [&](const ToyState&) { return fixed; };
    // t -> u -> s equals t -> s in distribution
    auto two = enumerate_chain(pred, {0.1, 0.4, 0.9}, lin);
    auto one = enumerate_chain(pred, {0.1, 0.9}, lin);
    // neither reaches alpha=1, so compare over partially masked states too
    CHECK(tv_distance(two, one) < 1e-12);
}

TEST_CASE("oracle predictor reconstructs x0 exactly at alpha_s = 1") {
    MaskSchedule lin = MaskSchedule::linear();
    Rng rng(55);
    TokenSequence x0;
    x0.ids = {2, 0, 1, 1, 2, 0, 0, 1};
    x0.mask_id = kMask;
    TokenSequence xt = forward_mask(x0, 0.4, lin, rng);
    Tensor logits = Tensor::zeros({8, kV});
    for (int i = 0; i < 8; ++i) logits.at(i, x0.ids[i]) = 1000.0;  // one-hot on ground truth
    TokenSequence rec = reverse_step(xt, 0.4, 1.0, logits, lin, rng);
    CHECK(rec.ids == x0.ids);
}

TEST_CASE("mdm loss: perfect predictor, uniform analytic mean, clamp") {
    MaskSchedule lin = MaskSchedule::linear();
    const int n = 6, vsz = 8;
    SegmentLayout layout;
    layout.segments.push_back({Modality::TEXT, Role::RESPONSE, n, 0, 0, false});
    TokenSequence x0;
    x0.ids = {1, 4, 2, 7, 0, 3};
    x0.mask_id = 9;  // outside logits vocabulary; mdm only uses it for corruption
    x0.eos_id = 8;

    LogitsFn perfect = [&](Tape& tape, const TokenSequence& xt, const SegmentLayout&) {
        Tensor logits = Tensor::zeros({n, vsz});
        for (int i = 0; i < n; ++i) logits.at(i, x0.ids[i]) = 1000.0;
        (void)xt;
        return tape.constant(logits);
    };
    LogitsFn uniform = [&](Tape& tape, const TokenSequence&, const SegmentLayout&) {
        return tape.constant(Tensor::zeros({n, vsz}));
    };

    Rng rng(77);
    for (int i = 0; i < 20; ++i) CHECK(mdm_loss(x0, layout, perfect, lin, 1e-3, rng) == 0.0);

    // Monte Carlo mean against the analytic expectation of
    // (1/t)(1-alpha(t)) N log V under t ~ Uniform(eps, 1], via quadrature.
    const double eps_floor = 1e-3;
    const int draws = 10000;
    std::vector<double> losses(draws);
    double mean = 0.0;
    for (int i = 0; i < draws; ++i) {
        losses[i] = mdm_loss(x0, layout, uniform, lin, eps_floor, rng);
        mean += losses[i];
    }
    mean /= draws;
    double var = 0.0;
    for (double l : losses) var += (l - mean) * (l - mean);
    var /= (draws - 1);
    const double se = std::sqrt(var / draws);

    // independent quadrature oracle (Simpson) for the expectation
    auto integrand = [&](double t) { return (1.0 / t) * (1.0 - lin.alpha(t)) * n * std::log(8.0); };
    const int steps = 200000;
    double integral = 0.0;
    for (int i = 0; i < steps; ++i) {
        double a = eps_floor + (1.0 - eps_floor) * i / steps;
        double b = eps_floor + (1.0 - eps_floor) * (i + 1) / steps;
        integral += (b - a) / 6.0 * (integrand(a) + 4.0 * integrand(0.5 * (a + b)) + integrand(b));
    }
    const double expectation = integral / (1.0 - eps_floor);
    CHECK(std::fabs(mean - expectation) < 3.0 * se);

    // the t clamp keeps every draw finite
    for (int i = 0; i < 1000; ++i) CHECK(std::isfinite(mdm_loss(x0, layout, uniform, lin, 1e-3, rng)));
}

TEST_CASE("mdm loss gradient through a tiny backbone passes grad_check") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.vocab_size = 12;
    cfg.mask_id = 10;
    cfg.eos_id = 11;
    cfg.latent_dim = 2;
    cfg.max_seq_len = 64;
    cfg.init_seed = 5;
    cfg.init_sigma = 0.25;
    Backbone model(cfg);

    SegmentLayout layout;
    layout.segments.push_back({Modality::VIS_ENC, Role::CONDITION, 2, 0, 0, false});
    layout.segments.push_back({Modality::TEXT, Role::PROMPT, 2, 0, 0, false});
    layout.segments.push_back({Modality::TEXT, Role::RESPONSE, 4, 0, 0, false});
    TokenSequence x0;
    x0.ids = {8, 8, 3, 5, 1, 2, 0, 1};
    x0.mask_id = cfg.mask_id;
    x0.eos_id = cfg.eos_id;

    MaskSchedule lin = MaskSchedule::linear();
    Rng rng(9);
    MdmDraw draw = sample_mdm_draw(8, layout, lin, 0.25, rng);

    auto f = [&](Tape& tape) {
        return mdm_loss_traced(tape, x0, layout, model.logits_fn(), draw);
    };
    CHECK(grad_check(f, model.params().pointers(), 1e-5) < 1e-4);
}
