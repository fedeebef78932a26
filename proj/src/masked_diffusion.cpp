#include "mixdiff/masked_diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace mixdiff {

MaskSchedule::MaskSchedule(std::function<double(double)> alpha) : alpha_(std::move(alpha)) {
    if (!alpha_) throw std::invalid_argument("schedule: null alpha");
    if (std::fabs(alpha_(0.0)) > 1e-12 || std::fabs(alpha_(1.0) - 1.0) > 1e-12)
        throw std::invalid_argument("schedule: alpha must satisfy alpha(0)=0, alpha(1)=1");
    double prev = alpha_(0.0);
    for (int i = 1; i <= 16; ++i) {
        double cur = alpha_(i / 16.0);
        if (cur <= prev) throw std::invalid_argument("schedule: alpha must be strictly increasing");
        prev = cur;
    }
}

MaskSchedule MaskSchedule::linear() {
    return MaskSchedule([](double t) { return t; });
}

bool TokenSequence::contains_mask() const { return contains(mask_id); }

bool TokenSequence::contains(int id) const {
    for (int x : ids)
        if (x == id) return true;
    return false;
}

TokenSequence forward_mask(const TokenSequence& x0, double t, const MaskSchedule& schedule, Rng& rng) {
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("forward_mask: t outside [0,1]");
    if (x0.contains_mask()) throw std::invalid_argument("forward_mask: x0 contains the MASK id");
    const double keep = schedule.alpha(t);
    TokenSequence out = x0;
    for (int& id : out.ids)
        if (!rng.bernoulli(keep)) id = x0.mask_id;
    return out;
}

double stay_mask_prob(const MaskSchedule& schedule, double t, double s) {
    const double at = schedule.alpha(t), as = schedule.alpha(s);
    if (as <= at) throw std::invalid_argument("reverse step requires alpha(s) > alpha(t)");
    return (1.0 - as) / (1.0 - at);
}

TokenSequence reverse_step(const TokenSequence& xt, double t, double s, const Tensor& logits,
                           const MaskSchedule& schedule, Rng& rng) {
    const double p_stay = stay_mask_prob(schedule, t, s);
    const int n = xt.size();
    if (logits.rows() != n)
        throw std::invalid_argument("reverse_step: logits rows do not match sequence length");
    const int vsz = logits.cols();
    // the predictor models clean tokens; exclude the MASK column when it is
    // part of the logits vocabulary
    const int skip = (xt.mask_id >= 0 && xt.mask_id < vsz) ? xt.mask_id : -1;
    TokenSequence out = xt;
    for (int i = 0; i < n; ++i) {
        if (xt.ids[i] != xt.mask_id) continue;
        if (rng.uniform() < p_stay) continue;
        // categorical sample from softmax(logits[i])
        double m = -HUGE_VAL;
        for (int j = 0; j < vsz; ++j) {
            double x = logits.at(i, j);
            if (!std::isfinite(x))
                throw std::runtime_error("reverse_step: non-finite logit at masked position " + std::to_string(i));
            if (j != skip) m = std::max(m, x);
        }
        double z = 0.0;
        for (int j = 0; j < vsz; ++j)
            if (j != skip) z += std::exp(logits.at(i, j) - m);
        double u = rng.uniform() * z;
        double acc = 0.0;
        int pick = -1;
        for (int j = 0; j < vsz; ++j) {
            if (j == skip) continue;
            pick = j;
            acc += std::exp(logits.at(i, j) - m);
            if (u < acc) break;
        }
        out.ids[i] = pick;
    }
    return out;
}

MdmDraw MdmDraw::concat(const MdmDraw& other) const {
    MdmDraw out = *this;
    out.kept.insert(out.kept.end(), other.kept.begin(), other.kept.end());
    out.weight.insert(out.weight.end(), other.weight.begin(), other.weight.end());
    return out;
}

MdmDraw sample_mdm_draw(int n_positions, const SegmentLayout& layout, const MaskSchedule& schedule,
                        double t_floor, Rng& rng, TSampling sampling) {
    if (t_floor <= 0.0 || t_floor >= 1.0)
        throw std::invalid_argument("mdm draw: t_floor must be in (0,1)");
    MdmDraw draw;
    double weight;
    if (sampling == TSampling::UNIFORM) {
        draw.t = 1.0 - rng.uniform() * (1.0 - t_floor);  // Uniform(t_floor, 1]
        weight = 1.0 / draw.t;
    } else {
        draw.t = std::pow(t_floor, rng.uniform());  // density proportional to 1/t
        weight = std::log(1.0 / t_floor);
    }
    draw.kept.assign(n_positions, 1);
    draw.weight.assign(n_positions, weight);
    const double keep = schedule.alpha(draw.t);
    const auto resp = loss_positions(layout, LossMode::UND);
    for (int i = 0; i < n_positions; ++i)
        if (resp[i]) draw.kept[i] = rng.bernoulli(keep) ? 1 : 0;
    return draw;
}

Var mdm_loss_traced(Tape& tape, const TokenSequence& x0, const SegmentLayout& layout,
                    const LogitsFn& logits_fn, const MdmDraw& draw) {
    const int n = x0.size();
    if (layout.total_len() != n)
        throw std::invalid_argument("mdm_loss: layout length does not match sequence");
    if (static_cast<int>(draw.kept.size()) != n || static_cast<int>(draw.weight.size()) != n)
        throw std::invalid_argument("mdm_loss: draw does not cover the sequence");
    const auto resp = loss_positions(layout, LossMode::UND);

    TokenSequence xt = x0;
    std::vector<uint8_t> ce_mask(n, 0);
    std::vector<double> weights(n, 0.0);
    for (int i = 0; i < n; ++i) {
        if (!resp[i] || draw.kept[i]) continue;
        xt.ids[i] = x0.mask_id;
        ce_mask[i] = 1;
        weights[i] = draw.weight[i];
    }
    Var logits = logits_fn(tape, xt, layout);
    return tape.masked_cross_entropy(logits, x0.ids, ce_mask, weights, /*normalize=*/false);
}

double mdm_loss(const TokenSequence& x0, const SegmentLayout& layout, const LogitsFn& logits_fn,
                const MaskSchedule& schedule, double t_floor, Rng& rng) {
    MdmDraw draw = sample_mdm_draw(x0.size(), layout, schedule, t_floor, rng);
    Tape tape;
    Var loss = mdm_loss_traced(tape, x0, layout, logits_fn, draw);
    return tape.val(loss).item();
}

}  // namespace mixdiff
