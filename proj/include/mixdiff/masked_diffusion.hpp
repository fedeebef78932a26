#pragma once

#include <functional>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/layout.hpp"
#include "mixdiff/rng.hpp"
#include "mixdiff/tensor.hpp"

namespace mixdiff {

// Keep-probability schedule alpha: [0,1] -> [0,1], alpha(0) = 0, alpha(1) = 1,
// strictly increasing. t = 0 is the fully-masked prior, t = 1 clean data.
class MaskSchedule {
public:
    explicit MaskSchedule(std::function<double(double)> alpha);
    static MaskSchedule linear();

    double alpha(double t) const { return alpha_(t); }

private:
    std::function<double(double)> alpha_;
};

// Discrete ids over a small vocabulary with reserved MASK and EOS ids.
struct TokenSequence {
    std::vector<int> ids;
    int mask_id = -1;
    int eos_id = -1;

    int size() const { return static_cast<int>(ids.size()); }
    bool contains_mask() const;
    bool contains(int id) const;
};

// Each position independently kept with probability alpha(t), else replaced
// by MASK. Throws if x0 already contains MASK.
TokenSequence forward_mask(const TokenSequence& x0, double t, const MaskSchedule& schedule, Rng& rng);

// Closed-form per-position probability that a masked token stays masked when
// moving from corruption level t to the less-corrupted s (alpha(s) > alpha(t)).
double stay_mask_prob(const MaskSchedule& schedule, double t, double s);

// One reverse transition: masked positions stay masked with probability
// (1-alpha_s)/(1-alpha_t) or are decoded by sampling the per-position
// categorical softmax(logits); unmasked positions are copied verbatim.
TokenSequence reverse_step(const TokenSequence& xt, double t, double s, const Tensor& logits,
                           const MaskSchedule& schedule, Rng& rng);

// Model hook: builds per-position logits [N x V] on the tape for a corrupted
// sequence. Rows align with the layout's discrete positions (all positions,
// for fully-discrete layouts).
using LogitsFn = std::function<Var(Tape&, const TokenSequence& xt, const SegmentLayout&)>;

// Frozen corruption draw so losses can be re-evaluated deterministically
// (training samples one per step; the gradient checker re-uses one). Packed
// batches concatenate per-sample draws, so the 1/t weight is per position.
struct MdmDraw {
    double t = 0.5;                // the sampled corruption level
    std::vector<uint8_t> kept;     // per position; meaningful on response positions
    std::vector<double> weight;    // per position; 1/t of the owning sample

    MdmDraw concat(const MdmDraw& other) const;
};

// How the Monte Carlo estimator draws the corruption level t on (t_floor, 1].
// UNIFORM keeps the per-token weight 1/t from the objective; LOG_UNIFORM
// importance-samples t proportional to 1/t so the weight becomes the constant
// log(1/t_floor) - same expectation, far lower variance.
enum class TSampling { UNIFORM, LOG_UNIFORM };

MdmDraw sample_mdm_draw(int n_positions, const SegmentLayout& layout, const MaskSchedule& schedule,
                        double t_floor, Rng& rng, TSampling sampling = TSampling::UNIFORM);

// Monte Carlo estimate of the masked-diffusion objective: corrupt RESPONSE
// positions, then sum 1/t * (-log p(x0_i | x_t)) over positions that were
// masked. Conditioning (prompt/vision) positions are never corrupted and
// never bear loss.
Var mdm_loss_traced(Tape& tape, const TokenSequence& x0, const SegmentLayout& layout,
                    const LogitsFn& logits_fn, const MdmDraw& draw);

double mdm_loss(const TokenSequence& x0, const SegmentLayout& layout, const LogitsFn& logits_fn,
                const MaskSchedule& schedule, double t_floor, Rng& rng);

}  // namespace mixdiff
