#pragma once

#include <functional>
#include <vector>

#include "mixdiff/autodiff.hpp"
#include "mixdiff/layout.hpp"
#include "mixdiff/rng.hpp"
#include "mixdiff/tensor.hpp"

namespace mixdiff {

// Matrix of continuous latent vectors, one row per latent token.
using LatentSequence = Tensor;

// Strictly increasing time grid 0 = t_0 < ... < t_K = 1 for ODE integration.
struct EulerPlan {
    std::vector<double> grid;

    static EulerPlan uniform(int n_steps);
    int n_steps() const { return static_cast<int>(grid.size()) - 1; }
    void validate() const;
};

// (1-t) * noise + t * data, elementwise.
LatentSequence interpolate(const LatentSequence& noise, const LatentSequence& data, double t);

// Velocity prediction hook used during training: given the interpolated
// latents (rows for every VIS_LAT position of the layout) and per-segment
// times, build per-latent-row velocity predictions on the tape.
using VelocityFn = std::function<Var(Tape&, const LatentSequence& vt,
                                     const std::vector<double>& segment_times,
                                     const SegmentLayout&)>;

struct RfDraw {
    double t = 0.5;
    Tensor noise;  // same shape as the clean latents
};

RfDraw sample_rf_draw(int n_lat, int d_lat, Rng& rng);

// Velocity-matching loss: form v_t = (1-t)*eps + t*v0 and regress the model
// output onto v0 - eps over the layout's loss-bearing latent rows. The packed
// variant takes one time per layout segment (packed samples draw their own t).
Var rf_loss_traced(Tape& tape, const LatentSequence& data, const SegmentLayout& layout,
                   const VelocityFn& velocity_fn, const Tensor& noise,
                   const std::vector<double>& segment_times, LossMode mode = LossMode::GEN);

Var rf_loss_traced(Tape& tape, const LatentSequence& data, const SegmentLayout& layout,
                   const VelocityFn& velocity_fn, const RfDraw& draw, LossMode mode = LossMode::GEN);

double rf_loss(const LatentSequence& data, const SegmentLayout& layout,
               const VelocityFn& velocity_fn, Rng& rng, LossMode mode = LossMode::GEN);

// Plain velocity field for sampling; implementations may close over a prompt
// KV cache so each step only recomputes the latent block.
using VelocityField = std::function<Tensor(const Tensor& z, double t)>;

// Explicit Euler integration of dz/dt = f(z, t) from the plan's first grid
// point to its last. Throws (naming the step) if the state goes non-finite.
Tensor euler_sample(const VelocityField& field, Tensor z0, const EulerPlan& plan);

// Convenience: z0 drawn i.i.d. standard normal.
Tensor euler_sample(const VelocityField& field, int n_lat, int d_lat, const EulerPlan& plan,
                    Rng& rng);

}  // namespace mixdiff
