#include "mixdiff/rectified_flow.hpp"

#include <cmath>
#include <stdexcept>

namespace mixdiff {

EulerPlan EulerPlan::uniform(int n_steps) {
    if (n_steps < 1) throw std::invalid_argument("euler plan: need at least one step");
    EulerPlan plan;
    plan.grid.resize(n_steps + 1);
    for (int i = 0; i <= n_steps; ++i) plan.grid[i] = static_cast<double>(i) / n_steps;
    plan.grid.back() = 1.0;
    return plan;
}

void EulerPlan::validate() const {
    if (grid.size() < 2) throw std::invalid_argument("euler plan: grid needs >= 2 points");
    if (grid.front() != 0.0 || grid.back() != 1.0)
        throw std::invalid_argument("euler plan: grid must span [0,1]");
    for (size_t i = 1; i < grid.size(); ++i)
        if (grid[i] <= grid[i - 1]) throw std::invalid_argument("euler plan: grid must be strictly increasing");
}

LatentSequence interpolate(const LatentSequence& noise, const LatentSequence& data, double t) {
    if (!noise.same_shape(data))
        throw std::invalid_argument("interpolate: shape mismatch " + noise.shape_str() + " vs " + data.shape_str());
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("interpolate: t outside [0,1]");
    LatentSequence out = noise;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = (1.0 - t) * noise.data[i] + t * data.data[i];
    return out;
}

RfDraw sample_rf_draw(int n_lat, int d_lat, Rng& rng) {
    RfDraw draw;
    draw.t = rng.uniform();
    draw.noise = Tensor::zeros({n_lat, d_lat});
    for (double& x : draw.noise.data) x = rng.normal();
    return draw;
}

Var rf_loss_traced(Tape& tape, const LatentSequence& data, const SegmentLayout& layout,
                   const VelocityFn& velocity_fn, const Tensor& noise,
                   const std::vector<double>& segment_times, LossMode mode) {
    if (!data.all_finite()) throw std::invalid_argument("rf_loss: latent rows must be finite");
    if (!noise.same_shape(data))
        throw std::invalid_argument("rf_loss: noise shape mismatch " + noise.shape_str());
    if (segment_times.size() != layout.segments.size())
        throw std::invalid_argument("rf_loss: one time per layout segment required");

    // interpolate per segment so packed samples keep their own t
    LatentSequence vt = data;
    {
        int row = 0, pos = 0;
        for (size_t si = 0; si < layout.segments.size(); ++si) {
            const Segment& s = layout.segments[si];
            pos += s.length;
            if (s.modality != Modality::VIS_LAT) continue;
            const double t = segment_times[si];
            if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("rf_loss: t outside [0,1]");
            for (int i = 0; i < s.length; ++i, ++row)
                for (int j = 0; j < data.cols(); ++j)
                    vt.at(row, j) = (1.0 - t) * noise.at(row, j) + t * data.at(row, j);
        }
        if (row != data.rows())
            throw std::invalid_argument("rf_loss: latent rows do not match layout VIS_LAT positions");
    }
    Var pred = velocity_fn(tape, vt, segment_times, layout);

    Tensor target = data;
    for (size_t i = 0; i < target.data.size(); ++i) target.data[i] -= noise.data[i];

    // loss mask over latent rows, in latent-row order
    const auto full = loss_positions(layout, mode);
    std::vector<uint8_t> row_mask;
    int pos = 0;
    for (const auto& s : layout.segments) {
        for (int i = 0; i < s.length; ++i, ++pos)
            if (s.modality == Modality::VIS_LAT) row_mask.push_back(full[pos]);
    }
    if (static_cast<int>(row_mask.size()) != data.rows())
        throw std::invalid_argument("rf_loss: latent rows do not match layout VIS_LAT positions");
    return tape.masked_mse(pred, target, row_mask);
}

Var rf_loss_traced(Tape& tape, const LatentSequence& data, const SegmentLayout& layout,
                   const VelocityFn& velocity_fn, const RfDraw& draw, LossMode mode) {
    std::vector<double> times(layout.segments.size(), draw.t);
    return rf_loss_traced(tape, data, layout, velocity_fn, draw.noise, times, mode);
}

double rf_loss(const LatentSequence& data, const SegmentLayout& layout,
               const VelocityFn& velocity_fn, Rng& rng, LossMode mode) {
    RfDraw draw = sample_rf_draw(data.rows(), data.cols(), rng);
    Tape tape;
    Var loss = rf_loss_traced(tape, data, layout, velocity_fn, draw, mode);
    return tape.val(loss).item();
}

Tensor euler_sample(const VelocityField& field, Tensor z0, const EulerPlan& plan) {
    plan.validate();
    Tensor z = std::move(z0);
    for (int k = 0; k + 1 < static_cast<int>(plan.grid.size()); ++k) {
        const double t = plan.grid[k];
        const double dt = plan.grid[k + 1] - plan.grid[k];
        Tensor v = field(z, t);
        if (!v.same_shape(z)) throw std::runtime_error("euler_sample: field output shape mismatch");
        for (size_t i = 0; i < z.data.size(); ++i) z.data[i] += dt * v.data[i];
        if (!z.all_finite())
            throw std::runtime_error("euler_sample: non-finite state after step " + std::to_string(k));
    }
    return z;
}

Tensor euler_sample(const VelocityField& field, int n_lat, int d_lat, const EulerPlan& plan,
                    Rng& rng) {
    Tensor z0 = Tensor::zeros({n_lat, d_lat});
    for (double& x : z0.data) x = rng.normal();
    return euler_sample(field, std::move(z0), plan);
}

}  // namespace mixdiff
