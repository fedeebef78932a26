#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "mixdiff/tensor.hpp"

namespace mixdiff {

// Handle to a node on a Tape.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

using GradMap = std::unordered_map<Tensor*, Tensor>;

// Append-only record of primitive operations. Values are immutable once
// recorded; one backward() pass per recorded forward yields gradients for
// every reachable parameter leaf. Single-writer: use one tape per worker.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. param() binds the node to external storage so backward() can
    // key its gradient; constant() never receives a gradient.
    Var param(Tensor* p);
    Var constant(Tensor v);

    const Tensor& val(Var v) const;
    size_t size() const { return nodes_.size(); }

    // elementwise / structural
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);              // hadamard
    Var scale(Var a, double s);
    Var add_rowvec(Var x, Var r);       // [n x d] + broadcast [1 x d]
    Var silu(Var x);
    Var sum(Var x);                     // scalar

    Var matmul(Var a, Var b);
    Var layer_norm(Var x, Var gain, Var bias);  // row-wise, eps 1e-5
    Var softmax_rows(Var x);

    // Rotary position map: rotates feature pairs of each head by pos-dependent
    // angles. Orthogonal, so the backward pass is the inverse rotation.
    Var rope(Var x, const std::vector<int>& positions, int n_heads, double base);

    Var gather_rows(Var x, std::vector<int> idx);
    Var scatter_rows(Var rows, std::vector<int> idx, int n_total);  // zero elsewhere
    Var embed_rows(Var table, std::vector<int> ids);
    Var concat_rows(const std::vector<Var>& parts);
    Var tile_row(Var row, int n);

    // Fused masked multi-head attention over row-major [n x d] activations.
    // mask_bias is [nq x nk] with 0 for allowed pairs and a large negative
    // value for disallowed ones; it is a constant w.r.t. differentiation.
    Var attention(Var q, Var k, Var v, const Tensor& mask_bias, int n_heads);

    // Scalar losses. Weighted cross entropy over masked positions:
    //   sum_{i in mask} w[i] * (-log softmax(logits[i])[targets[i]])
    // divided by the number of masked positions when normalize is set.
    // An empty mask yields loss 0 with zero gradient.
    Var masked_cross_entropy(Var logits, const std::vector<int>& targets,
                             const std::vector<uint8_t>& mask,
                             const std::vector<double>& weights, bool normalize = true);

    // Mean over masked rows of squared L2 row differences.
    Var masked_mse(Var pred, const Tensor& target, const std::vector<uint8_t>& row_mask);

    // Reverse-mode gradients of a scalar loss w.r.t. every param() leaf.
    GradMap backward(Var loss);

private:
    struct Node {
        Tensor value;
        Tensor* bound = nullptr;  // set for param leaves
        bool needs_grad = false;
        std::function<void(Tape&, const Tensor& gout)> back;  // empty for leaves
    };

    Var push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> back);
    void accum(int32_t id, const Tensor& g);
    Tensor& grad_slot(int32_t id);
    bool needs(Var v) const { return nodes_[v.id].needs_grad; }
    void check(Var v) const;

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

// Central-difference gradient checker. Rebuilds the loss through `f` on a
// fresh tape per evaluation, perturbing each parameter entry by +/-eps, and
// returns max over entries of |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12).
double grad_check(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& params,
                  double eps);

}  // namespace mixdiff
