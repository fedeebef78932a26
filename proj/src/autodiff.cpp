#include "mixdiff/autodiff.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace mixdiff {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

static CMapMat as_mat(const Tensor& t) {
    return CMapMat(t.data.data(), t.rows(), t.cols());
}
static MapMat as_mat(Tensor& t) {
    return MapMat(t.data.data(), t.rows(), t.cols());
}

static void require_2d(const Tensor& t, const char* op) {
    if (t.shape.size() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got " + t.shape_str());
}

void Tape::check(Var v) const {
    if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size())
        throw std::invalid_argument("tape: invalid var handle");
}

Var Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::param(Tensor* p) {
    if (!p) throw std::invalid_argument("tape: null parameter");
    Node n;
    n.value = *p;
    n.bound = p;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor v) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = false;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::val(Var v) const {
    check(v);
    return nodes_[v.id].value;
}

Tensor& Tape::grad_slot(int32_t id) {
    if (grads_[id].data.empty() && nodes_[id].value.numel() > 0)
        grads_[id] = Tensor::zeros(nodes_[id].value.shape);
    return grads_[id];
}

void Tape::accum(int32_t id, const Tensor& g) {
    if (!nodes_[id].needs_grad) return;
    Tensor& slot = grad_slot(id);
    for (size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
}

// ---------------------------------------------------------------------------
// elementwise

Var Tape::add(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb))
        throw std::invalid_argument("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
        t.accum(a.id, g);
        t.accum(b.id, g);
    });
}

Var Tape::sub(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb))
        throw std::invalid_argument("sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
        t.accum(a.id, g);
        if (t.nodes_[b.id].needs_grad) {
            Tensor neg = g;
            for (double& x : neg.data) x = -x;
            t.accum(b.id, neg);
        }
    });
}

Var Tape::mul(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb))
        throw std::invalid_argument("mul: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
        if (t.nodes_[a.id].needs_grad) {
            Tensor ga = g;
            const Tensor& vb = t.val(b);
            for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= vb.data[i];
            t.accum(a.id, ga);
        }
        if (t.nodes_[b.id].needs_grad) {
            Tensor gb = g;
            const Tensor& va = t.val(a);
            for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] *= va.data[i];
            t.accum(b.id, gb);
        }
    });
}

Var Tape::scale(Var a, double s) {
    check(a);
    Tensor out = val(a);
    for (double& x : out.data) x *= s;
    return push(std::move(out), needs(a), [a, s](Tape& t, const Tensor& g) {
        Tensor ga = g;
        for (double& x : ga.data) x *= s;
        t.accum(a.id, ga);
    });
}

Var Tape::add_rowvec(Var x, Var r) {
    check(x); check(r);
    const Tensor& tx = val(x);
    const Tensor& tr = val(r);
    require_2d(tx, "add_rowvec");
    if (tr.rows() != 1 || tr.cols() != tx.cols())
        throw std::invalid_argument("add_rowvec: row shape " + tr.shape_str() + " incompatible with " + tx.shape_str());
    Tensor out = tx;
    const int n = tx.rows(), d = tx.cols();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) += tr.data[j];
    return push(std::move(out), needs(x) || needs(r), [x, r, n, d](Tape& t, const Tensor& g) {
        t.accum(x.id, g);
        if (t.nodes_[r.id].needs_grad) {
            Tensor gr = Tensor::zeros({1, d});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) gr.data[j] += g.at(i, j);
            t.accum(r.id, gr);
        }
    });
}

static inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Var Tape::silu(Var x) {
    check(x);
    Tensor out = val(x);
    for (double& v : out.data) v = v * sigmoid(v);
    return push(std::move(out), needs(x), [x](Tape& t, const Tensor& g) {
        const Tensor& vx = t.val(x);
        Tensor gx = g;
        for (size_t i = 0; i < gx.data.size(); ++i) {
            double s = sigmoid(vx.data[i]);
            gx.data[i] *= s * (1.0 + vx.data[i] * (1.0 - s));
        }
        t.accum(x.id, gx);
    });
}

Var Tape::sum(Var x) {
    check(x);
    double s = 0.0;
    for (double v : val(x).data) s += v;
    return push(Tensor::scalar(s), needs(x), [x](Tape& t, const Tensor& g) {
        Tensor gx = Tensor::full(t.val(x).shape, g.data[0]);
        t.accum(x.id, gx);
    });
}

// ---------------------------------------------------------------------------
// linear algebra

Var Tape::matmul(Var a, Var b) {
    check(a); check(b);
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_2d(ta, "matmul");
    require_2d(tb, "matmul");
    if (ta.cols() != tb.rows())
        throw std::invalid_argument("matmul: shape mismatch " + ta.shape_str() + " x " + tb.shape_str());
    Tensor out = Tensor::zeros({ta.rows(), tb.cols()});
    if (out.numel() > 0 && ta.cols() > 0) as_mat(out) = as_mat(ta) * as_mat(tb);
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        if (t.nodes_[a.id].needs_grad) {
            Tensor ga = Tensor::zeros(va.shape);
            if (ga.numel() > 0 && vb.cols() > 0) as_mat(ga) = as_mat(g) * as_mat(vb).transpose();
            t.accum(a.id, ga);
        }
        if (t.nodes_[b.id].needs_grad) {
            Tensor gb = Tensor::zeros(vb.shape);
            if (gb.numel() > 0 && va.rows() > 0) as_mat(gb) = as_mat(va).transpose() * as_mat(g);
            t.accum(b.id, gb);
        }
    });
}

static constexpr double kLnEps = 1e-5;

Var Tape::layer_norm(Var x, Var gain, Var bias) {
    check(x); check(gain); check(bias);
    const Tensor& tx = val(x);
    require_2d(tx, "layer_norm");
    const int n = tx.rows(), d = tx.cols();
    const Tensor& tg = val(gain);
    const Tensor& tb = val(bias);
    if (tg.cols() != d || tb.cols() != d)
        throw std::invalid_argument("layer_norm: gain/bias width mismatch with " + tx.shape_str());
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += tx.at(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = tx.at(i, j) - mu;
            var += c * c;
        }
        var /= d;
        double inv = 1.0 / std::sqrt(var + kLnEps);
        for (int j = 0; j < d; ++j)
            out.at(i, j) = (tx.at(i, j) - mu) * inv * tg.data[j] + tb.data[j];
    }
    return push(std::move(out), needs(x) || needs(gain) || needs(bias),
                [x, gain, bias, n, d](Tape& t, const Tensor& g) {
        const Tensor& vx = t.val(x);
        const Tensor& vg = t.val(gain);
        Tensor gx = Tensor::zeros({n, d});
        Tensor ggain = Tensor::zeros({1, d});
        Tensor gbias = Tensor::zeros({1, d});
        for (int i = 0; i < n; ++i) {
            double mu = 0.0;
            for (int j = 0; j < d; ++j) mu += vx.at(i, j);
            mu /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                double c = vx.at(i, j) - mu;
                var += c * c;
            }
            var /= d;
            double inv = 1.0 / std::sqrt(var + kLnEps);
            // dxhat, then fold the mean/variance paths
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (int j = 0; j < d; ++j) {
                double xh = (vx.at(i, j) - mu) * inv;
                double dxh = g.at(i, j) * vg.data[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
                ggain.data[j] += g.at(i, j) * xh;
                gbias.data[j] += g.at(i, j);
            }
            for (int j = 0; j < d; ++j) {
                double xh = (vx.at(i, j) - mu) * inv;
                double dxh = g.at(i, j) * vg.data[j];
                gx.at(i, j) = inv * (dxh - sum_dxh / d - xh * sum_dxh_xh / d);
            }
        }
        t.accum(x.id, gx);
        t.accum(gain.id, ggain);
        t.accum(bias.id, gbias);
    });
}

static void softmax_rows_inplace(Tensor& t) {
    const int n = t.rows(), d = t.cols();
    for (int i = 0; i < n; ++i) {
        double m = -HUGE_VAL;
        for (int j = 0; j < d; ++j) m = std::max(m, t.at(i, j));
        double z = 0.0;
        for (int j = 0; j < d; ++j) {
            double e = std::exp(t.at(i, j) - m);
            t.at(i, j) = e;
            z += e;
        }
        double invz = 1.0 / z;
        for (int j = 0; j < d; ++j) t.at(i, j) *= invz;
    }
}

Var Tape::softmax_rows(Var x) {
    check(x);
    Tensor out = val(x);
    require_2d(out, "softmax_rows");
    softmax_rows_inplace(out);
    Var vout = push(std::move(out), needs(x), nullptr);
    int32_t oid = vout.id;
    nodes_[oid].back = [x, oid](Tape& t, const Tensor& g) {
        const Tensor& a = t.nodes_[oid].value;
        const int n = a.rows(), d = a.cols();
        Tensor gx = Tensor::zeros({n, d});
        for (int i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += g.at(i, j) * a.at(i, j);
            for (int j = 0; j < d; ++j) gx.at(i, j) = a.at(i, j) * (g.at(i, j) - dot);
        }
        t.accum(x.id, gx);
    };
    return vout;
}

// ---------------------------------------------------------------------------
// position map

Var Tape::rope(Var x, const std::vector<int>& positions, int n_heads, double base) {
    check(x);
    const Tensor& tx = val(x);
    require_2d(tx, "rope");
    const int n = tx.rows(), d = tx.cols();
    if (static_cast<int>(positions.size()) != n)
        throw std::invalid_argument("rope: positions size does not match rows");
    if (n_heads <= 0 || d % n_heads != 0)
        throw std::invalid_argument("rope: width not divisible by head count");
    const int dh = d / n_heads;
    if (dh % 2 != 0) throw std::invalid_argument("rope: head dim must be even");

    // per-pair inverse frequencies
    std::vector<double> inv_freq(dh / 2);
    for (int j = 0; j < dh / 2; ++j) inv_freq[j] = std::pow(base, -2.0 * j / dh);

    auto rotate = [n, d, dh, n_heads](const Tensor& in, const std::vector<int>& pos,
                                      const std::vector<double>& invf, double sign) {
        Tensor out = Tensor::zeros({n, d});
        for (int i = 0; i < n; ++i) {
            for (int h = 0; h < n_heads; ++h) {
                const int off = h * dh;
                for (int j = 0; j < dh / 2; ++j) {
                    double ang = sign * pos[i] * invf[j];
                    double c = std::cos(ang), s = std::sin(ang);
                    double a = in.at(i, off + 2 * j);
                    double b = in.at(i, off + 2 * j + 1);
                    out.at(i, off + 2 * j) = c * a - s * b;
                    out.at(i, off + 2 * j + 1) = s * a + c * b;
                }
            }
        }
        return out;
    };

    Tensor out = rotate(tx, positions, inv_freq, 1.0);
    auto pos_copy = std::make_shared<std::vector<int>>(positions);
    auto invf = std::make_shared<std::vector<double>>(std::move(inv_freq));
    return push(std::move(out), needs(x), [x, pos_copy, invf, rotate](Tape& t, const Tensor& g) {
        t.accum(x.id, rotate(g, *pos_copy, *invf, -1.0));
    });
}

// ---------------------------------------------------------------------------
// row shuffling

Var Tape::gather_rows(Var x, std::vector<int> idx) {
    check(x);
    const Tensor& tx = val(x);
    require_2d(tx, "gather_rows");
    const int d = tx.cols();
    const int m = static_cast<int>(idx.size());
    Tensor out = Tensor::zeros({m, d});
    for (int i = 0; i < m; ++i) {
        if (idx[i] < 0 || idx[i] >= tx.rows()) throw std::invalid_argument("gather_rows: index out of range");
        for (int j = 0; j < d; ++j) out.at(i, j) = tx.at(idx[i], j);
    }
    auto sidx = std::make_shared<std::vector<int>>(std::move(idx));
    return push(std::move(out), needs(x), [x, sidx, d, m](Tape& t, const Tensor& g) {
        Tensor gx = Tensor::zeros(t.val(x).shape);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) gx.at((*sidx)[i], j) += g.at(i, j);
        t.accum(x.id, gx);
    });
}

Var Tape::scatter_rows(Var rows, std::vector<int> idx, int n_total) {
    check(rows);
    const Tensor& tr = val(rows);
    require_2d(tr, "scatter_rows");
    if (static_cast<int>(idx.size()) != tr.rows())
        throw std::invalid_argument("scatter_rows: index count does not match rows");
    const int d = tr.cols();
    Tensor out = Tensor::zeros({n_total, d});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n_total) throw std::invalid_argument("scatter_rows: index out of range");
        for (int j = 0; j < d; ++j) out.at(idx[i], j) = tr.at(static_cast<int>(i), j);
    }
    auto sidx = std::make_shared<std::vector<int>>(std::move(idx));
    return push(std::move(out), needs(rows), [rows, sidx, d](Tape& t, const Tensor& g) {
        const int m = static_cast<int>(sidx->size());
        Tensor gr = Tensor::zeros({m, d});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) gr.at(i, j) = g.at((*sidx)[i], j);
        t.accum(rows.id, gr);
    });
}

Var Tape::embed_rows(Var table, std::vector<int> ids) {
    check(table);
    const Tensor& tt = val(table);
    require_2d(tt, "embed_rows");
    const int d = tt.cols(), v = tt.rows();
    const int n = static_cast<int>(ids.size());
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw std::invalid_argument("embed_rows: id out of vocabulary");
        for (int j = 0; j < d; ++j) out.at(i, j) = tt.at(ids[i], j);
    }
    auto sids = std::make_shared<std::vector<int>>(std::move(ids));
    return push(std::move(out), needs(table), [table, sids, d, n](Tape& t, const Tensor& g) {
        Tensor gt = Tensor::zeros(t.val(table).shape);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) gt.at((*sids)[i], j) += g.at(i, j);
        t.accum(table.id, gt);
    });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    int d = -1, total = 0;
    bool any_grad = false;
    for (Var p : parts) {
        check(p);
        const Tensor& tp = val(p);
        require_2d(tp, "concat_rows");
        if (d < 0) d = tp.cols();
        if (tp.cols() != d) throw std::invalid_argument("concat_rows: width mismatch");
        total += tp.rows();
        any_grad = any_grad || needs(p);
    }
    Tensor out = Tensor::zeros({total, d});
    int r = 0;
    for (Var p : parts) {
        const Tensor& tp = val(p);
        for (int i = 0; i < tp.rows(); ++i, ++r)
            for (int j = 0; j < d; ++j) out.at(r, j) = tp.at(i, j);
    }
    auto sparts = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(out), any_grad, [sparts, d](Tape& t, const Tensor& g) {
        int r = 0;
        for (Var p : *sparts) {
            const Tensor& tp = t.val(p);
            const int m = tp.rows();
            if (t.nodes_[p.id].needs_grad) {
                Tensor gp = Tensor::zeros({m, d});
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < d; ++j) gp.at(i, j) = g.at(r + i, j);
                t.accum(p.id, gp);
            }
            r += m;
        }
    });
}

Var Tape::tile_row(Var row, int n) {
    check(row);
    const Tensor& tr = val(row);
    if (tr.rows() != 1) throw std::invalid_argument("tile_row: expected single row, got " + tr.shape_str());
    const int d = tr.cols();
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) = tr.data[j];
    return push(std::move(out), needs(row), [row, n, d](Tape& t, const Tensor& g) {
        Tensor gr = Tensor::zeros({1, d});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) gr.data[j] += g.at(i, j);
        t.accum(row.id, gr);
    });
}

// ---------------------------------------------------------------------------
// fused attention

Var Tape::attention(Var q, Var k, Var v, const Tensor& mask_bias, int n_heads) {
    check(q); check(k); check(v);
    const Tensor& tq = val(q);
    const Tensor& tk = val(k);
    const Tensor& tv = val(v);
    require_2d(tq, "attention");
    const int nq = tq.rows(), nk = tk.rows(), d = tq.cols();
    if (tk.cols() != d || tv.cols() != d || tv.rows() != nk)
        throw std::invalid_argument("attention: q/k/v shape mismatch");
    if (mask_bias.rows() != nq || mask_bias.cols() != nk)
        throw std::invalid_argument("attention: mask shape " + mask_bias.shape_str() + " does not match scores");
    if (n_heads <= 0 || d % n_heads != 0) throw std::invalid_argument("attention: bad head count");
    const int dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    using Stride = Eigen::OuterStride<>;
    using BlockMap = Eigen::Map<const RowMat, 0, Stride>;

    auto weights = std::make_shared<std::vector<Tensor>>();  // per-head softmax, saved for backward
    weights->reserve(n_heads);
    Tensor out = Tensor::zeros({nq, d});
    for (int h = 0; h < n_heads; ++h) {
        BlockMap qh(tq.data.data() + h * dh, nq, dh, Stride(d));
        BlockMap kh(tk.data.data() + h * dh, nk, dh, Stride(d));
        BlockMap vh(tv.data.data() + h * dh, nk, dh, Stride(d));
        Tensor a = Tensor::zeros({nq, nk});
        as_mat(a) = (qh * kh.transpose()) * inv_sqrt;
        for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += mask_bias.data[i];
        softmax_rows_inplace(a);
        Eigen::Map<RowMat, 0, Stride> oh(out.data.data() + h * dh, nq, dh, Stride(d));
        oh = as_mat(a) * vh;
        weights->push_back(std::move(a));
    }

    return push(std::move(out), needs(q) || needs(k) || needs(v),
                [q, k, v, weights, n_heads, nq, nk, d, dh, inv_sqrt](Tape& t, const Tensor& g) {
        const Tensor& vq = t.val(q);
        const Tensor& vk = t.val(k);
        const Tensor& vv = t.val(v);
        Tensor gq = Tensor::zeros({nq, d});
        Tensor gk = Tensor::zeros({nk, d});
        Tensor gv = Tensor::zeros({nk, d});
        using Stride = Eigen::OuterStride<>;
        using CB = Eigen::Map<const RowMat, 0, Stride>;
        using MB = Eigen::Map<RowMat, 0, Stride>;
        for (int h = 0; h < n_heads; ++h) {
            CB qh(vq.data.data() + h * dh, nq, dh, Stride(d));
            CB kh(vk.data.data() + h * dh, nk, dh, Stride(d));
            CB vh(vv.data.data() + h * dh, nk, dh, Stride(d));
            CB gh(g.data.data() + h * dh, nq, dh, Stride(d));
            const Tensor& a = (*weights)[h];
            // dV = A^T * gOut
            MB gvh(gv.data.data() + h * dh, nk, dh, Stride(d));
            gvh = as_mat(a).transpose() * gh;
            // dA = gOut * V^T, then softmax backward rows
            RowMat da = gh * vh.transpose();
            RowMat ds(nq, nk);
            for (int i = 0; i < nq; ++i) {
                double dot = 0.0;
                for (int j = 0; j < nk; ++j) dot += da(i, j) * a.at(i, j);
                for (int j = 0; j < nk; ++j) ds(i, j) = a.at(i, j) * (da(i, j) - dot);
            }
            MB gqh(gq.data.data() + h * dh, nq, dh, Stride(d));
            MB gkh(gk.data.data() + h * dh, nk, dh, Stride(d));
            gqh = (ds * kh) * inv_sqrt;
            gkh = (ds.transpose() * qh) * inv_sqrt;
        }
        t.accum(q.id, gq);
        t.accum(k.id, gk);
        t.accum(v.id, gv);
    });
}

// ---------------------------------------------------------------------------
// losses

Var Tape::masked_cross_entropy(Var logits, const std::vector<int>& targets,
                               const std::vector<uint8_t>& mask,
                               const std::vector<double>& weights, bool normalize) {
    check(logits);
    const Tensor& tl = val(logits);
    require_2d(tl, "masked_cross_entropy");
    const int n = tl.rows(), vsz = tl.cols();
    if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n ||
        static_cast<int>(weights.size()) != n)
        throw std::invalid_argument("masked_cross_entropy: targets/mask/weights must have one entry per row");

    int count = 0;
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || targets[i] >= vsz)
            throw std::invalid_argument("masked_cross_entropy: target id out of vocabulary at row " + std::to_string(i));
        if (weights[i] < 0.0)
            throw std::invalid_argument("masked_cross_entropy: negative weight at row " + std::to_string(i));
        ++count;
        double m = -HUGE_VAL;
        for (int j = 0; j < vsz; ++j) m = std::max(m, tl.at(i, j));
        double z = 0.0;
        for (int j = 0; j < vsz; ++j) z += std::exp(tl.at(i, j) - m);
        double logz = m + std::log(z);
        loss += weights[i] * (logz - tl.at(i, targets[i]));
    }
    const double denom = normalize ? static_cast<double>(std::max(count, 1)) : 1.0;
    loss /= denom;

    auto st = std::make_shared<std::vector<int>>(targets);
    auto sm = std::make_shared<std::vector<uint8_t>>(mask);
    auto sw = std::make_shared<std::vector<double>>(weights);
    return push(Tensor::scalar(loss), needs(logits),
                [logits, st, sm, sw, denom, n, vsz](Tape& t, const Tensor& g) {
        const Tensor& vl = t.val(logits);
        Tensor gl = Tensor::zeros({n, vsz});
        const double go = g.data[0] / denom;
        for (int i = 0; i < n; ++i) {
            if (!(*sm)[i]) continue;
            double m = -HUGE_VAL;
            for (int j = 0; j < vsz; ++j) m = std::max(m, vl.at(i, j));
            double z = 0.0;
            for (int j = 0; j < vsz; ++j) z += std::exp(vl.at(i, j) - m);
            for (int j = 0; j < vsz; ++j) {
                double p = std::exp(vl.at(i, j) - m) / z;
                gl.at(i, j) = go * (*sw)[i] * (p - (j == (*st)[i] ? 1.0 : 0.0));
            }
        }
        t.accum(logits.id, gl);
    });
}

Var Tape::masked_mse(Var pred, const Tensor& target, const std::vector<uint8_t>& row_mask) {
    check(pred);
    const Tensor& tp = val(pred);
    require_2d(tp, "masked_mse");
    if (!tp.same_shape(target))
        throw std::invalid_argument("masked_mse: shape mismatch " + tp.shape_str() + " vs " + target.shape_str());
    const int n = tp.rows(), d = tp.cols();
    if (static_cast<int>(row_mask.size()) != n)
        throw std::invalid_argument("masked_mse: mask must have one entry per row");
    int count = 0;
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        if (!row_mask[i]) continue;
        ++count;
        for (int j = 0; j < d; ++j) {
            double c = tp.at(i, j) - target.at(i, j);
            loss += c * c;
        }
    }
    const double denom = static_cast<double>(std::max(count, 1));
    loss /= denom;
    auto starget = std::make_shared<Tensor>(target);
    auto smask = std::make_shared<std::vector<uint8_t>>(row_mask);
    return push(Tensor::scalar(loss), needs(pred),
                [pred, starget, smask, denom, n, d](Tape& t, const Tensor& g) {
        const Tensor& vp = t.val(pred);
        Tensor gp = Tensor::zeros({n, d});
        const double go = g.data[0] * 2.0 / denom;
        for (int i = 0; i < n; ++i) {
            if (!(*smask)[i]) continue;
            for (int j = 0; j < d; ++j) gp.at(i, j) = go * (vp.at(i, j) - starget->at(i, j));
        }
        t.accum(pred.id, gp);
    });
}

// ---------------------------------------------------------------------------

GradMap Tape::backward(Var loss) {
    check(loss);
    if (val(loss).numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + val(loss).shape_str());

    grads_.assign(nodes_.size(), Tensor{});
    grad_slot(loss.id).data[0] = 1.0;

    for (int32_t i = loss.id; i >= 0; --i) {
        if (!nodes_[i].needs_grad || grads_[i].data.empty()) continue;
        if (nodes_[i].back) nodes_[i].back(*this, grads_[i]);
    }

    GradMap out;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].bound) continue;
        Tensor* p = nodes_[i].bound;
        Tensor g = grads_[i].data.empty() ? Tensor::zeros(nodes_[i].value.shape) : std::move(grads_[i]);
        auto it = out.find(p);
        if (it == out.end()) {
            out.emplace(p, std::move(g));
        } else {
            for (size_t j = 0; j < g.data.size(); ++j) it->second.data[j] += g.data[j];
        }
    }
    grads_.clear();
    return out;
}

double grad_check(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& params,
                  double eps) {
    if (eps < 1e-7 || eps > 1e-3)
        throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");

    GradMap analytic;
    {
        Tape tape;
        Var loss = f(tape);
        analytic = tape.backward(loss);
    }
    auto eval = [&f]() {
        Tape tape;
        Var loss = f(tape);
        return tape.val(loss).item();
    };

    double max_rel = 0.0;
    for (Tensor* p : params) {
        const Tensor* ga = nullptr;
        auto it = analytic.find(p);
        if (it != analytic.end()) ga = &it->second;
        for (size_t e = 0; e < p->data.size(); ++e) {
            const double orig = p->data[e];
            p->data[e] = orig + eps;
            double fp = eval();
            p->data[e] = orig - eps;
            double fm = eval();
            p->data[e] = orig;
            double gfd = (fp - fm) / (2.0 * eps);
            double gad = ga ? ga->data[e] : 0.0;
            double rel = std::fabs(gad - gfd) / (std::fabs(gad) + std::fabs(gfd) + 1e-12);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace mixdiff
