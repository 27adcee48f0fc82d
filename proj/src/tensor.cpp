#include "veco/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace veco {

namespace {

thread_local Tape* g_active_tape = nullptr;

Index checked_numel(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_string(shape));
        n *= d;
    }
    return n;
}

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

}  // namespace

std::string shape_string(const std::vector<Index>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor make_tensor(std::vector<Index> shape, std::vector<double> values) {
    auto node = std::make_shared<TensorData>();
    Index n = checked_numel(shape);
    if (static_cast<Index>(values.size()) != n) {
        throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_string(shape));
    }
    node->shape = std::move(shape);
    node->values = std::move(values);
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<Index> shape, bool requires_grad) {
    Index n = checked_numel(shape);
    Tensor t = make_tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::from_values(std::vector<Index> shape, std::vector<double> values,
                           bool requires_grad) {
    Tensor t = make_tensor(std::move(shape), std::move(values));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::scalar(double v) { return make_tensor({}, {v}); }

Tensor Tensor::randn(std::vector<Index> shape, double stddev, Rng& rng, bool requires_grad) {
    Index n = checked_numel(shape);
    std::vector<double> vals(static_cast<size_t>(n));
    for (double& v : vals) v = snap_f32(normal_real(rng) * stddev);
    Tensor t = make_tensor(std::move(shape), std::move(vals));
    t.set_requires_grad(requires_grad);
    return t;
}

double Tensor::scalar_value() const {
    if (numel() != 1) {
        throw std::invalid_argument("scalar_value on tensor of shape " + shape_string(shape()));
    }
    return node_->values[0];
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(TapeOp op) {
    if (g_active_tape) g_active_tape->ops_.push_back(std::move(op));
}

void Tape::clear() {
    ops_.clear();
    consumed_ = false;
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                    shape_string(loss.shape()));
    }
    if (consumed_) {
        throw std::logic_error("backward already ran on this tape; call clear() first");
    }
    consumed_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        // Ops downstream of the loss (or on dead branches) never get a grad
        // seeded; skipping them keeps the walk one pass, in reverse order.
        if (!it->output->grad.empty()) it->backward();
    }
}

// ---- op helpers --------------------------------------------------------------

namespace {

Tensor finish_op(Tensor out, std::initializer_list<const Tensor*> inputs,
                 std::function<void()> backward) {
    bool rg = should_record(inputs);
    out.set_requires_grad(rg);
    if (rg && Tape::active()) {
        Tape::record(TapeOp{out.node(), std::move(backward)});
    }
    return out;
}

}  // namespace

// ---- ops ---------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> vals(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] += bv[i];
    Tensor out = make_tensor(a.shape(), std::move(vals));
    auto an = a.node(), bn = b.node(), on = out.node();
    return finish_op(out, {&a, &b}, [an, bn, on] {
        const auto& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> vals(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] *= bv[i];
    Tensor out = make_tensor(a.shape(), std::move(vals));
    auto an = a.node(), bn = b.node(), on = out.node();
    return finish_op(out, {&a, &b}, [an, bn, on] {
        const auto& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->values[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->values[i];
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> vals(x.values());
    for (double& v : vals) v *= c;
    Tensor out = make_tensor(x.shape(), std::move(vals));
    auto xn = x.node(), on = out.node();
    return finish_op(out, {&x}, [xn, on, c] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const auto& g = on->grad;
        for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += c * g[i];
    });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
        throw std::invalid_argument("add_rowwise: expected [m,n] + [n], got " +
                                    shape_string(x.shape()) + " + " + shape_string(bias.shape()));
    }
    Index m = x.dim(0), n = x.dim(1);
    std::vector<double> vals(x.values());
    const auto& bv = bias.values();
    for (Index i = 0; i < m; ++i) {
        for (Index j = 0; j < n; ++j) vals[static_cast<size_t>(i * n + j)] += bv[static_cast<size_t>(j)];
    }
    Tensor out = make_tensor(x.shape(), std::move(vals));
    auto xn = x.node(), bn = bias.node(), on = out.node();
    return finish_op(out, {&x, &bias}, [xn, bn, on, m, n] {
        const auto& g = on->grad;
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (Index i = 0; i < m; ++i) {
                for (Index j = 0; j < n; ++j) {
                    bn->grad[static_cast<size_t>(j)] += g[static_cast<size_t>(i * n + j)];
                }
            }
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_string(a.shape()) +
                                    " x " + shape_string(b.shape()));
    }
    Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> vals(static_cast<size_t>(m * n), 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (Index i = 0; i < m; ++i) {
        for (Index kk = 0; kk < k; ++kk) {
            double aik = av[static_cast<size_t>(i * k + kk)];
            if (aik == 0.0) continue;
            const double* brow = bv.data() + kk * n;
            double* crow = vals.data() + i * n;
            for (Index j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    Tensor out = make_tensor({m, n}, std::move(vals));
    auto an = a.node(), bn = b.node(), on = out.node();
    return finish_op(out, {&a, &b}, [an, bn, on, m, k, n] {
        const auto& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            // dA[i,kk] = sum_j dC[i,j] * B[kk,j]
            for (Index i = 0; i < m; ++i) {
                const double* grow = g.data() + i * n;
                double* darow = an->grad.data() + i * k;
                for (Index kk = 0; kk < k; ++kk) {
                    const double* brow = bn->values.data() + kk * n;
                    double acc = 0.0;
                    for (Index j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    darow[kk] += acc;
                }
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB[kk,j] = sum_i A[i,kk] * dC[i,j]
            for (Index i = 0; i < m; ++i) {
                const double* arow = an->values.data() + i * k;
                const double* grow = g.data() + i * n;
                for (Index kk = 0; kk < k; ++kk) {
                    double aik = arow[kk];
                    if (aik == 0.0) continue;
                    double* dbrow = bn->grad.data() + kk * n;
                    for (Index j = 0; j < n; ++j) dbrow[j] += aik * grow[j];
                }
            }
        }
    });
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) {
        throw std::invalid_argument("transpose: expected rank-2 tensor, got " +
                                    shape_string(x.shape()));
    }
    Index m = x.dim(0), n = x.dim(1);
    std::vector<double> vals(static_cast<size_t>(m * n));
    const auto& xv = x.values();
    for (Index i = 0; i < m; ++i) {
        for (Index j = 0; j < n; ++j) {
            vals[static_cast<size_t>(j * m + i)] = xv[static_cast<size_t>(i * n + j)];
        }
    }
    Tensor out = make_tensor({n, m}, std::move(vals));
    auto xn = x.node(), on = out.node();
    return finish_op(out, {&x}, [xn, on, m, n] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const auto& g = on->grad;
        for (Index i = 0; i < m; ++i) {
            for (Index j = 0; j < n; ++j) {
                xn->grad[static_cast<size_t>(i * n + j)] += g[static_cast<size_t>(j * m + i)];
            }
        }
    });
}

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank()) {
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_string(x.shape()));
    }
    Index n = x.dim(axis);
    if (n == 0) throw std::invalid_argument("softmax: empty axis");
    Index outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    std::vector<double> vals(x.values());
    for (Index o = 0; o < outer; ++o) {
        for (Index in = 0; in < inner; ++in) {
            double* base = vals.data() + o * n * inner + in;
            double mx = base[0];
            for (Index i = 1; i < n; ++i) mx = std::max(mx, base[i * inner]);
            double denom = 0.0;
            for (Index i = 0; i < n; ++i) {
                double e = std::exp(base[i * inner] - mx);
                base[i * inner] = e;
                denom += e;
            }
            for (Index i = 0; i < n; ++i) base[i * inner] /= denom;
        }
    }
    Tensor out = make_tensor(x.shape(), std::move(vals));
    auto xn = x.node(), on = out.node();
    return finish_op(out, {&x}, [xn, on, outer, n, inner] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (Index o = 0; o < outer; ++o) {
            for (Index in = 0; in < inner; ++in) {
                const double* y = on->values.data() + o * n * inner + in;
                const double* dy = on->grad.data() + o * n * inner + in;
                double* dx = xn->grad.data() + o * n * inner + in;
                double dot = 0.0;
                for (Index i = 0; i < n; ++i) dot += dy[i * inner] * y[i * inner];
                for (Index i = 0; i < n; ++i) {
                    dx[i * inner] += y[i * inner] * (dy[i * inner] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
    Index n = x.dim(x.rank() - 1);
    if (n < 1) throw std::invalid_argument("layer_norm: empty last dimension");
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != n || bias.dim(0) != n) {
        throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(n) + "]");
    }
    Index rows = x.numel() / n;
    std::vector<double> vals(static_cast<size_t>(x.numel()));
    std::vector<double> inv_std(static_cast<size_t>(rows));
    std::vector<double> means(static_cast<size_t>(rows));
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (Index r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * n;
        double mean = 0.0;
        for (Index j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (Index j = 0; j < n; ++j) {
            double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double denom = std::sqrt(var + eps);
        double inv = denom > 0.0 ? 1.0 / denom : 0.0;  // constant row with eps=0
        means[static_cast<size_t>(r)] = mean;
        inv_std[static_cast<size_t>(r)] = inv;
        double* orow = vals.data() + r * n;
        for (Index j = 0; j < n; ++j) {
            orow[j] = (row[j] - mean) * inv * gv[static_cast<size_t>(j)] + bv[static_cast<size_t>(j)];
        }
    }
    Tensor out = make_tensor(x.shape(), std::move(vals));
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    return finish_op(out, {&x, &gain, &bias},
                     [xn, gn, bn, on, rows, n, means = std::move(means),
                      inv_std = std::move(inv_std)] {
        if (xn->requires_grad) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (Index r = 0; r < rows; ++r) {
            const double* xrow = xn->values.data() + r * n;
            const double* dy = on->grad.data() + r * n;
            double mean = means[static_cast<size_t>(r)];
            double inv = inv_std[static_cast<size_t>(r)];
            double m1 = 0.0, m2 = 0.0;
            for (Index j = 0; j < n; ++j) {
                double xhat = (xrow[j] - mean) * inv;
                double gj = dy[j] * gn->values[static_cast<size_t>(j)];
                m1 += gj;
                m2 += gj * xhat;
                if (gn->requires_grad) gn->grad[static_cast<size_t>(j)] += dy[j] * xhat;
                if (bn->requires_grad) bn->grad[static_cast<size_t>(j)] += dy[j];
            }
            if (!xn->requires_grad) continue;
            m1 /= static_cast<double>(n);
            m2 /= static_cast<double>(n);
            double* dx = xn->grad.data() + r * n;
            for (Index j = 0; j < n; ++j) {
                double xhat = (xrow[j] - mean) * inv;
                double gj = dy[j] * gn->values[static_cast<size_t>(j)];
                dx[j] += inv * (gj - m1 - xhat * m2);
            }
        }
    });
}

Tensor gelu(const Tensor& x) {
    static const double inv_sqrt2 = 0.70710678118654752440;
    static const double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<double> vals(x.values());
    for (double& v : vals) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    Tensor out = make_tensor(x.shape(), std::move(vals));
    auto xn = x.node(), on = out.node();
    return finish_op(out, {&x}, [xn, on] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const auto& g = on->grad;
        for (size_t i = 0; i < g.size(); ++i) {
            double v = xn->values[i];
            double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            xn->grad[i] += g[i] * (cdf + v * pdf);
        }
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<Index>& rows) {
    if (x.rank() != 2) {
        throw std::invalid_argument("gather_rows: expected rank-2 tensor, got " +
                                    shape_string(x.shape()));
    }
    Index m = x.dim(0), n = x.dim(1);
    for (Index r : rows) {
        if (r < 0 || r >= m) {
            throw std::invalid_argument("gather_rows: row " + std::to_string(r) +
                                        " out of range [0," + std::to_string(m) + ")");
        }
    }
    Index k = static_cast<Index>(rows.size());
    std::vector<double> vals(static_cast<size_t>(k * n));
    const auto& xv = x.values();
    for (Index i = 0; i < k; ++i) {
        std::copy_n(xv.data() + rows[static_cast<size_t>(i)] * n, n, vals.data() + i * n);
    }
    Tensor out = make_tensor({k, n}, std::move(vals));
    auto xn = x.node(), on = out.node();
    return finish_op(out, {&x}, [xn, on, rows, n] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < rows.size(); ++i) {
            const double* g = on->grad.data() + static_cast<Index>(i) * n;
            double* dst = xn->grad.data() + rows[i] * n;
            for (Index j = 0; j < n; ++j) dst[j] += g[j];
        }
    });
}

Tensor slice_cols(const Tensor& x, Index start, Index count) {
    if (x.rank() != 2) throw std::invalid_argument("slice_cols: expected rank-2 tensor");
    Index m = x.dim(0), n = x.dim(1);
    if (start < 0 || count < 0 || start + count > n) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + "," +
                                    std::to_string(start + count) + ") exceeds width " +
                                    std::to_string(n));
    }
    std::vector<double> vals(static_cast<size_t>(m * count));
    const auto& xv = x.values();
    for (Index i = 0; i < m; ++i) {
        std::copy_n(xv.data() + i * n + start, count, vals.data() + i * count);
    }
    Tensor out = make_tensor({m, count}, std::move(vals));
    auto xn = x.node(), on = out.node();
    return finish_op(out, {&x}, [xn, on, m, n, start, count] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (Index i = 0; i < m; ++i) {
            const double* g = on->grad.data() + i * count;
            double* dst = xn->grad.data() + i * n + start;
            for (Index j = 0; j < count; ++j) dst[j] += g[j];
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Index m = parts[0].dim(0);
    Index total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) {
            throw std::invalid_argument("concat_cols: row counts differ");
        }
        total += p.dim(1);
    }
    std::vector<double> vals(static_cast<size_t>(m * total));
    Index off = 0;
    for (const Tensor& p : parts) {
        Index w = p.dim(1);
        for (Index i = 0; i < m; ++i) {
            std::copy_n(p.values().data() + i * w, w, vals.data() + i * total + off);
        }
        off += w;
    }
    Tensor out = make_tensor({m, total}, std::move(vals));
    std::vector<NodePtr> in_nodes;
    in_nodes.reserve(parts.size());
    bool rg = false;
    for (const Tensor& p : parts) {
        in_nodes.push_back(p.node());
        rg = rg || p.requires_grad();
    }
    out.set_requires_grad(rg);
    if (rg && Tape::active()) {
        auto on = out.node();
        Tape::record(TapeOp{on, [in_nodes, on, m, total] {
            Index off2 = 0;
            for (const auto& pn : in_nodes) {
                Index w = pn->shape[1];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (Index i = 0; i < m; ++i) {
                        const double* g = on->grad.data() + i * total + off2;
                        double* dst = pn->grad.data() + i * w;
                        for (Index j = 0; j < w; ++j) dst[j] += g[j];
                    }
                }
                off2 += w;
            }
        }});
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Index n = parts[0].dim(1);
    Index total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(1) != n) {
            throw std::invalid_argument("concat_rows: column counts differ");
        }
        total += p.dim(0);
    }
    std::vector<double> vals;
    vals.reserve(static_cast<size_t>(total * n));
    for (const Tensor& p : parts) {
        vals.insert(vals.end(), p.values().begin(), p.values().end());
    }
    Tensor out = make_tensor({total, n}, std::move(vals));
    std::vector<NodePtr> in_nodes;
    bool rg = false;
    for (const Tensor& p : parts) {
        in_nodes.push_back(p.node());
        rg = rg || p.requires_grad();
    }
    out.set_requires_grad(rg);
    if (rg && Tape::active()) {
        auto on = out.node();
        Tape::record(TapeOp{on, [in_nodes, on, n] {
            Index row = 0;
            for (const auto& pn : in_nodes) {
                Index m = pn->shape[0];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    const double* g = on->grad.data() + row * n;
                    for (Index i = 0; i < m * n; ++i) pn->grad[static_cast<size_t>(i)] += g[i];
                }
                row += m;
            }
        }});
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<Index>& targets) {
    if (logits.rank() != 2) {
        throw std::invalid_argument("cross_entropy: expected [n,V] logits, got " +
                                    shape_string(logits.shape()));
    }
    Index n = logits.dim(0), vocab = logits.dim(1);
    if (static_cast<Index>(targets.size()) != n) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(n) + " rows");
    }
    for (Index t : targets) {
        if (t < 0 || t >= vocab) {
            throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                        " outside vocabulary [0," + std::to_string(vocab) + ")");
        }
    }
    if (n == 0) return Tensor::scalar(0.0);

    const auto& lv = logits.values();
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double* row = lv.data() + i * vocab;
        double mx = row[0];
        for (Index j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (Index j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
        total += mx + std::log(denom) - row[targets[static_cast<size_t>(i)]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n));
    auto ln = logits.node(), on = out.node();
    return finish_op(out, {&logits}, [ln, on, targets, n, vocab] {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        double g = on->grad[0] / static_cast<double>(n);
        for (Index i = 0; i < n; ++i) {
            const double* row = ln->values.data() + i * vocab;
            double* drow = ln->grad.data() + i * vocab;
            double mx = row[0];
            for (Index j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (Index j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
            for (Index j = 0; j < vocab; ++j) {
                double p = std::exp(row[j] - mx) / denom;
                drow[j] += g * (p - (j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0));
            }
        }
    });
}

Tensor stop_gradient(const Tensor& x) {
    Tensor out = make_tensor(x.shape(), x.values());
    out.set_requires_grad(false);
    return out;
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    Tensor out = Tensor::scalar(total);
    auto xn = x.node(), on = out.node();
    return finish_op(out, {&x}, [xn, on] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        double g = on->grad[0];
        for (double& d : xn->grad) d += g;
    });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
    if (rate == 0.0) return x;
    double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(x.values().size());
    std::vector<double> vals(x.values());
    for (size_t i = 0; i < vals.size(); ++i) {
        double m = uniform_real(rng, 0.0, 1.0) < keep ? 1.0 / keep : 0.0;
        (*mask)[i] = m;
        vals[i] *= m;
    }
    Tensor out = make_tensor(x.shape(), std::move(vals));
    auto xn = x.node(), on = out.node();
    return finish_op(out, {&x}, [xn, on, mask] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const auto& g = on->grad;
        for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i] * (*mask)[i];
    });
}

bool all_finite(const Tensor& x) {
    for (double v : x.values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace veco
