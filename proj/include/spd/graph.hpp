#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "spd/tensor.hpp"

namespace spd {

// Reverse-mode tape over a per-step graph. Nodes are whole-tensor
// operations; backward closures add into the grad buffers of their input
// nodes. Creation order is a topological order, so backward is a single
// reverse sweep. No higher-order gradients.
template <class S>
class Graph {
   public:
    struct Var {
        uint32_t idx = 0;
    };

    explicit Graph(ParamStore<S>* store = nullptr) : store_(store) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    const Tensor<S>& value(Var v) const { return nodes_[v.idx].value; }
    const std::vector<S>& grad(Var v) const { return nodes_[v.idx].grad; }
    size_t size() const { return nodes_.size(); }

    Var constant(Tensor<S> t) {
        t.requires_grad = false;
        return push(std::move(t), false, {});
    }

    // Leaf bound to a store parameter. Repeated lookups return the same node
    // so gradients from all uses accumulate in one place.
    Var param(const std::string& name) {
        if (!store_) throw ContractError("graph has no parameter store");
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end()) return it->second;
        const Tensor<S>& p = store_->get(name);
        Var v = push(Tensor<S>(p.shape, p.data), p.requires_grad, {});
        nodes_[v.idx].param_name = name;
        param_nodes_.emplace(name, v);
        return v;
    }

    Var matmul(Var a, Var b) {
        const Tensor<S>& ta = val(a);
        const Tensor<S>& tb = val(b);
        if (!ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows())
            throw ShapeError("matmul: inner dimensions do not match");
        const size_t m = ta.rows(), k = ta.cols(), n = tb.cols();
        Tensor<S> out({m, n}, std::vector<S>(m * n, S(0)));
        mm(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
        Var v = push(std::move(out), needs(a) || needs(b), [this, a, b, m, k, n](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(a)) {
                auto& ga = ensure(a);
                mm_nt(g.data(), val(b).data.data(), ga.data(), m, n, k);
            }
            if (needs(b)) {
                auto& gb = ensure(b);
                mm_tn(val(a).data.data(), g.data(), gb.data(), k, m, n);
            }
        });
        return v;
    }

    // A * B^T; avoids materializing transposes in attention.
    Var matmul_nt(Var a, Var b) {
        const Tensor<S>& ta = val(a);
        const Tensor<S>& tb = val(b);
        if (!ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols())
            throw ShapeError("matmul_nt: inner dimensions do not match");
        const size_t m = ta.rows(), k = ta.cols(), n = tb.rows();
        Tensor<S> out({m, n}, std::vector<S>(m * n, S(0)));
        mm_nt(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
        Var v = push(std::move(out), needs(a) || needs(b), [this, a, b, m, k, n](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(a)) {
                auto& ga = ensure(a);
                mm(g.data(), val(b).data.data(), ga.data(), m, n, k);
            }
            if (needs(b)) {
                auto& gb = ensure(b);
                mm_tn(g.data(), val(a).data.data(), gb.data(), n, m, k);
            }
        });
        return v;
    }

    // Rank-1 product of two vectors: out[i][j] = u[i] * v[j].
    Var outer(Var u, Var v) {
        const Tensor<S>& tu = val(u);
        const Tensor<S>& tv = val(v);
        if (tu.shape.size() != 1 || tv.shape.size() != 1) throw ShapeError("outer: expects two vectors");
        const size_t m = tu.shape[0], n = tv.shape[0];
        Tensor<S> out({m, n}, std::vector<S>(m * n));
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) out.data[i * n + j] = tu.data[i] * tv.data[j];
        return push(std::move(out), needs(u) || needs(v), [this, u, v, m, n](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(u)) {
                auto& gu = ensure(u);
                for (size_t i = 0; i < m; ++i) {
                    S s = 0;
                    for (size_t j = 0; j < n; ++j) s += g[i * n + j] * val(v).data[j];
                    gu[i] += s;
                }
            }
            if (needs(v)) {
                auto& gv = ensure(v);
                for (size_t j = 0; j < n; ++j) {
                    S s = 0;
                    for (size_t i = 0; i < m; ++i) s += g[i * n + j] * val(u).data[i];
                    gv[j] += s;
                }
            }
        });
    }

    Var hadamard(Var a, Var b) {
        const Tensor<S>& ta = val(a);
        const Tensor<S>& tb = val(b);
        if (ta.shape != tb.shape) throw ShapeError("hadamard: shape mismatch");
        Tensor<S> out(ta.shape, std::vector<S>(ta.numel()));
        for (size_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] * tb.data[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(a)) {
                auto& ga = ensure(a);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * val(b).data[i];
            }
            if (needs(b)) {
                auto& gb = ensure(b);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * val(a).data[i];
            }
        });
    }

    Var add(Var a, Var b) {
        const Tensor<S>& ta = val(a);
        const Tensor<S>& tb = val(b);
        if (ta.shape != tb.shape) throw ShapeError("add: shape mismatch");
        Tensor<S> out(ta.shape, std::vector<S>(ta.numel()));
        for (size_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] + tb.data[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(a)) {
                auto& ga = ensure(a);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (needs(b)) {
                auto& gb = ensure(b);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }

    Var sub(Var a, Var b) {
        const Tensor<S>& ta = val(a);
        const Tensor<S>& tb = val(b);
        if (ta.shape != tb.shape) throw ShapeError("sub: shape mismatch");
        Tensor<S> out(ta.shape, std::vector<S>(ta.numel()));
        for (size_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] - tb.data[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(a)) {
                auto& ga = ensure(a);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (needs(b)) {
                auto& gb = ensure(b);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }

    // Broadcast a length-n vector over the rows of an m x n matrix.
    Var add_rowvec(Var x, Var b) {
        const Tensor<S>& tx = val(x);
        const Tensor<S>& tb = val(b);
        if (!tx.is_matrix() || tb.shape.size() != 1 || tb.shape[0] != tx.cols())
            throw ShapeError("add_rowvec: vector length must equal matrix columns");
        const size_t m = tx.rows(), n = tx.cols();
        Tensor<S> out({m, n}, std::vector<S>(m * n));
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) out.data[i * n + j] = tx.data[i * n + j] + tb.data[j];
        return push(std::move(out), needs(x) || needs(b), [this, x, b, m, n](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(x)) {
                auto& gx = ensure(x);
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (needs(b)) {
                auto& gb = ensure(b);
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    }

    Var scale(Var a, S c) {
        const Tensor<S>& ta = val(a);
        Tensor<S> out(ta.shape, std::vector<S>(ta.numel()));
        for (size_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] * c;
        return push(std::move(out), needs(a), [this, a, c](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(a)) {
                auto& ga = ensure(a);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
            }
        });
    }

    Var relu(Var a) {
        const Tensor<S>& ta = val(a);
        Tensor<S> out(ta.shape, std::vector<S>(ta.numel()));
        for (size_t i = 0; i < ta.numel(); ++i) out.data[i] = ta.data[i] > S(0) ? ta.data[i] : S(0);
        return push(std::move(out), needs(a), [this, a](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(a)) {
                auto& ga = ensure(a);
                for (size_t i = 0; i < g.size(); ++i)
                    if (val(a).data[i] > S(0)) ga[i] += g[i];
            }
        });
    }

    // Row-wise softmax with row-max subtraction for stability.
    Var softmax_rows(Var a) {
        const Tensor<S>& ta = val(a);
        if (!ta.is_matrix()) throw ShapeError("softmax_rows: expects a matrix");
        const size_t m = ta.rows(), n = ta.cols();
        Tensor<S> out({m, n}, std::vector<S>(m * n));
        for (size_t i = 0; i < m; ++i) {
            S mx = ta.data[i * n];
            for (size_t j = 1; j < n; ++j) mx = std::max(mx, ta.data[i * n + j]);
            S sum = 0;
            for (size_t j = 0; j < n; ++j) {
                const S e = std::exp(ta.data[i * n + j] - mx);
                out.data[i * n + j] = e;
                sum += e;
            }
            for (size_t j = 0; j < n; ++j) out.data[i * n + j] /= sum;
        }
        return push(std::move(out), needs(a), [this, a, m, n](Var self) {
            const auto& g = nodes_[self.idx].grad;
            const auto& y = nodes_[self.idx].value.data;
            if (needs(a)) {
                auto& ga = ensure(a);
                for (size_t i = 0; i < m; ++i) {
                    S dot = 0;
                    for (size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                    for (size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                }
            }
        });
    }

    // Per-row normalization to mean 0 / variance 1 (population variance),
    // then elementwise gain and bias.
    Var layer_norm(Var x, Var gain, Var bias, S eps) {
        const Tensor<S>& tx = val(x);
        const Tensor<S>& tg = val(gain);
        const Tensor<S>& tb = val(bias);
        if (!tx.is_matrix()) throw ShapeError("layer_norm: expects a matrix");
        const size_t m = tx.rows(), n = tx.cols();
        if (tg.shape.size() != 1 || tg.shape[0] != n || tb.shape.size() != 1 || tb.shape[0] != n)
            throw ShapeError("layer_norm: gain/bias length must equal last dim");
        Tensor<S> out({m, n}, std::vector<S>(m * n));
        std::vector<S> xhat(m * n);
        std::vector<S> rstd(m);
        for (size_t i = 0; i < m; ++i) {
            S mean = 0;
            for (size_t j = 0; j < n; ++j) mean += tx.data[i * n + j];
            mean /= static_cast<S>(n);
            S var = 0;
            for (size_t j = 0; j < n; ++j) {
                const S d = tx.data[i * n + j] - mean;
                var += d * d;
            }
            var /= static_cast<S>(n);
            const S r = S(1) / std::sqrt(var + eps);
            rstd[i] = r;
            for (size_t j = 0; j < n; ++j) {
                const S h = (tx.data[i * n + j] - mean) * r;
                xhat[i * n + j] = h;
                out.data[i * n + j] = tg.data[j] * h + tb.data[j];
            }
        }
        return push(std::move(out), needs(x) || needs(gain) || needs(bias),
                    [this, x, gain, bias, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Var self) {
                        const auto& g = nodes_[self.idx].grad;
                        const auto& gv = val(gain).data;
                        if (needs(gain)) {
                            auto& gg = ensure(gain);
                            for (size_t i = 0; i < m; ++i)
                                for (size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                        if (needs(bias)) {
                            auto& gb = ensure(bias);
                            for (size_t i = 0; i < m; ++i)
                                for (size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                        }
                        if (needs(x)) {
                            auto& gx = ensure(x);
                            for (size_t i = 0; i < m; ++i) {
                                S mean_gy = 0, mean_gyx = 0;
                                for (size_t j = 0; j < n; ++j) {
                                    const S gy = g[i * n + j] * gv[j];
                                    mean_gy += gy;
                                    mean_gyx += gy * xhat[i * n + j];
                                }
                                mean_gy /= static_cast<S>(n);
                                mean_gyx /= static_cast<S>(n);
                                for (size_t j = 0; j < n; ++j) {
                                    const S gy = g[i * n + j] * gv[j];
                                    gx[i * n + j] += rstd[i] * (gy - mean_gy - xhat[i * n + j] * mean_gyx);
                                }
                            }
                        }
                    });
    }

    // Select rows of a table by index; the embedding lookup.
    Var gather_rows(Var table, std::vector<size_t> ids) {
        const Tensor<S>& tt = val(table);
        if (!tt.is_matrix()) throw ShapeError("gather_rows: table must be a matrix");
        const size_t n = tt.cols();
        for (size_t id : ids)
            if (id >= tt.rows()) throw ShapeError("gather_rows: row index out of range");
        Tensor<S> out({ids.size(), n}, std::vector<S>(ids.size() * n));
        for (size_t r = 0; r < ids.size(); ++r)
            for (size_t j = 0; j < n; ++j) out.data[r * n + j] = tt.data[ids[r] * n + j];
        return push(std::move(out), needs(table), [this, table, n, ids = std::move(ids)](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(table)) {
                auto& gt = ensure(table);
                for (size_t r = 0; r < ids.size(); ++r)
                    for (size_t j = 0; j < n; ++j) gt[ids[r] * n + j] += g[r * n + j];
            }
        });
    }

    // Concatenate matrices with equal row counts along columns.
    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols: no inputs");
        const size_t m = val(parts[0]).rows();
        size_t total = 0;
        for (Var p : parts) {
            if (!val(p).is_matrix() || val(p).rows() != m) throw ShapeError("concat_cols: row counts differ");
            total += val(p).cols();
        }
        Tensor<S> out({m, total}, std::vector<S>(m * total));
        size_t off = 0;
        for (Var p : parts) {
            const size_t c = val(p).cols();
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < c; ++j) out.data[i * total + off + j] = val(p).data[i * c + j];
            off += c;
        }
        bool ng = false;
        for (Var p : parts) ng = ng || needs(p);
        return push(std::move(out), ng, [this, parts, m, total](Var self) {
            const auto& g = nodes_[self.idx].grad;
            size_t off = 0;
            for (Var p : parts) {
                const size_t c = val(p).cols();
                if (needs(p)) {
                    auto& gp = ensure(p);
                    for (size_t i = 0; i < m; ++i)
                        for (size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
                }
                off += c;
            }
        });
    }

    // Stack length-d vectors into a (k x d) matrix.
    Var stack_rows(const std::vector<Var>& rows) {
        if (rows.empty()) throw ShapeError("stack_rows: no inputs");
        const size_t d = val(rows[0]).numel();
        for (Var r : rows) {
            if (val(r).shape.size() != 1 || val(r).numel() != d) throw ShapeError("stack_rows: lengths differ");
        }
        Tensor<S> out({rows.size(), d}, std::vector<S>(rows.size() * d));
        for (size_t r = 0; r < rows.size(); ++r)
            for (size_t j = 0; j < d; ++j) out.data[r * d + j] = val(rows[r]).data[j];
        bool ng = false;
        for (Var r : rows) ng = ng || needs(r);
        return push(std::move(out), ng, [this, rows, d](Var self) {
            const auto& g = nodes_[self.idx].grad;
            for (size_t r = 0; r < rows.size(); ++r) {
                if (needs(rows[r])) {
                    auto& gr = ensure(rows[r]);
                    for (size_t j = 0; j < d; ++j) gr[j] += g[r * d + j];
                }
            }
        });
    }

    // Column-wise mean over rows: (m x n) -> length-n vector.
    Var mean_rows(Var a) {
        const Tensor<S>& ta = val(a);
        if (!ta.is_matrix()) throw ShapeError("mean_rows: expects a matrix");
        const size_t m = ta.rows(), n = ta.cols();
        Tensor<S> out({n}, std::vector<S>(n, S(0)));
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) out.data[j] += ta.data[i * n + j];
        for (size_t j = 0; j < n; ++j) out.data[j] /= static_cast<S>(m);
        return push(std::move(out), needs(a), [this, a, m, n](Var self) {
            const auto& g = nodes_[self.idx].grad;
            if (needs(a)) {
                auto& ga = ensure(a);
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] / static_cast<S>(m);
            }
        });
    }

    Var sum_squares(Var a) {
        const Tensor<S>& ta = val(a);
        S s = 0;
        for (S x : ta.data) s += x * x;
        Tensor<S> out({size_t(1)}, std::vector<S>{s});
        return push(std::move(out), needs(a), [this, a](Var self) {
            const S g = nodes_[self.idx].grad[0];
            if (needs(a)) {
                auto& ga = ensure(a);
                const auto& x = val(a).data;
                for (size_t i = 0; i < x.size(); ++i) ga[i] += S(2) * x[i] * g;
            }
        });
    }

    // Reverse sweep from a scalar loss. Populates grads on every node on the
    // path and accumulates parameter gradients into the store; calling again
    // without zeroing store grads accumulates.
    void backward(Var loss) {
        if (!val(loss).is_scalar()) throw ContractError("backward: loss must be a scalar");
        if (!std::isfinite(static_cast<double>(val(loss).data[0])))
            throw NumericError("backward: loss is not finite");
        for (auto& node : nodes_) node.grad.assign(node.value.numel(), S(0));
        nodes_[loss.idx].grad[0] = S(1);
        for (size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].backprop && nodes_[i].needs_grad) nodes_[i].backprop(Var{static_cast<uint32_t>(i)});
        }
        if (store_) {
            for (const auto& [name, var] : param_nodes_) {
                Tensor<S>& p = store_->get(name);
                if (!p.requires_grad) continue;
                p.ensure_grad();
                const auto& g = nodes_[var.idx].grad;
                for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
            }
        }
    }

   private:
    struct Node {
        Tensor<S> value;
        std::vector<S> grad;
        std::function<void(Var)> backprop;
        bool needs_grad = false;
        std::string param_name;
    };

    const Tensor<S>& val(Var v) const { return nodes_[v.idx].value; }
    bool needs(Var v) const { return nodes_[v.idx].needs_grad; }
    std::vector<S>& ensure(Var v) {
        auto& n = nodes_[v.idx];
        if (n.grad.size() != n.value.numel()) n.grad.assign(n.value.numel(), S(0));
        return n.grad;
    }

    Var push(Tensor<S> t, bool needs_grad, std::function<void(Var)> back) {
        Node node;
        node.value = std::move(t);
        node.needs_grad = needs_grad;
        node.backprop = std::move(back);
        nodes_.push_back(std::move(node));
        return Var{static_cast<uint32_t>(nodes_.size() - 1)};
    }

    // C(m x n) += A(m x k) * B(k x n)
    static void mm(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
        for (size_t i = 0; i < m; ++i) {
            for (size_t p = 0; p < k; ++p) {
                const S av = a[i * k + p];
                const S* brow = b + p * n;
                S* crow = c + i * n;
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    // C(m x n) += A(m x k) * B(n x k)^T
    static void mm_nt(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
        for (size_t i = 0; i < m; ++i) {
            for (size_t j = 0; j < n; ++j) {
                S s = 0;
                const S* arow = a + i * k;
                const S* brow = b + j * k;
                for (size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                c[i * n + j] += s;
            }
        }
    }
    // C(m x n) += A(k x m)^T * B(k x n)
    static void mm_tn(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
        for (size_t p = 0; p < k; ++p) {
            const S* arow = a + p * m;
            const S* brow = b + p * n;
            for (size_t i = 0; i < m; ++i) {
                const S av = arow[i];
                S* crow = c + i * n;
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }

    std::vector<Node> nodes_;
    ParamStore<S>* store_;
    std::unordered_map<std::string, Var> param_nodes_;
};

}  // namespace spd
