#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tinymm/graph.hpp"

namespace tinymm {

namespace detail {

using EMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CEMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C += alpha * op(A) * op(B). The one kernel every matmul-shaped op funnels
// through; Eigen does the inner product, shape policing stays ours.
inline void gemm_acc(const Tensor& A, bool tA, const Tensor& B, bool tB, Tensor& C,
                     double alpha) {
    const int am = tA ? A.dim(1) : A.dim(0);
    const int ak = tA ? A.dim(0) : A.dim(1);
    const int bk = tB ? B.dim(1) : B.dim(0);
    const int bn = tB ? B.dim(0) : B.dim(1);
    if (ak != bk || C.dim(0) != am || C.dim(1) != bn) {
        throw ShapeError("gemm shape mismatch: " + shape_str(A.shape()) + (tA ? "^T" : "") +
                         " * " + shape_str(B.shape()) + (tB ? "^T" : "") + " -> " +
                         shape_str(C.shape()));
    }
    if (am == 0 || bn == 0 || ak == 0) return;
    CEMap ma(A.data(), A.dim(0), A.dim(1));
    CEMap mb(B.data(), B.dim(0), B.dim(1));
    EMap mc(C.data(), am, bn);
    if (!tA && !tB)
        mc.noalias() += alpha * (ma * mb);
    else if (tA && !tB)
        mc.noalias() += alpha * (ma.transpose() * mb);
    else if (!tA && tB)
        mc.noalias() += alpha * (ma * mb.transpose());
    else
        mc.noalias() += alpha * (ma.transpose() * mb.transpose());
}

inline void require_matrix(const Tensor& t, const char* who) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(who) + " expects a matrix, got " + shape_str(t.shape()));
    }
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
inline double normal_pdf(double x) {
    static const double inv_sqrt_2pi = 0.3989422804014326779;
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

} // namespace detail

// Sentinel for "position not supervised". Any label outside [0, vocab) is
// treated as ignored; -1 is the canonical value.
inline constexpr int kIgnoreLabel = -1;

inline bool is_supervised(int label, int vocab_size) {
    return label >= 0 && label < vocab_size;
}

// ---- arithmetic -----------------------------------------------------------

inline Var matmul(Var a, Var b) {
    Graph& g = *a.graph();
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    detail::require_matrix(A, "matmul");
    detail::require_matrix(B, "matmul");
    if (A.dim(1) != B.dim(0)) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(A.shape()) + " vs " +
                         shape_str(B.shape()));
    }
    Tensor C({A.dim(0), B.dim(1)});
    detail::gemm_acc(A, false, B, false, C, 1.0);
    int ai = a.idx(), bi = b.idx();
    return g.make_op({ai, bi}, std::move(C), [ai, bi](Graph& gg, Graph::Node& self) {
        if (gg.wants_grad(ai))
            detail::gemm_acc(self.grad, false, gg.node(bi).value, true, gg.grad_acc(ai), 1.0);
        if (gg.wants_grad(bi))
            detail::gemm_acc(gg.node(ai).value, true, self.grad, false, gg.grad_acc(bi), 1.0);
    });
}

// a * b^T; used by the weight-tied logit head.
inline Var matmul_nt(Var a, Var b) {
    Graph& g = *a.graph();
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    detail::require_matrix(A, "matmul_nt");
    detail::require_matrix(B, "matmul_nt");
    if (A.dim(1) != B.dim(1)) {
        throw ShapeError("matmul_nt inner dimension mismatch: " + shape_str(A.shape()) +
                         " vs " + shape_str(B.shape()) + "^T");
    }
    Tensor C({A.dim(0), B.dim(0)});
    detail::gemm_acc(A, false, B, true, C, 1.0);
    int ai = a.idx(), bi = b.idx();
    return g.make_op({ai, bi}, std::move(C), [ai, bi](Graph& gg, Graph::Node& self) {
        if (gg.wants_grad(ai))
            detail::gemm_acc(self.grad, false, gg.node(bi).value, false, gg.grad_acc(ai), 1.0);
        if (gg.wants_grad(bi))
            detail::gemm_acc(self.grad, true, gg.node(ai).value, false, gg.grad_acc(bi), 1.0);
    });
}

// Same-shape add, or (rows x d) + (d,) row broadcast for biases.
inline Var add(Var a, Var b) {
    Graph& g = *a.graph();
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const bool broadcast = A.rank() == 2 && B.rank() == 1 && A.dim(1) == B.dim(0);
    if (!broadcast && !A.same_shape(B)) {
        throw ShapeError("add shape mismatch: " + shape_str(A.shape()) + " vs " +
                         shape_str(B.shape()));
    }
    Tensor C = A;
    if (broadcast) {
        const int rows = A.dim(0), cols = A.dim(1);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) C.at(i, j) += B[static_cast<size_t>(j)];
    } else {
        for (size_t i = 0; i < C.numel(); ++i) C[i] += B[i];
    }
    int ai = a.idx(), bi = b.idx();
    return g.make_op({ai, bi}, std::move(C), [ai, bi, broadcast](Graph& gg, Graph::Node& self) {
        if (gg.wants_grad(ai)) gg.grad_acc(ai) += self.grad;
        if (!gg.wants_grad(bi)) return;
        Tensor& db = gg.grad_acc(bi);
        if (broadcast) {
            const int rows = self.grad.dim(0), cols = self.grad.dim(1);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) db[static_cast<size_t>(j)] += self.grad.at(i, j);
        } else {
            db += self.grad;
        }
    });
}

inline Var mul(Var a, Var b) {
    Graph& g = *a.graph();
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (!A.same_shape(B)) {
        throw ShapeError("mul shape mismatch: " + shape_str(A.shape()) + " vs " +
                         shape_str(B.shape()));
    }
    Tensor C = A;
    for (size_t i = 0; i < C.numel(); ++i) C[i] *= B[i];
    int ai = a.idx(), bi = b.idx();
    return g.make_op({ai, bi}, std::move(C), [ai, bi](Graph& gg, Graph::Node& self) {
        const Tensor& va = gg.node(ai).value;
        const Tensor& vb = gg.node(bi).value;
        if (gg.wants_grad(ai)) {
            Tensor& da = gg.grad_acc(ai);
            for (size_t i = 0; i < da.numel(); ++i) da[i] += self.grad[i] * vb[i];
        }
        if (gg.wants_grad(bi)) {
            Tensor& db = gg.grad_acc(bi);
            for (size_t i = 0; i < db.numel(); ++i) db[i] += self.grad[i] * va[i];
        }
    });
}

inline Var scale(Var a, double c) {
    Graph& g = *a.graph();
    Tensor C = a.value();
    for (size_t i = 0; i < C.numel(); ++i) C[i] *= c;
    int ai = a.idx();
    return g.make_op({ai}, std::move(C), [ai, c](Graph& gg, Graph::Node& self) {
        if (!gg.wants_grad(ai)) return;
        Tensor& da = gg.grad_acc(ai);
        for (size_t i = 0; i < da.numel(); ++i) da[i] += c * self.grad[i];
    });
}

inline Var sum(Var a) {
    Graph& g = *a.graph();
    double s = 0.0;
    for (size_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
    int ai = a.idx();
    return g.make_op({ai}, Tensor::scalar(s), [ai](Graph& gg, Graph::Node& self) {
        if (!gg.wants_grad(ai)) return;
        Tensor& da = gg.grad_acc(ai);
        const double gs = self.grad[0];
        for (size_t i = 0; i < da.numel(); ++i) da[i] += gs;
    });
}

// ---- nonlinearities -------------------------------------------------------

// Exact-CDF GELU: x * Phi(x). No tanh approximation.
inline Var gelu(Var x) {
    Graph& g = *x.graph();
    const Tensor& X = x.value();
    Tensor Y = X;
    for (size_t i = 0; i < Y.numel(); ++i) Y[i] = X[i] * detail::normal_cdf(X[i]);
    int xi = x.idx();
    return g.make_op({xi}, std::move(Y), [xi](Graph& gg, Graph::Node& self) {
        if (!gg.wants_grad(xi)) return;
        const Tensor& X = gg.node(xi).value;
        Tensor& dx = gg.grad_acc(xi);
        for (size_t i = 0; i < dx.numel(); ++i) {
            const double v = X[i];
            dx[i] += self.grad[i] * (detail::normal_cdf(v) + v * detail::normal_pdf(v));
        }
    });
}

// Per-last-axis layer norm with affine gain/bias. Accepts (d,) or (rows x d).
inline Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Graph& g = *x.graph();
    const Tensor& X = x.value();
    const int d = X.rank() == 1 ? X.dim(0) : X.dim(X.rank() - 1);
    if (gain.value().numel() != static_cast<size_t>(d) ||
        bias.value().numel() != static_cast<size_t>(d)) {
        throw ShapeError("layer_norm affine shape mismatch: x " + shape_str(X.shape()) +
                         ", gain " + shape_str(gain.value().shape()) + ", bias " +
                         shape_str(bias.value().shape()));
    }
    const int rows = static_cast<int>(X.numel()) / d;
    Tensor Y = X;
    // xhat kept for backward
    auto xhat = std::make_shared<Tensor>(X.shape());
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const double* row = X.data() + static_cast<size_t>(r) * static_cast<size_t>(d);
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<size_t>(r)] = is;
        for (int j = 0; j < d; ++j) {
            const size_t k = static_cast<size_t>(r) * static_cast<size_t>(d) + static_cast<size_t>(j);
            const double xh = (row[j] - mean) * is;
            (*xhat)[k] = xh;
            Y[k] = xh * gain.value()[static_cast<size_t>(j)] + bias.value()[static_cast<size_t>(j)];
        }
    }
    int xi = x.idx(), gi = gain.idx(), bi = bias.idx();
    return g.make_op(
        {xi, gi, bi}, std::move(Y),
        [xi, gi, bi, rows, d, xhat, inv_sigma](Graph& gg, Graph::Node& self) {
            const Tensor& gainv = gg.node(gi).value;
            for (int r = 0; r < rows; ++r) {
                const size_t off = static_cast<size_t>(r) * static_cast<size_t>(d);
                const double* dy = self.grad.data() + off;
                const double* xh = xhat->data() + off;
                if (gg.wants_grad(gi)) {
                    Tensor& dgain = gg.grad_acc(gi);
                    for (int j = 0; j < d; ++j) dgain[static_cast<size_t>(j)] += dy[j] * xh[j];
                }
                if (gg.wants_grad(bi)) {
                    Tensor& dbias = gg.grad_acc(bi);
                    for (int j = 0; j < d; ++j) dbias[static_cast<size_t>(j)] += dy[j];
                }
                if (gg.wants_grad(xi)) {
                    // dx = (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat)) / sigma
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = dy[j] * gainv[static_cast<size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= d;
                    m2 /= d;
                    Tensor& dx = gg.grad_acc(xi);
                    const double is = (*inv_sigma)[static_cast<size_t>(r)];
                    for (int j = 0; j < d; ++j) {
                        const double dxh = dy[j] * gainv[static_cast<size_t>(j)];
                        dx[off + static_cast<size_t>(j)] += (dxh - m1 - xh[j] * m2) * is;
                    }
                }
            }
        });
}

// ---- losses ---------------------------------------------------------------

// -log softmax(logits)[target] with max-subtraction stabilization.
// logits: (K,) or (1 x K).
inline Var softmax_cross_entropy(Var logits, int target) {
    Graph& g = *logits.graph();
    const Tensor& L = logits.value();
    const int K = static_cast<int>(L.numel());
    if (L.rank() > 2 || (L.rank() == 2 && L.dim(0) != 1)) {
        throw ShapeError("softmax_cross_entropy expects a logit vector, got " +
                         shape_str(L.shape()));
    }
    if (target < 0 || target >= K) {
        throw IndexError("softmax_cross_entropy target " + std::to_string(target) +
                         " out of range [0, " + std::to_string(K) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < K; ++j) mx = std::max(mx, L[static_cast<size_t>(j)]);
    double z = 0.0;
    for (int j = 0; j < K; ++j) z += std::exp(L[static_cast<size_t>(j)] - mx);
    const double lse = mx + std::log(z);
    const double loss = lse - L[static_cast<size_t>(target)];
    int li = logits.idx();
    return g.make_op({li}, Tensor::scalar(loss), [li, target, lse](Graph& gg, Graph::Node& self) {
        if (!gg.wants_grad(li)) return;
        const Tensor& L = gg.node(li).value;
        Tensor& dl = gg.grad_acc(li);
        const double gs = self.grad[0];
        for (size_t j = 0; j < L.numel(); ++j) {
            const double p = std::exp(L[j] - lse);
            dl[j] += gs * (p - (static_cast<int>(j) == target ? 1.0 : 0.0));
        }
    });
}

// Mean next-token cross-entropy over supervised rows of an (L x V) logit
// matrix. labels[i] is the target for row i; out-of-range labels (the IGNORE
// sentinel included) are excluded from both the mean and the gradient, so
// ignored rows get an exactly-zero adjoint.
inline Var cross_entropy_rows(Var logits, const std::vector<int>& labels) {
    Graph& g = *logits.graph();
    const Tensor& L = logits.value();
    detail::require_matrix(L, "cross_entropy_rows");
    const int rows = L.dim(0), V = L.dim(1);
    if (static_cast<int>(labels.size()) != rows) {
        throw ShapeError("cross_entropy_rows: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
    }
    auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(rows), 0.0);
    double total = 0.0;
    int supervised = 0;
    for (int i = 0; i < rows; ++i) {
        if (!is_supervised(labels[static_cast<size_t>(i)], V)) continue;
        const double* row = L.data() + static_cast<size_t>(i) * static_cast<size_t>(V);
        double mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        const double l = mx + std::log(z);
        (*lse)[static_cast<size_t>(i)] = l;
        total += l - row[labels[static_cast<size_t>(i)]];
        ++supervised;
    }
    if (supervised == 0) throw ContractError("cross_entropy_rows: no supervised positions");
    const double loss = total / supervised;
    int li = logits.idx();
    auto labs = std::make_shared<std::vector<int>>(labels);
    return g.make_op({li}, Tensor::scalar(loss),
                     [li, labs, lse, supervised, V](Graph& gg, Graph::Node& self) {
                         if (!gg.wants_grad(li)) return;
                         const Tensor& L = gg.node(li).value;
                         Tensor& dl = gg.grad_acc(li);
                         const double gs = self.grad[0] / supervised;
                         const int rows = L.dim(0);
                         for (int i = 0; i < rows; ++i) {
                             const int y = (*labs)[static_cast<size_t>(i)];
                             if (!is_supervised(y, V)) continue;
                             const size_t off = static_cast<size_t>(i) * static_cast<size_t>(V);
                             const double l = (*lse)[static_cast<size_t>(i)];
                             for (int j = 0; j < V; ++j) {
                                 const double p = std::exp(L[off + static_cast<size_t>(j)] - l);
                                 dl[off + static_cast<size_t>(j)] += gs * (p - (j == y ? 1.0 : 0.0));
                             }
                         }
                     });
}

// ---- gather ----------------------------------------------------------------

// Row gather from an embedding table; gradient scatters into touched rows.
inline Var embed(Var table, const std::vector<int>& ids) {
    Graph& g = *table.graph();
    const Tensor& T = table.value();
    detail::require_matrix(T, "embed");
    const int V = T.dim(0), d = T.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= V) {
            throw IndexError("embed id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(V) + ")");
        }
    }
    const int N = static_cast<int>(ids.size());
    Tensor Y({N, d});
    for (int i = 0; i < N; ++i) {
        const double* src = T.data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * static_cast<size_t>(d);
        std::copy(src, src + d, Y.data() + static_cast<size_t>(i) * static_cast<size_t>(d));
    }
    int ti = table.idx();
    auto idv = std::make_shared<std::vector<int>>(ids);
    return g.make_op({ti}, std::move(Y), [ti, idv, d](Graph& gg, Graph::Node& self) {
        if (!gg.wants_grad(ti)) return;
        Tensor& dt = gg.grad_acc(ti);
        for (size_t i = 0; i < idv->size(); ++i) {
            double* dst = dt.data() + static_cast<size_t>((*idv)[i]) * static_cast<size_t>(d);
            const double* src = self.grad.data() + i * static_cast<size_t>(d);
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

// ---- sequence plumbing -----------------------------------------------------

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    Graph& g = *parts.front().graph();
    const int d = parts.front().value().dim(1);
    int rows = 0;
    std::vector<int> idxs;
    idxs.reserve(parts.size());
    for (const Var& p : parts) {
        detail::require_matrix(p.value(), "concat_rows");
        if (p.value().dim(1) != d) {
            throw ShapeError("concat_rows column mismatch: " + shape_str(p.value().shape()) +
                             " vs [*x" + std::to_string(d) + "]");
        }
        rows += p.value().dim(0);
        idxs.push_back(p.idx());
    }
    Tensor Y({rows, d});
    size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& t = p.value();
        std::copy(t.data(), t.data() + t.numel(), Y.data() + off);
        off += t.numel();
    }
    return g.make_op(idxs, std::move(Y), [idxs](Graph& gg, Graph::Node& self) {
        size_t off = 0;
        for (int pi : idxs) {
            const size_t n = gg.node(pi).value.numel();
            if (gg.wants_grad(pi)) {
                Tensor& dp = gg.grad_acc(pi);
                for (size_t i = 0; i < n; ++i) dp[i] += self.grad[off + i];
            }
            off += n;
        }
    });
}

inline Var slice_rows(Var a, int from, int to) {
    Graph& g = *a.graph();
    const Tensor& A = a.value();
    detail::require_matrix(A, "slice_rows");
    if (from < 0 || to > A.dim(0) || from > to) {
        throw IndexError("slice_rows [" + std::to_string(from) + ", " + std::to_string(to) +
                         ") out of range for " + shape_str(A.shape()));
    }
    const int d = A.dim(1);
    Tensor Y({to - from, d});
    std::copy(A.data() + static_cast<size_t>(from) * static_cast<size_t>(d),
              A.data() + static_cast<size_t>(to) * static_cast<size_t>(d), Y.data());
    int ai = a.idx();
    return g.make_op({ai}, std::move(Y), [ai, from, d](Graph& gg, Graph::Node& self) {
        if (!gg.wants_grad(ai)) return;
        Tensor& da = gg.grad_acc(ai);
        const size_t base = static_cast<size_t>(from) * static_cast<size_t>(d);
        for (size_t i = 0; i < self.grad.numel(); ++i) da[base + i] += self.grad[i];
    });
}

// ---- attention -------------------------------------------------------------

// Scaled dot-product multi-head attention over already-projected q/k/v.
// q: (Lq x d), k,v: (Lk x d), d divisible by heads. With causal=true
// (requires Lq == Lk) row i attends to keys 0..i only; probabilities beyond
// the diagonal are exact zeros, so causality holds bitwise.
inline Var attention(Var q, Var k, Var v, int heads, bool causal) {
    Graph& g = *q.graph();
    const Tensor& Q = q.value();
    const Tensor& K = k.value();
    const Tensor& V = v.value();
    detail::require_matrix(Q, "attention");
    detail::require_matrix(K, "attention");
    detail::require_matrix(V, "attention");
    const int d = Q.dim(1);
    if (K.dim(1) != d || V.dim(1) != d || K.dim(0) != V.dim(0)) {
        throw ShapeError("attention shape mismatch: q " + shape_str(Q.shape()) + ", k " +
                         shape_str(K.shape()) + ", v " + shape_str(V.shape()));
    }
    if (heads <= 0 || d % heads != 0) {
        throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    const int Lq = Q.dim(0), Lk = K.dim(0);
    if (Lk == 0) throw ContractError("attention: empty key set");
    if (causal && Lq != Lk) {
        throw ShapeError("causal attention requires square score matrix, got " +
                         std::to_string(Lq) + " queries vs " + std::to_string(Lk) + " keys");
    }
    const int dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // probs[h] is (Lq x Lk), retained for backward
    auto probs = std::make_shared<std::vector<Tensor>>();
    probs->reserve(static_cast<size_t>(heads));
    Tensor out({Lq, d});
    for (int h = 0; h < heads; ++h) {
        const int c0 = h * dh;
        Tensor P({Lq, Lk});
        for (int i = 0; i < Lq; ++i) {
            const int limit = causal ? i + 1 : Lk;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < limit; ++j) {
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += Q.at(i, c0 + c) * K.at(j, c0 + c);
                s *= inv_scale;
                P.at(i, j) = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (int j = 0; j < limit; ++j) {
                const double e = std::exp(P.at(i, j) - mx);
                P.at(i, j) = e;
                z += e;
            }
            const double inv_z = 1.0 / z;
            for (int j = 0; j < limit; ++j) P.at(i, j) *= inv_z;
            for (int j = limit; j < Lk; ++j) P.at(i, j) = 0.0;
            for (int c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (int j = 0; j < limit; ++j) acc += P.at(i, j) * V.at(j, c0 + c);
                out.at(i, c0 + c) = acc;
            }
        }
        probs->push_back(std::move(P));
    }

    int qi = q.idx(), ki = k.idx(), vi = v.idx();
    return g.make_op({qi, ki, vi}, std::move(out),
                     [qi, ki, vi, heads, dh, causal, inv_scale, probs](Graph& gg, Graph::Node& self) {
                         const Tensor& Q = gg.node(qi).value;
                         const Tensor& K = gg.node(ki).value;
                         const Tensor& V = gg.node(vi).value;
                         const int Lq = Q.dim(0), Lk = K.dim(0);
                         const bool wq = gg.wants_grad(qi), wk = gg.wants_grad(ki), wv = gg.wants_grad(vi);
                         for (int h = 0; h < heads; ++h) {
                             const int c0 = h * dh;
                             const Tensor& P = (*probs)[static_cast<size_t>(h)];
                             for (int i = 0; i < Lq; ++i) {
                                 const int limit = causal ? i + 1 : Lk;
                                 // dP = dO V^T per row; dS = P .* (dP - <dP, P>)
                                 double dot = 0.0;
                                 std::vector<double> dp(static_cast<size_t>(limit));
                                 for (int j = 0; j < limit; ++j) {
                                     double acc = 0.0;
                                     for (int c = 0; c < dh; ++c)
                                         acc += self.grad.at(i, c0 + c) * V.at(j, c0 + c);
                                     dp[static_cast<size_t>(j)] = acc;
                                     dot += acc * P.at(i, j);
                                 }
                                 if (wv) {
                                     Tensor& dv = gg.grad_acc(vi);
                                     for (int j = 0; j < limit; ++j) {
                                         const double pij = P.at(i, j);
                                         if (pij == 0.0) continue;
                                         for (int c = 0; c < dh; ++c)
                                             dv.at(j, c0 + c) += pij * self.grad.at(i, c0 + c);
                                     }
                                 }
                                 if (!wq && !wk) continue;
                                 for (int j = 0; j < limit; ++j) {
                                     const double ds =
                                         P.at(i, j) * (dp[static_cast<size_t>(j)] - dot) * inv_scale;
                                     if (ds == 0.0) continue;
                                     if (wq) {
                                         Tensor& dq = gg.grad_acc(qi);
                                         for (int c = 0; c < dh; ++c)
                                             dq.at(i, c0 + c) += ds * K.at(j, c0 + c);
                                     }
                                     if (wk) {
                                         Tensor& dk = gg.grad_acc(ki);
                                         for (int c = 0; c < dh; ++c)
                                             dk.at(j, c0 + c) += ds * Q.at(i, c0 + c);
                                     }
                                 }
                             }
                         }
                     });
}

// Affine helper: x W + b.
inline Var linear(Var x, Var w, Var b) { return add(matmul(x, w), b); }

} // namespace tinymm
