#include "loom/autodiff.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace loom {

int ParamSet::add(const std::string& name, Tensor init) {
    if (has(name)) throw std::invalid_argument("duplicate parameter: " + name);
    require_finite(init, "init of " + name);
    int id = static_cast<int>(names_.size());
    index_[name] = id;
    names_.push_back(name);
    grads_.push_back(Tensor::zeros(init.rows(), init.cols()));
    values_.push_back(std::move(init));
    return id;
}

int ParamSet::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

void ParamSet::zero_grads() {
    for (auto& g : grads_) std::fill(g.data.begin(), g.data.end(), 0.0);
}

int64_t ParamSet::entry_count() const {
    int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
}

uint64_t ParamSet::checksum(const std::vector<std::string>& which) const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& name : which) {
        const Tensor& t = values_[index_of(name)];
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
    }
    return h;
}

uint64_t ParamSet::checksum_prefix(const std::string& prefix) const {
    return checksum(names_with_prefix(prefix));
}

std::vector<std::string> ParamSet::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& n : names_)
        if (n.rfind(prefix, 0) == 0) out.push_back(n);
    return out;
}

Graph::Ref Graph::push(Tensor val, bool needs_grad, std::function<void(Graph&)> back) {
    Node n;
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Ref>(nodes_.size() - 1);
}

Tensor& Graph::grad_buf(Ref r) {
    Node& n = nodes_[r];
    if (!n.grad_alloc) {
        n.grad = Tensor::zeros(n.val.rows(), n.val.cols());
        n.grad_alloc = true;
    }
    return n.grad;
}

Graph::Ref Graph::constant(Tensor t) { return push(std::move(t), false, nullptr); }

Graph::Ref Graph::param(const std::string& name) {
    if (!ps_) throw std::logic_error("graph has no parameter set attached");
    int pi = ps_->index_of(name);
    Ref r = push(ps_->value_at(pi), true, nullptr);
    nodes_[r].param = pi;
    nodes_[r].back = [r, pi](Graph& g) {
        Tensor& dst = g.ps_->grad_at(pi);
        const Tensor& src = g.nodes_[r].grad;
        for (size_t i = 0; i < dst.data.size(); i++) dst.data[i] += src.data[i];
    };
    return r;
}

double Graph::scalar(Ref r) const {
    const Tensor& t = nodes_[r].val;
    if (t.numel() != 1) throw std::logic_error("scalar() on non-scalar node");
    return t.data[0];
}

Graph::Ref Graph::matmul(Ref a, Ref b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    if (A.cols() != B.rows()) throw std::invalid_argument("matmul shape mismatch");
    Tensor C(A.rows(), B.cols());
    kernels::matmul(A.data.data(), B.data.data(), C.data.data(), A.rows(), A.cols(), B.cols());
    bool ng = wants(a) || wants(b);
    Ref r = push(std::move(C), ng, nullptr);
    nodes_[r].back = [r, a, b](Graph& g) {
        const Tensor& dC = g.nodes_[r].grad;
        const Tensor& A2 = g.nodes_[a].val;
        const Tensor& B2 = g.nodes_[b].val;
        int m = A2.rows(), k = A2.cols(), n = B2.cols();
        if (g.wants(a)) {
            // dA += dC * B^T
            Tensor& dA = g.grad_buf(a);
            kernels::matmul_nt_acc(dC.data.data(), B2.data.data(), dA.data.data(), m, n, k);
        }
        if (g.wants(b)) {
            // dB += A^T * dC
            Tensor& dB = g.grad_buf(b);
            kernels::matmul_tn_acc(A2.data.data(), dC.data.data(), dB.data.data(), m, k, n);
        }
    };
    return r;
}

Graph::Ref Graph::matmul_nt(Ref a, Ref b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    if (A.cols() != B.cols()) throw std::invalid_argument("matmul_nt shape mismatch");
    Tensor C(A.rows(), B.rows());
    kernels::matmul_nt(A.data.data(), B.data.data(), C.data.data(), A.rows(), A.cols(), B.rows());
    bool ng = wants(a) || wants(b);
    Ref r = push(std::move(C), ng, nullptr);
    nodes_[r].back = [r, a, b](Graph& g) {
        const Tensor& dC = g.nodes_[r].grad;
        const Tensor& A2 = g.nodes_[a].val;
        const Tensor& B2 = g.nodes_[b].val;
        int m = A2.rows(), k = A2.cols(), n = B2.rows();
        if (g.wants(a)) {
            // dA += dC * B
            Tensor& dA = g.grad_buf(a);
            kernels::matmul_acc(dC.data.data(), B2.data.data(), dA.data.data(), m, n, k);
        }
        if (g.wants(b)) {
            // dB += dC^T * A
            Tensor& dB = g.grad_buf(b);
            kernels::matmul_tn_acc(dC.data.data(), A2.data.data(), dB.data.data(), m, n, k);
        }
    };
    return r;
}

Graph::Ref Graph::add(Ref a, Ref b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    if (!A.same_shape(B)) throw std::invalid_argument("add shape mismatch");
    Tensor C = A;
    C += B;
    bool ng = wants(a) || wants(b);
    Ref r = push(std::move(C), ng, nullptr);
    nodes_[r].back = [r, a, b](Graph& g) {
        const Tensor& dC = g.nodes_[r].grad;
        for (Ref s : {a, b}) {
            if (!g.wants(s)) continue;
            Tensor& ds = g.grad_buf(s);
            for (size_t i = 0; i < ds.data.size(); i++) ds.data[i] += dC.data[i];
        }
    };
    return r;
}

Graph::Ref Graph::sub(Ref a, Ref b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    if (!A.same_shape(B)) throw std::invalid_argument("sub shape mismatch");
    Tensor C = A;
    for (size_t i = 0; i < C.data.size(); i++) C.data[i] -= B.data[i];
    bool ng = wants(a) || wants(b);
    Ref r = push(std::move(C), ng, nullptr);
    nodes_[r].back = [r, a, b](Graph& g) {
        const Tensor& dC = g.nodes_[r].grad;
        if (g.wants(a)) {
            Tensor& da = g.grad_buf(a);
            for (size_t i = 0; i < da.data.size(); i++) da.data[i] += dC.data[i];
        }
        if (g.wants(b)) {
            Tensor& db = g.grad_buf(b);
            for (size_t i = 0; i < db.data.size(); i++) db.data[i] -= dC.data[i];
        }
    };
    return r;
}

Graph::Ref Graph::add_row_broadcast(Ref a, Ref row) {
    const Tensor& A = nodes_[a].val;
    const Tensor& R = nodes_[row].val;
    if (R.rows() != 1 || R.cols() != A.cols())
        throw std::invalid_argument("add_row_broadcast shape mismatch");
    Tensor C = A;
    for (int i = 0; i < C.rows(); i++)
        for (int j = 0; j < C.cols(); j++) C.at(i, j) += R.at(0, j);
    bool ng = wants(a) || wants(row);
    Ref r = push(std::move(C), ng, nullptr);
    nodes_[r].back = [r, a, row](Graph& g) {
        const Tensor& dC = g.nodes_[r].grad;
        if (g.wants(a)) {
            Tensor& da = g.grad_buf(a);
            for (size_t i = 0; i < da.data.size(); i++) da.data[i] += dC.data[i];
        }
        if (g.wants(row)) {
            Tensor& dr = g.grad_buf(row);
            for (int i = 0; i < dC.rows(); i++)
                for (int j = 0; j < dC.cols(); j++) dr.at(0, j) += dC.at(i, j);
        }
    };
    return r;
}

Graph::Ref Graph::scale(Ref a, double s) {
    Tensor C = nodes_[a].val;
    C *= s;
    Ref r = push(std::move(C), wants(a), nullptr);
    nodes_[r].back = [r, a, s](Graph& g) {
        if (!g.wants(a)) return;
        const Tensor& dC = g.nodes_[r].grad;
        Tensor& da = g.grad_buf(a);
        for (size_t i = 0; i < da.data.size(); i++) da.data[i] += s * dC.data[i];
    };
    return r;
}

Graph::Ref Graph::gelu(Ref a) {
    // tanh form of gelu, same as the usual transformer approximation
    static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    const Tensor& X = nodes_[a].val;
    Tensor Y(X.rows(), X.cols());
    for (size_t i = 0; i < X.data.size(); i++) {
        double x = X.data[i];
        double t = std::tanh(kC * (x + kA * x * x * x));
        Y.data[i] = 0.5 * x * (1.0 + t);
    }
    Ref r = push(std::move(Y), wants(a), nullptr);
    nodes_[r].back = [r, a](Graph& g) {
        if (!g.wants(a)) return;
        const Tensor& dY = g.nodes_[r].grad;
        const Tensor& X2 = g.nodes_[a].val;
        Tensor& dX = g.grad_buf(a);
        for (size_t i = 0; i < X2.data.size(); i++) {
            double x = X2.data[i];
            double t = std::tanh(kC * (x + kA * x * x * x));
            double du = kC * (1.0 + 3.0 * kA * x * x);
            double dg = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            dX.data[i] += dg * dY.data[i];
        }
    };
    return r;
}

Graph::Ref Graph::rmsnorm(Ref x, Ref gain) {
    static constexpr double kEps = 1e-8;
    const Tensor& X = nodes_[x].val;
    const Tensor& G = nodes_[gain].val;
    if (G.rows() != 1 || G.cols() != X.cols()) throw std::invalid_argument("rmsnorm gain shape");
    Tensor Y(X.rows(), X.cols());
    auto rms = std::make_shared<std::vector<double>>(X.rows());
    for (int i = 0; i < X.rows(); i++) {
        double ss = 0.0;
        for (int j = 0; j < X.cols(); j++) ss += X.at(i, j) * X.at(i, j);
        double r = std::sqrt(ss / X.cols() + kEps);
        (*rms)[i] = r;
        for (int j = 0; j < X.cols(); j++) Y.at(i, j) = G.at(0, j) * X.at(i, j) / r;
    }
    bool ng = wants(x) || wants(gain);
    Ref r = push(std::move(Y), ng, nullptr);
    nodes_[r].back = [r, x, gain, rms](Graph& g) {
        const Tensor& dY = g.nodes_[r].grad;
        const Tensor& X2 = g.nodes_[x].val;
        const Tensor& G2 = g.nodes_[gain].val;
        const int n = X2.cols();
        if (g.wants(x)) {
            Tensor& dX = g.grad_buf(x);
            for (int i = 0; i < X2.rows(); i++) {
                const double ri = (*rms)[i];
                double dot = 0.0;
                for (int j = 0; j < n; j++) dot += dY.at(i, j) * G2.at(0, j) * X2.at(i, j);
                for (int j = 0; j < n; j++)
                    dX.at(i, j) += dY.at(i, j) * G2.at(0, j) / ri -
                                   X2.at(i, j) * dot / (n * ri * ri * ri);
            }
        }
        if (g.wants(gain)) {
            Tensor& dG = g.grad_buf(gain);
            for (int i = 0; i < X2.rows(); i++) {
                const double ri = (*rms)[i];
                for (int j = 0; j < n; j++) dG.at(0, j) += dY.at(i, j) * X2.at(i, j) / ri;
            }
        }
    };
    return r;
}

Graph::Ref Graph::concat_rows(const std::vector<Ref>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int cols = nodes_[parts[0]].val.cols();
    int rows = 0;
    bool ng = false;
    for (Ref p : parts) {
        if (nodes_[p].val.cols() != cols) throw std::invalid_argument("concat_rows width mismatch");
        rows += nodes_[p].val.rows();
        ng = ng || wants(p);
    }
    Tensor C(rows, cols);
    int at = 0;
    for (Ref p : parts) {
        const Tensor& P = nodes_[p].val;
        std::copy(P.data.begin(), P.data.end(), C.data.begin() + size_t(at) * cols);
        at += P.rows();
    }
    Ref r = push(std::move(C), ng, nullptr);
    nodes_[r].back = [r, parts](Graph& g) {
        const Tensor& dC = g.nodes_[r].grad;
        int row0 = 0;
        for (Ref p : parts) {
            const int pr = g.nodes_[p].val.rows();
            if (g.wants(p)) {
                Tensor& dp = g.grad_buf(p);
                for (size_t i = 0; i < dp.data.size(); i++)
                    dp.data[i] += dC.data[size_t(row0) * dC.cols() + i];
            }
            row0 += pr;
        }
    };
    return r;
}

Graph::Ref Graph::slice_rows(Ref a, int r0, int r1) {
    const Tensor& A = nodes_[a].val;
    if (r0 < 0 || r1 > A.rows() || r0 >= r1) throw std::invalid_argument("slice_rows range");
    Tensor C(r1 - r0, A.cols());
    std::copy(A.data.begin() + size_t(r0) * A.cols(), A.data.begin() + size_t(r1) * A.cols(),
              C.data.begin());
    Ref r = push(std::move(C), wants(a), nullptr);
    nodes_[r].back = [r, a, r0](Graph& g) {
        if (!g.wants(a)) return;
        const Tensor& dC = g.nodes_[r].grad;
        Tensor& da = g.grad_buf(a);
        for (size_t i = 0; i < dC.data.size(); i++)
            da.data[size_t(r0) * da.cols() + i] += dC.data[i];
    };
    return r;
}

Graph::Ref Graph::gather_rows(Ref a, std::vector<int> rows) {
    const Tensor& A = nodes_[a].val;
    Tensor C(static_cast<int>(rows.size()), A.cols());
    for (size_t i = 0; i < rows.size(); i++) {
        if (rows[i] < 0 || rows[i] >= A.rows()) throw std::invalid_argument("gather_rows index");
        std::copy(A.row(rows[i]), A.row(rows[i]) + A.cols(), C.row(static_cast<int>(i)));
    }
    Ref r = push(std::move(C), wants(a), nullptr);
    auto rws = std::make_shared<std::vector<int>>(std::move(rows));
    nodes_[r].back = [r, a, rws](Graph& g) {
        if (!g.wants(a)) return;
        const Tensor& dC = g.nodes_[r].grad;
        Tensor& da = g.grad_buf(a);
        for (size_t i = 0; i < rws->size(); i++) {
            double* dst = da.row((*rws)[i]);
            const double* src = dC.row(static_cast<int>(i));
            for (int j = 0; j < dC.cols(); j++) dst[j] += src[j];
        }
    };
    return r;
}

Graph::Ref Graph::assemble_rows(const std::vector<std::pair<Ref, int>>& picks) {
    if (picks.empty()) throw std::invalid_argument("assemble_rows: empty");
    int cols = nodes_[picks[0].first].val.cols();
    bool ng = false;
    Tensor C(static_cast<int>(picks.size()), cols);
    for (size_t i = 0; i < picks.size(); i++) {
        const Tensor& S = nodes_[picks[i].first].val;
        if (S.cols() != cols) throw std::invalid_argument("assemble_rows width mismatch");
        if (picks[i].second < 0 || picks[i].second >= S.rows())
            throw std::invalid_argument("assemble_rows index");
        std::copy(S.row(picks[i].second), S.row(picks[i].second) + cols,
                  C.row(static_cast<int>(i)));
        ng = ng || wants(picks[i].first);
    }
    Ref r = push(std::move(C), ng, nullptr);
    auto pk = std::make_shared<std::vector<std::pair<Ref, int>>>(picks);
    nodes_[r].back = [r, pk](Graph& g) {
        const Tensor& dC = g.nodes_[r].grad;
        for (size_t i = 0; i < pk->size(); i++) {
            Ref src = (*pk)[i].first;
            if (!g.wants(src)) continue;
            double* dst = g.grad_buf(src).row((*pk)[i].second);
            const double* row = dC.row(static_cast<int>(i));
            for (int j = 0; j < dC.cols(); j++) dst[j] += row[j];
        }
    };
    return r;
}

Graph::Ref Graph::attention(Ref q, Ref k, Ref v, kernels::MaskRows mask, int heads) {
    const Tensor& Q = nodes_[q].val;
    const Tensor& K = nodes_[k].val;
    const Tensor& V = nodes_[v].val;
    const int d = Q.cols();
    if (K.cols() != d || V.cols() != d) throw std::invalid_argument("attention width mismatch");
    if (d % heads != 0) throw std::invalid_argument("attention: heads must divide width");
    if (mask.nq != Q.rows() || mask.nk != K.rows())
        throw std::invalid_argument("attention mask size mismatch");
    for (int i = 0; i < mask.nq; i++)
        if (mask.row_len(i) <= 0) throw std::invalid_argument("fully masked row");

    Tensor out(Q.rows(), d);
    auto wbuf = std::make_shared<std::vector<double>>(size_t(heads) * mask.idx.size());
    auto mk = std::make_shared<kernels::MaskRows>(std::move(mask));
    kernels::attention_fwd(Q.data.data(), K.data.data(), V.data.data(), d, heads, *mk,
                           out.data.data(), wbuf->data());
    bool ng = wants(q) || wants(k) || wants(v);
    Ref r = push(std::move(out), ng, nullptr);
    nodes_[r].back = [r, q, k, v, mk, wbuf, d, heads](Graph& g) {
        const Tensor& dO = g.nodes_[r].grad;
        // the kernel accumulates into all three; route through scratch for
        // inputs that do not need gradient
        Tensor scratchQ, scratchK, scratchV;
        double* dq;
        double* dk;
        double* dv;
        if (g.wants(q)) {
            dq = g.grad_buf(q).data.data();
        } else {
            scratchQ = Tensor::zeros(g.nodes_[q].val.rows(), d);
            dq = scratchQ.data.data();
        }
        if (g.wants(k)) {
            dk = g.grad_buf(k).data.data();
        } else {
            scratchK = Tensor::zeros(g.nodes_[k].val.rows(), d);
            dk = scratchK.data.data();
        }
        if (g.wants(v)) {
            dv = g.grad_buf(v).data.data();
        } else {
            scratchV = Tensor::zeros(g.nodes_[v].val.rows(), d);
            dv = scratchV.data.data();
        }
        kernels::attention_bwd(g.nodes_[q].val.data.data(), g.nodes_[k].val.data.data(),
                               g.nodes_[v].val.data.data(), d, heads, *mk, wbuf->data(),
                               dO.data.data(), dq, dk, dv);
    };
    return r;
}

Graph::Ref Graph::cross_entropy_rows(Ref logits, std::vector<int> targets) {
    const Tensor& Z = nodes_[logits].val;
    if (static_cast<int>(targets.size()) != Z.rows())
        throw std::invalid_argument("cross_entropy_rows: one target per row required");
    int cnt = 0;
    double total = 0.0;
    for (int i = 0; i < Z.rows(); i++) {
        int t = targets[i];
        if (t < 0) continue;
        if (t >= Z.cols()) throw std::invalid_argument("cross_entropy_rows: target out of range");
        double mx = Z.at(i, 0);
        for (int j = 1; j < Z.cols(); j++) mx = std::max(mx, Z.at(i, j));
        double se = 0.0;
        for (int j = 0; j < Z.cols(); j++) se += std::exp(Z.at(i, j) - mx);
        total += mx + std::log(se) - Z.at(i, t);
        cnt++;
    }
    if (cnt == 0) throw std::invalid_argument("cross_entropy_rows: no targets");
    Tensor L(1, 1);
    L.data[0] = total / cnt;
    Ref r = push(std::move(L), wants(logits), nullptr);
    auto tg = std::make_shared<std::vector<int>>(std::move(targets));
    nodes_[r].back = [r, logits, tg, cnt](Graph& g) {
        if (!g.wants(logits)) return;
        const double dl = g.nodes_[r].grad.data[0] / cnt;
        const Tensor& Z2 = g.nodes_[logits].val;
        Tensor& dZ = g.grad_buf(logits);
        for (int i = 0; i < Z2.rows(); i++) {
            int t = (*tg)[i];
            if (t < 0) continue;
            double mx = Z2.at(i, 0);
            for (int j = 1; j < Z2.cols(); j++) mx = std::max(mx, Z2.at(i, j));
            double se = 0.0;
            for (int j = 0; j < Z2.cols(); j++) se += std::exp(Z2.at(i, j) - mx);
            for (int j = 0; j < Z2.cols(); j++) {
                double p = std::exp(Z2.at(i, j) - mx) / se;
                dZ.at(i, j) += dl * (p - (j == t ? 1.0 : 0.0));
            }
        }
    };
    return r;
}

Graph::Ref Graph::mse(Ref pred, Ref target) {
    const Tensor& P = nodes_[pred].val;
    const Tensor& T = nodes_[target].val;
    if (!P.same_shape(T)) throw std::invalid_argument("mse shape mismatch");
    double total = 0.0;
    for (size_t i = 0; i < P.data.size(); i++) {
        double e = P.data[i] - T.data[i];
        total += e * e;
    }
    Tensor L(1, 1);
    L.data[0] = total / P.numel();
    bool ng = wants(pred) || wants(target);
    Ref r = push(std::move(L), ng, nullptr);
    nodes_[r].back = [r, pred, target](Graph& g) {
        const double dl = g.nodes_[r].grad.data[0];
        const Tensor& P2 = g.nodes_[pred].val;
        const Tensor& T2 = g.nodes_[target].val;
        const double s = 2.0 * dl / P2.numel();
        if (g.wants(pred)) {
            Tensor& dP = g.grad_buf(pred);
            for (size_t i = 0; i < P2.data.size(); i++)
                dP.data[i] += s * (P2.data[i] - T2.data[i]);
        }
        if (g.wants(target)) {
            Tensor& dT = g.grad_buf(target);
            for (size_t i = 0; i < P2.data.size(); i++)
                dT.data[i] -= s * (P2.data[i] - T2.data[i]);
        }
    };
    return r;
}

Graph::Ref Graph::mean_of(const std::vector<Ref>& scalars) {
    if (scalars.empty()) throw std::invalid_argument("mean_of: empty");
    double total = 0.0;
    bool ng = false;
    for (Ref s : scalars) {
        total += scalar(s);
        ng = ng || wants(s);
    }
    Tensor L(1, 1);
    L.data[0] = total / scalars.size();
    Ref r = push(std::move(L), ng, nullptr);
    auto xs = std::make_shared<std::vector<Ref>>(scalars);
    nodes_[r].back = [r, xs](Graph& g) {
        const double d = g.nodes_[r].grad.data[0] / xs->size();
        for (Ref s : *xs) {
            if (!g.wants(s)) continue;
            g.grad_buf(s).data[0] += d;
        }
    };
    return r;
}

void Graph::backward(Ref loss) {
    if (nodes_[loss].val.numel() != 1) throw std::logic_error("backward: loss must be scalar");
    if (!nodes_[loss].needs_grad) return;  // nothing reaches a parameter
    grad_buf(loss).data[0] = 1.0;
    for (Ref r = loss; r >= 0; r--) {
        Node& n = nodes_[r];
        if (!n.needs_grad || !n.grad_alloc || !n.back) continue;
        n.back(*this);
    }
}

}  // namespace loom
