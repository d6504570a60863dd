#include "loom/kernels.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace loom::kernels {

// The parallel kernels split work so that every output element is still
// reduced in the exact order the serial code uses; threads never share an
// accumulator. That keeps serial and parallel results bitwise equal, which
// the tests assert directly.

void matmul_ref(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; i++) {
        for (int j = 0; j < n; j++) {
            double acc = 0.0;
            for (int kk = 0; kk < k; kk++) acc += A[size_t(i) * k + kk] * B[size_t(kk) * n + j];
            C[size_t(i) * n + j] = acc;
        }
    }
}

void matmul(const double* A, const double* B, double* C, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; i++) {
        double* c = C + size_t(i) * n;
        std::memset(c, 0, sizeof(double) * n);
        const double* a = A + size_t(i) * k;
        for (int kk = 0; kk < k; kk++) {
            const double aik = a[kk];
            const double* b = B + size_t(kk) * n;
            for (int j = 0; j < n; j++) c[j] += aik * b[j];
        }
    }
}

void matmul_nt_ref(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; i++) {
        for (int j = 0; j < n; j++) {
            double acc = 0.0;
            for (int kk = 0; kk < k; kk++) acc += A[size_t(i) * k + kk] * B[size_t(j) * k + kk];
            C[size_t(i) * n + j] = acc;
        }
    }
}

void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; i++) {
        const double* a = A + size_t(i) * k;
        double* c = C + size_t(i) * n;
        for (int j = 0; j < n; j++) {
            const double* b = B + size_t(j) * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; kk++) acc += a[kk] * b[kk];
            c[j] = acc;
        }
    }
}

void matmul_acc(const double* A, const double* B, double* C, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; i++) {
        double* c = C + size_t(i) * n;
        const double* a = A + size_t(i) * k;
        for (int kk = 0; kk < k; kk++) {
            const double aik = a[kk];
            const double* b = B + size_t(kk) * n;
            for (int j = 0; j < n; j++) c[j] += aik * b[j];
        }
    }
}

void matmul_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; i++) {
        const double* a = A + size_t(i) * k;
        double* c = C + size_t(i) * n;
        for (int j = 0; j < n; j++) {
            const double* b = B + size_t(j) * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; kk++) acc += a[kk] * b[kk];
            c[j] += acc;
        }
    }
}

void matmul_tn_acc_ref(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int j = 0; j < k; j++) {
        double* c = C + size_t(j) * n;
        for (int i = 0; i < m; i++) {
            const double aij = A[size_t(i) * k + j];
            const double* b = B + size_t(i) * n;
            for (int jj = 0; jj < n; jj++) c[jj] += aij * b[jj];
        }
    }
}

void matmul_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int j = 0; j < k; j++) {
        double* c = C + size_t(j) * n;
        for (int i = 0; i < m; i++) {
            const double aij = A[size_t(i) * k + j];
            const double* b = B + size_t(i) * n;
            for (int jj = 0; jj < n; jj++) c[jj] += aij * b[jj];
        }
    }
}

namespace {

// one (query row, head) cell of masked attention
inline void attend_row_head(const double* Q, const double* K, const double* V, int d, int dh,
                            int h, int i, const MaskRows& mask, double* out, double* wrow) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int len = mask.row_len(i);
    const int32_t* keys = mask.row(i);
    const double* q = Q + size_t(i) * d + size_t(h) * dh;

    double mx = -1e300;
    for (int s = 0; s < len; s++) {
        const double* kr = K + size_t(keys[s]) * d + size_t(h) * dh;
        double acc = 0.0;
        for (int c = 0; c < dh; c++) acc += q[c] * kr[c];
        wrow[s] = acc * scale;
        if (wrow[s] > mx) mx = wrow[s];
    }
    double denom = 0.0;
    for (int s = 0; s < len; s++) {
        wrow[s] = std::exp(wrow[s] - mx);
        denom += wrow[s];
    }
    double* o = out + size_t(i) * d + size_t(h) * dh;
    for (int c = 0; c < dh; c++) o[c] = 0.0;
    for (int s = 0; s < len; s++) {
        wrow[s] /= denom;
        const double* vr = V + size_t(keys[s]) * d + size_t(h) * dh;
        const double w = wrow[s];
        for (int c = 0; c < dh; c++) o[c] += w * vr[c];
    }
}

}  // namespace

void attention_fwd_ref(const double* Q, const double* K, const double* V, int d, int heads,
                       const MaskRows& mask, double* out, double* wbuf) {
    const int dh = d / heads;
    const size_t nw = mask.idx.size();
    for (int h = 0; h < heads; h++)
        for (int i = 0; i < mask.nq; i++)
            attend_row_head(Q, K, V, d, dh, h, i, mask, out, wbuf + h * nw + mask.off[i]);
}

void attention_fwd(const double* Q, const double* K, const double* V, int d, int heads,
                   const MaskRows& mask, double* out, double* wbuf) {
    const int dh = d / heads;
    const size_t nw = mask.idx.size();
#pragma omp parallel for schedule(static)
    for (int i = 0; i < mask.nq; i++)
        for (int h = 0; h < heads; h++)
            attend_row_head(Q, K, V, d, dh, h, i, mask, out, wbuf + h * nw + mask.off[i]);
}

void attention_bwd(const double* Q, const double* K, const double* V, int d, int heads,
                   const MaskRows& mask, const double* wbuf, const double* dout,
                   double* dQ, double* dK, double* dV) {
    const int dh = d / heads;
    const size_t nw = mask.idx.size();
    // parallel over heads: each head touches a disjoint column slice of the
    // gradient buffers, so the key/value accumulation below cannot race
#pragma omp parallel for schedule(static)
    for (int h = 0; h < heads; h++) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> dw;
        for (int i = 0; i < mask.nq; i++) {
            const int len = mask.row_len(i);
            const int32_t* keys = mask.row(i);
            const double* w = wbuf + h * nw + mask.off[i];
            const double* go = dout + size_t(i) * d + size_t(h) * dh;
            const double* q = Q + size_t(i) * d + size_t(h) * dh;

            dw.assign(len, 0.0);
            double mix = 0.0;
            for (int s = 0; s < len; s++) {
                const double* vr = V + size_t(keys[s]) * d + size_t(h) * dh;
                double* gv = dV + size_t(keys[s]) * d + size_t(h) * dh;
                double acc = 0.0;
                for (int c = 0; c < dh; c++) {
                    acc += go[c] * vr[c];
                    gv[c] += w[s] * go[c];
                }
                dw[s] = acc;
                mix += w[s] * acc;
            }
            double* gq = dQ + size_t(i) * d + size_t(h) * dh;
            for (int s = 0; s < len; s++) {
                const double ds = w[s] * (dw[s] - mix) * scale;
                const double* kr = K + size_t(keys[s]) * d + size_t(h) * dh;
                double* gk = dK + size_t(keys[s]) * d + size_t(h) * dh;
                for (int c = 0; c < dh; c++) {
                    gq[c] += ds * kr[c];
                    gk[c] += ds * q[c];
                }
            }
        }
    }
}

void avg_pool_rows_ref(const double* in, int l, int d, int window, double* out) {
    if (window < 1) throw std::invalid_argument("pool window must be >= 1");
    const int w = (l + window - 1) / window;
    for (int j = 0; j < w; j++) {
        const int lo = j * window;
        const int hi = std::min(l, lo + window);
        double* o = out + size_t(j) * d;
        std::memset(o, 0, sizeof(double) * d);
        for (int r = lo; r < hi; r++) {
            const double* src = in + size_t(r) * d;
            for (int c = 0; c < d; c++) o[c] += src[c];
        }
        const double inv = 1.0 / (hi - lo);
        for (int c = 0; c < d; c++) o[c] *= inv;
    }
}

void avg_pool_rows(const double* in, int l, int d, int window, double* out) {
    if (window < 1) throw std::invalid_argument("pool window must be >= 1");
    const int w = (l + window - 1) / window;
#pragma omp parallel for schedule(static)
    for (int j = 0; j < w; j++) {
        const int lo = j * window;
        const int hi = std::min(l, lo + window);
        double* o = out + size_t(j) * d;
        std::memset(o, 0, sizeof(double) * d);
        for (int r = lo; r < hi; r++) {
            const double* src = in + size_t(r) * d;
            for (int c = 0; c < d; c++) o[c] += src[c];
        }
        const double inv = 1.0 / (hi - lo);
        for (int c = 0; c < d; c++) o[c] *= inv;
    }
}

}  // namespace loom::kernels
