#pragma once

#include <cstdint>
#include <vector>

namespace loom::kernels {

// Ragged per-row visibility for masked attention: row i of the query side may
// attend exactly to key indices idx[off[i] .. off[i+1]), stored ascending.
struct MaskRows {
    int nq = 0;
    int nk = 0;
    std::vector<int32_t> off;  // nq + 1 entries
    std::vector<int32_t> idx;

    int row_len(int i) const { return off[i + 1] - off[i]; }
    const int32_t* row(int i) const { return idx.data() + off[i]; }
};

// Matrix products, row-major buffers. The un-suffixed versions are the
// OpenMP-parallel kernels used everywhere; the _ref twins are plain serial
// loops kept as the comparison oracle. Both compute each output element with
// the same summation order, so results are bitwise identical.

// C[m x n] = A[m x k] * B[k x n]
void matmul(const double* A, const double* B, double* C, int m, int k, int n);
void matmul_ref(const double* A, const double* B, double* C, int m, int k, int n);

// C[m x n] = A[m x k] * B[n x k]^T   (linear layer with row-major weights)
void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n);
void matmul_nt_ref(const double* A, const double* B, double* C, int m, int k, int n);

// C[m x n] += A[m x k] * B[k x n]
void matmul_acc(const double* A, const double* B, double* C, int m, int k, int n);

// C[m x n] += A[m x k] * B[n x k]^T
void matmul_nt_acc(const double* A, const double* B, double* C, int m, int k, int n);

// C[k x n] += A[m x k]^T * B[m x n]   (weight gradients)
void matmul_tn_acc(const double* A, const double* B, double* C, int m, int k, int n);
void matmul_tn_acc_ref(const double* A, const double* B, double* C, int m, int k, int n);

// Multi-head scaled dot-product attention restricted to the mask.
// Q is [nq x d], K and V are [nk x d], d splits evenly into `heads`.
// out is [nq x d]. wbuf receives the post-softmax weights, laid out as
// heads * idx.size() doubles: head-major, then the ragged row layout of the
// mask. Rows with an empty allowed list are rejected by the caller (layout
// guarantees at least one key per row); here they would divide by zero.
void attention_fwd(const double* Q, const double* K, const double* V, int d, int heads,
                   const MaskRows& mask, double* out, double* wbuf);
void attention_fwd_ref(const double* Q, const double* K, const double* V, int d, int heads,
                       const MaskRows& mask, double* out, double* wbuf);

// Backward pass: accumulates into dQ, dK, dV given saved weights.
void attention_bwd(const double* Q, const double* K, const double* V, int d, int heads,
                   const MaskRows& mask, const double* wbuf, const double* dout,
                   double* dQ, double* dK, double* dV);

// out[w x d]: row j = mean of in rows [j*window, min((j+1)*window, l)).
// Trailing partial windows average over the rows actually present.
void avg_pool_rows(const double* in, int l, int d, int window, double* out);
void avg_pool_rows_ref(const double* in, int l, int d, int window, double* out);

}  // namespace loom::kernels
