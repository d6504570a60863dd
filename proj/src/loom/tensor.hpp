#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace loom {

// Dense row-major float64 matrix. Everything numeric in the project (weights,
// activations, latents, rendered frames) lives in one of these.
struct Tensor {
    int nrows = 0;
    int ncols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c) : nrows(r), ncols(c), data(static_cast<size_t>(r) * c, 0.0) {
        if (r <= 0 || c <= 0) throw std::invalid_argument("tensor dims must be positive");
    }

    static Tensor zeros(int r, int c) { return Tensor(r, c); }
    static Tensor full(int r, int c, double v);
    static Tensor row_vector(std::initializer_list<double> xs);

    int rows() const { return nrows; }
    int cols() const { return ncols; }
    int64_t numel() const { return static_cast<int64_t>(nrows) * ncols; }

    double& at(int i, int j) { return data[static_cast<size_t>(i) * ncols + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * ncols + j]; }
    double* row(int i) { return data.data() + static_cast<size_t>(i) * ncols; }
    const double* row(int i) const { return data.data() + static_cast<size_t>(i) * ncols; }

    bool same_shape(const Tensor& o) const { return nrows == o.nrows && ncols == o.ncols; }
    bool all_finite() const;

    Tensor& operator+=(const Tensor& o);
    Tensor& operator*=(double s);
};

// Throws std::runtime_error naming `what` if any entry is NaN or infinite.
void require_finite(const Tensor& t, const std::string& what);

// Max absolute difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

// True when every entry is bitwise identical (not just numerically equal).
bool bitwise_equal(const Tensor& a, const Tensor& b);

// FNV-1a over the raw little-endian bytes of the entries, row-major order.
uint64_t tensor_checksum(const Tensor& t);
uint64_t fnv1a(const void* bytes, size_t n, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace loom
