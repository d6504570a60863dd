#include "loom/tensor.hpp"

#include <cmath>
#include <cstring>

namespace loom {

Tensor Tensor::full(int r, int c, double v) {
    Tensor t(r, c);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::row_vector(std::initializer_list<double> xs) {
    Tensor t(1, static_cast<int>(xs.size()));
    std::copy(xs.begin(), xs.end(), t.data.begin());
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor& Tensor::operator+=(const Tensor& o) {
    if (!same_shape(o)) throw std::invalid_argument("tensor shape mismatch in +=");
    for (size_t i = 0; i < data.size(); i++) data[i] += o.data[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : data) v *= s;
    return *this;
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) throw std::runtime_error("non-finite values in " + what);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("tensor shape mismatch in max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); i++) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

uint64_t fnv1a(const void* bytes, size_t n, uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t tensor_checksum(const Tensor& t) {
    // Entries are serialized little-endian; on this target that is the native
    // layout, so hashing the buffer directly matches the on-disk convention.
    return fnv1a(t.data.data(), t.data.size() * sizeof(double));
}

}  // namespace loom
