#include "loom/membank.hpp"

#include <limits>
#include <stdexcept>

#include "loom/kernels.hpp"

namespace loom {

MemoryBank::MemoryBank(int l, int d, int capacity) : l_(l), d_(d), capacity_(capacity) {
    if (l <= 0 || d <= 0) throw std::invalid_argument("memory bank dims must be positive");
    if (capacity < 0) throw std::invalid_argument("memory bank capacity must be >= 0");
}

void MemoryBank::push(const Tensor& feature, int frame_index) {
    if (feature.rows() != l_ || feature.cols() != d_)
        throw std::invalid_argument("memory bank: feature shape mismatch");
    if (!store_.empty() && frame_index <= store_.back().frame_index)
        throw std::invalid_argument("memory bank: frame indices must increase");
    require_finite(feature, "memory bank feature");
    if (capacity_ == 0) return;
    store_.push_back({frame_index, feature});
    if (static_cast<int>(store_.size()) > capacity_) store_.pop_front();
}

const FrameFeature& MemoryBank::raw(int lag) const {
    if (lag < 1 || lag > size()) throw std::out_of_range("memory bank lag out of range");
    return store_[store_.size() - lag];
}

std::vector<PooledFeature> MemoryBank::pooled_history(int depth, int lambda) const {
    if (lambda < 2) throw std::invalid_argument("decay factor must exceed 1");
    if (depth < 0) throw std::invalid_argument("history depth must be >= 0");
    std::vector<PooledFeature> out;
    const int take = std::min(depth, size());
    int64_t window = 1;
    for (int k = 1; k <= take; k++) {
        const FrameFeature& src = store_[store_.size() - k];
        const int w = static_cast<int>(std::min<int64_t>(window, l_));
        const int rows = (l_ + w - 1) / w;
        PooledFeature pf;
        pf.lag = k;
        pf.source_frame_index = src.frame_index;
        pf.rows = Tensor(rows, d_);
        kernels::avg_pool_rows(src.feature.data.data(), l_, d_, w, pf.rows.data.data());
        out.push_back(std::move(pf));
        if (window <= std::numeric_limits<int64_t>::max() / lambda) window *= lambda;
    }
    return out;
}

int64_t total_memory_length(int64_t l, int64_t lambda, int64_t T) {
    if (l <= 0) throw std::invalid_argument("frame length must be positive");
    if (lambda < 2) throw std::invalid_argument("pooling factor must be an integer >= 2");
    if (T < 0) throw std::invalid_argument("history depth must be >= 0");
    int64_t total = 0;
    int64_t window = 1;
    for (int64_t k = 0; k < T; k++) {
        total += (l + window - 1) / window;  // ceil(l / window)
        if (window > l) continue;            // further windows stay saturated at 1 row
        if (window > std::numeric_limits<int64_t>::max() / lambda)
            window = std::numeric_limits<int64_t>::max();
        else
            window *= lambda;
    }
    return total;
}

ConditionSignal assemble_condition(const Tensor& queries, const Tensor& cond_frame,
                                   const std::vector<PooledFeature>& history) {
    if (queries.cols() != cond_frame.cols())
        throw std::invalid_argument("condition parts must share width");
    ConditionSignal sig;
    int total = queries.rows() + cond_frame.rows();
    for (const auto& h : history) {
        if (h.rows.cols() != queries.cols())
            throw std::invalid_argument("condition parts must share width");
        total += h.rows.rows();
    }
    sig.rows = Tensor(total, queries.cols());

    int at = 0;
    auto blit = [&](const Tensor& part) {
        std::copy(part.data.begin(), part.data.end(),
                  sig.rows.data.begin() + static_cast<size_t>(at) * sig.rows.cols());
        at += part.rows();
    };
    sig.segments.push_back({ConditionSegment::QueryRows, 0, at, queries.rows()});
    blit(queries);
    sig.segments.push_back({ConditionSegment::CondFrame, 0, at, cond_frame.rows()});
    blit(cond_frame);
    for (const auto& h : history) {
        sig.segments.push_back({ConditionSegment::Memory, h.lag, at, h.rows.rows()});
        blit(h.rows);
    }
    return sig;
}

}  // namespace loom
