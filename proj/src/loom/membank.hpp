#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "loom/tensor.hpp"

namespace loom {

struct FrameFeature {
    int frame_index = 0;
    Tensor feature;  // l x d
};

// Rows of one pooled (or unpooled) history entry plus where it came from.
struct PooledFeature {
    int lag = 0;  // 1 = most recent stored frame
    int source_frame_index = 0;
    Tensor rows;  // ceil(l / window) x d
};

// Sliding store of the last `capacity` frame features. Older entries are
// evicted; readers see a geometrically coarsened view where the entry at
// lag k keeps ceil(l / lambda^(k-1)) rows.
class MemoryBank {
public:
    MemoryBank(int l, int d, int capacity);

    // frame_index must increase strictly across pushes
    void push(const Tensor& feature, int frame_index);
    int size() const { return static_cast<int>(store_.size()); }
    int capacity() const { return capacity_; }
    void clear() { store_.clear(); }
    const FrameFeature& raw(int lag) const;  // lag in [1, size()]

    // Most recent first. depth caps how many entries are read; the pool
    // window for lag k is lambda^(k-1). A cold bank yields fewer entries,
    // never padding.
    std::vector<PooledFeature> pooled_history(int depth, int lambda) const;

private:
    int l_;
    int d_;
    int capacity_;
    std::deque<FrameFeature> store_;  // front = oldest
};

// Number of pooled rows contributed by a depth-T history of l-row frames:
// sum over k of ceil(l / lambda^(k-1)). Overflow-checked; lambda must be >= 2
// and everything else positive (T = 0 gives 0).
int64_t total_memory_length(int64_t l, int64_t lambda, int64_t T);

// Concatenated conditioning block: query rows, then the condition frame, then
// pooled history from most recent to oldest. The segment table records what
// each row span is so attention-side embeddings can tell them apart.
struct ConditionSegment {
    enum Kind { QueryRows, CondFrame, Memory } kind = QueryRows;
    int lag = 0;  // only for Memory
    int start = 0;
    int len = 0;
};

struct ConditionSignal {
    Tensor rows;  // total x d
    std::vector<ConditionSegment> segments;
};

ConditionSignal assemble_condition(const Tensor& queries, const Tensor& cond_frame,
                                   const std::vector<PooledFeature>& history);

}  // namespace loom
