#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "loom/kernels.hpp"
#include "loom/tensor.hpp"

namespace loom {

// Named parameter store. Iteration order is insertion order everywhere
// (updates, serialization, checksums), which keeps runs reproducible.
class ParamSet {
public:
    int add(const std::string& name, Tensor init);
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    int index_of(const std::string& name) const;

    Tensor& value(const std::string& name) { return values_[index_of(name)]; }
    const Tensor& value(const std::string& name) const { return values_[index_of(name)]; }
    Tensor& grad(const std::string& name) { return grads_[index_of(name)]; }

    Tensor& value_at(int i) { return values_[i]; }
    const Tensor& value_at(int i) const { return values_[i]; }
    Tensor& grad_at(int i) { return grads_[i]; }
    const Tensor& grad_at(int i) const { return grads_[i]; }

    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }
    void zero_grads();
    int64_t entry_count() const;

    // FNV-1a over the raw bytes of the selected tensors, in the order given.
    uint64_t checksum(const std::vector<std::string>& which) const;
    uint64_t checksum_prefix(const std::string& prefix) const;
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
    std::unordered_map<std::string, int> index_;
};

// Reverse-mode tape over 2-D tensors. Forward values are computed eagerly as
// ops are recorded; backward() replays the tape in reverse and accumulates
// parameter gradients into the attached ParamSet. A graph without a
// backward() call is just a plain forward evaluator.
class Graph {
public:
    using Ref = int;

    explicit Graph(ParamSet* params = nullptr) : ps_(params) {}

    Ref constant(Tensor t);
    Ref param(const std::string& name);

    Ref matmul(Ref a, Ref b);     // [m,k]x[k,n]
    Ref matmul_nt(Ref a, Ref b);  // [m,k] x [n,k]^T, the linear-layer product
    Ref add(Ref a, Ref b);
    Ref sub(Ref a, Ref b);
    Ref add_row_broadcast(Ref a, Ref row);  // a[m,n] + row[1,n] to every row
    Ref scale(Ref a, double s);
    Ref gelu(Ref a);
    Ref rmsnorm(Ref x, Ref gain);  // rows normalized by rms, gain is [1,n]
    Ref concat_rows(const std::vector<Ref>& parts);
    Ref slice_rows(Ref a, int r0, int r1);
    Ref gather_rows(Ref a, std::vector<int> rows);
    // Build a matrix whose row r is row `picks[r].second` of node `picks[r].first`.
    Ref assemble_rows(const std::vector<std::pair<Ref, int>>& picks);
    Ref attention(Ref q, Ref k, Ref v, kernels::MaskRows mask, int heads);
    // Mean cross-entropy of logit rows against integer targets; -1 skips a row.
    Ref cross_entropy_rows(Ref logits, std::vector<int> targets);
    Ref mse(Ref pred, Ref target);  // mean over entries of squared error
    Ref mean_of(const std::vector<Ref>& scalars);

    const Tensor& value(Ref r) const { return nodes_[r].val; }
    double scalar(Ref r) const;

    // Accumulates d(loss)/d(param) into the ParamSet's grad buffers.
    void backward(Ref loss);

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool needs_grad = false;
        bool grad_alloc = false;
        int param = -1;
        std::function<void(Graph&)> back;
    };

    Ref push(Tensor val, bool needs_grad, std::function<void(Graph&)> back);
    Tensor& grad_buf(Ref r);
    bool wants(Ref r) const { return nodes_[r].needs_grad; }

    std::vector<Node> nodes_;
    ParamSet* ps_ = nullptr;
};

}  // namespace loom
