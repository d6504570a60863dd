#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loom/autodiff.hpp"
#include "loom/layout.hpp"
#include "loom/rng.hpp"
#include "loom/storyworld.hpp"

namespace loom {

// Decoder-only transformer over interleaved input / text / query positions.
// Text decoding never sees query positions, so the same weights produce the
// same plan with or without query blocks in the sequence.
struct PlannerConfig {
    int text_vocab = 32;
    int input_vocab = 20;
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int m_queries = 4;
    int max_seq_len = 96;
    int max_blocks = 8;
    bool per_index_queries = false;  // distinct learned queries per block index
    bool bidirectional_input = false;

    int mlp_hidden() const { return 4 * d_model; }
};

void to_json(nlohmann::json& j, const PlannerConfig& c);
void from_json(const nlohmann::json& j, PlannerConfig& c);

// Registers all planner parameters under "planner." in insertion order.
void init_planner_params(ParamSet& ps, const PlannerConfig& cfg, RandomStream& rng);

// Parameter names that make up the text path: everything except the learned
// query embeddings. Stage boundaries checksum this set.
std::vector<std::string> planner_text_param_names(const ParamSet& ps);

struct PlannerInput {
    SequenceLayout layout;
    std::vector<int> input_tokens;  // one per input position
    std::vector<int> text_tokens;   // one per text position, delimiters included
};

struct PlannerOutput {
    Graph::Ref text_logits = -1;               // n_text x text_vocab
    Graph::Ref input_states = -1;              // n_input x d_model, post final norm
    std::vector<Graph::Ref> query_states;      // per block, m x d_model
    std::vector<int> text_positions;           // sequence indices of text rows
};

PlannerOutput planner_forward(Graph& g, const PlannerConfig& cfg, const PlannerInput& in);

struct PlannerExample {
    PlannerInput input;
    std::vector<int> targets;  // next text token per text position, -1 at the end
};

// Teacher-forced view of a story: one query block per frame, targets shifted
// within the text positions only.
PlannerExample make_teacher_forced(const StorySample& story, const PlannerConfig& cfg);

// Mean next-token cross-entropy over the batch (mean of per-example means).
Graph::Ref stage1_loss(Graph& g, const PlannerConfig& cfg,
                       const std::vector<PlannerExample>& batch);

struct PlanLimits {
    int max_blocks = 8;
    int max_payload = 40;  // payload tokens before decoding is cut off
};

struct PlanResult {
    std::vector<std::vector<int>> runs;  // payload between consecutive blocks
    std::vector<Tensor> query_states;    // per emitted block, m x d_model
    bool finished = false;               // ended on <eop>
    bool stray_close = false;            // emitted </img> outside a block
    int n_blocks() const { return static_cast<int>(query_states.size()); }
};

// Autoregressive decode. temperature <= 0 means greedy; otherwise rng must be
// provided. Emitting <img> opens a block whose delimiters and query slots are
// appended automatically, then decoding resumes after the closing delimiter.
PlanResult generate_plan(ParamSet& ps, const PlannerConfig& cfg,
                         const std::vector<int>& input_tokens, const PlanLimits& limits,
                         double temperature = 0.0, RandomStream* rng = nullptr);

}  // namespace loom
