#pragma once

#include <functional>
#include <vector>

#include <json.hpp>

#include "loom/autodiff.hpp"
#include "loom/membank.hpp"
#include "loom/rng.hpp"

namespace loom {

// Velocity network for rectified-flow frame generation. Latent rows
// self-attend and cross-attend into the conditioning rows (projected plan
// queries, the condition frame, pooled memory).
struct GeneratorConfig {
    int l = 16;         // latent rows
    int d_latent = 8;   // latent width (also the conditioning width)
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int planner_width = 32;  // projector input width
    int time_freqs = 6;
    int max_cond_rows = 96;
    int n_steps = 8;  // default sampler steps

    int time_feats() const { return 2 * time_freqs; }
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

// "proj." maps planner query states into conditioning width; "gen." is the
// velocity network itself.
void init_projector_params(ParamSet& ps, const GeneratorConfig& cfg, RandomStream& rng);
void init_generator_params(ParamSet& ps, const GeneratorConfig& cfg, RandomStream& rng);

// queries [m x planner_width] -> [m x d_latent]
Graph::Ref project_queries(Graph& g, const GeneratorConfig& cfg, Graph::Ref queries);

// x_t = (1 - t) x0 + t eps; t must sit in [0, 1]
Tensor fm_interpolate(const Tensor& x0, const Tensor& eps, double t);

// velocity field evaluation; cond rows must match d_latent and carry the
// segment table from assemble_condition (query rows get segment kind 0 when
// the signal is just projected queries)
Graph::Ref velocity_forward(Graph& g, const GeneratorConfig& cfg, Graph::Ref x_t, double t,
                            Graph::Ref cond, const std::vector<ConditionSegment>& segments);

// One flow-matching term: || v(x_t, t, C) - (eps - x0) ||^2, mean over
// entries. cond may be a constant node (stage 3) or a differentiable
// subgraph (stage 2 trains through it).
Graph::Ref fm_term(Graph& g, const GeneratorConfig& cfg, const Tensor& x0, const Tensor& eps,
                   double t, Graph::Ref cond, const std::vector<ConditionSegment>& segments);

// Convenience batch form used by tests and the trainer: draws t ~ U[0,1] and
// eps ~ N(0, I) per item from the stream, returns the mean loss after
// backward has run.
struct FMBatchItem {
    Tensor x0;
    ConditionSignal cond;
};
double fm_loss(ParamSet& ps, const GeneratorConfig& cfg, const std::vector<FMBatchItem>& batch,
               RandomStream& rng, bool with_grad);

// Deterministic Euler integration of a velocity field from t = 1 down to
// t = 0: x <- x - dt * v(x, t). Throws if the trajectory leaves the finite
// range. The same loop drives both the learned sampler and the closed-form
// fields the tests integrate.
using VelocityFn = std::function<Tensor(const Tensor& x, double t)>;
Tensor euler_integrate(const VelocityFn& v, const Tensor& x_start, int n_steps);

Tensor sample_euler(ParamSet& ps, const GeneratorConfig& cfg, const ConditionSignal& cond,
                    int n_steps, RandomStream& rng);

// Latent frames on disk: one JSON header line (shape, frame count, seed,
// sampler steps) followed by the raw little-endian float64 frame data.
struct LatentFile {
    std::vector<Tensor> frames;
    uint64_t seed = 0;
    int steps = 0;
};

void save_latents(const std::string& path, const std::vector<Tensor>& frames, uint64_t seed,
                  int steps);
LatentFile load_latents(const std::string& path);

}  // namespace loom
