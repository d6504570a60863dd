#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "loom/checkpoint.hpp"
#include "loom/generator.hpp"
#include "loom/membank.hpp"
#include "loom/planner.hpp"
#include "loom/storyworld.hpp"

namespace loom {

// Three-stage curriculum: 1) planner text modeling with the input embedding
// frozen, 2) query + projector alignment against the frozen velocity net,
// 3) velocity net training under the full conditioning signal. Later stages
// never touch earlier-stage weights; stage boundaries are checksummed.
struct TrainConfig {
    WorldConfig world;
    PlannerConfig planner;
    GeneratorConfig gen;

    int mem_lambda = 2;     // pooling decay per history slot
    int history_depth = 3;  // memory entries in the conditioning signal

    int n_train = 256;
    int n_val = 64;
    int n_test = 64;

    int stage1_steps = 600;
    int stage1_batch = 8;
    double stage1_lr = 3e-3;
    int stage2_steps = 250;
    int stage2_batch = 8;
    double stage2_lr = 1e-2;
    int stage3_steps = 500;
    int stage3_batch = 8;
    double stage3_lr = 3e-3;

    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0;

    int eval_stories = 32;
    int sample_steps = 8;              // Euler steps at rollout
    bool stage3_self_rollout = false;  // feed generated frames back while training

    uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainContext {
    World world;
    std::vector<StorySample> train_set;
    std::vector<StorySample> val_set;
};

TrainContext make_context(const TrainConfig& cfg);

// Deterministic split synthesis: story i comes from a stream derived from
// (seed, purpose, i), so any split can be regenerated independently.
std::vector<StorySample> synth_stories(const World& world, int n, uint64_t seed,
                                       const std::string& purpose);

// Append-only record of one stage run: config snapshot, per-step losses,
// boundary checksums, final metrics.
struct RunManifest {
    std::string stage;
    uint64_t seed = 0;
    nlohmann::json config;
    std::vector<double> losses;
    nlohmann::json checksums;
    nlohmann::json metrics;

    nlohmann::json to_json() const;
    void save(const std::string& path) const;
};

// Thrown when a stage loss goes non-finite; carries the partial manifest so
// the caller can still write it out.
struct TrainDivergence : std::runtime_error {
    TrainDivergence(const std::string& msg, RunManifest m)
        : std::runtime_error(msg), manifest(std::move(m)) {}
    RunManifest manifest;
};

// Fresh parameters for all three parts plus tokenizer metadata, stage 0.
Checkpoint init_checkpoint(const TrainConfig& cfg);

// Rebuilds the full ParamSet (planner, projector, generator) from a
// checkpoint; shapes are fixed by the config, values come from the blocks.
ParamSet params_from_checkpoint(const Checkpoint& ckpt, const TrainConfig& cfg);

struct StageOutput {
    Checkpoint ckpt;
    RunManifest manifest;
};

// run_until stops after that many optimizer steps (for mid-stage snapshots);
// -1 runs the configured budget. Passing a checkpoint that is mid-way through
// the same stage resumes it and replays the remaining steps exactly.
StageOutput run_stage1(const TrainContext& ctx, const TrainConfig& cfg, const Checkpoint& start,
                       int run_until = -1);
StageOutput run_stage2(const TrainContext& ctx, const TrainConfig& cfg, const Checkpoint& start,
                       int run_until = -1);
// require_stage2=false lets the ablation study train the velocity net on top
// of a stage-1 checkpoint (queries left at init).
StageOutput run_stage3(const TrainContext& ctx, const TrainConfig& cfg, const Checkpoint& start,
                       int run_until = -1, bool require_stage2 = true);

enum class RolloutMode { TeacherForced, SelfRollout };

struct RolloutStory {
    PlanResult plan;
    std::vector<Tensor> frames;  // generated latents, one per plan block
    bool empty = false;          // planner produced no image blocks
};

// Plan, then per block assemble the conditioning signal and integrate the
// velocity field. TeacherForced fills the memory bank from truth_frames;
// SelfRollout feeds generated frames back in.
RolloutStory rollout(ParamSet& ps, const TrainConfig& cfg, const std::vector<int>& input_tokens,
                     const Tensor& f_cond, int n_frames, RolloutMode mode,
                     const std::vector<Tensor>* truth_frames, uint64_t seed);

// Mean drift of rolled-out stories; stories whose rollout yields fewer than
// two frames are skipped.
double mean_rollout_drift(ParamSet& ps, const TrainConfig& cfg, const World& world,
                          const std::vector<StorySample>& stories, RolloutMode mode,
                          uint64_t seed);

// Frames sampled with the conditioning signal reduced to the projected plan
// queries alone (the stage-2 setting); zero_condition replaces the query rows
// with zeros, which is the matched unconditional baseline.
std::vector<Tensor> sample_query_conditioned(ParamSet& ps, const TrainConfig& cfg,
                                             const StorySample& story, bool zero_condition,
                                             uint64_t seed);

// RMSE between the persistent coordinates recovered from generated frames and
// the story's true persistent vector.
double persistent_recovery_rmse(const World& world, const StorySample& story,
                                const std::vector<Tensor>& gen_frames);

double eval_text_ce(ParamSet& ps, const TrainConfig& cfg,
                    const std::vector<StorySample>& stories);

// Concatenated text logits over a probe set; stages 2 and 3 must leave this
// bitwise unchanged even though the query embeddings move.
Tensor text_probe(ParamSet& ps, const TrainConfig& cfg, const std::vector<StorySample>& stories);

// 2x2 study over {with, without} stage 2 and stage 3, shared stage-1 run,
// mean self-rollout drift per cell. drift[a][b]: a = stage-2 applied,
// b = stage-3 applied.
struct AblationResult {
    double drift[2][2] = {{0, 0}, {0, 0}};
    uint64_t seed = 0;
    nlohmann::json to_json() const;
};

AblationResult ablation_run(const TrainConfig& cfg, const std::string& manifest_dir = "");

// Bank contents as checkpoint blocks, for resumable generation.
void store_bank(Checkpoint& ckpt, const MemoryBank& bank, const std::string& prefix);
MemoryBank load_bank(const Checkpoint& ckpt, const std::string& prefix, int l, int d,
                     int capacity);

}  // namespace loom
