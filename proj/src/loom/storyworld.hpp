#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "loom/rng.hpp"
#include "loom/tensor.hpp"

namespace loom {

// Synthetic story generator. A story is a fixed "persistent" identity vector
// plus a "transient" pose vector that drifts as narrative tokens are applied.
// Frames are linear renders of the state with optional observation noise, so
// the state is exactly recoverable and identity drift is measurable.
struct WorldConfig {
    int p = 4;          // persistent coords
    int q = 4;          // transient coords
    int l = 16;         // latent rows per frame
    int d_latent = 8;   // latent width
    int n_levels = 5;   // discrete persistent levels per coord
    int n_starters = 8;
    int n_motions = 20;
    double step_scale = 0.25;   // per-token transient delta scale
    double sigma = 0.01;        // render noise
    int frames_min = 3;
    int frames_max = 5;
    uint64_t world_seed = 1;    // fixes render map and grammar tables

    int text_vocab() const { return 4 + n_starters + n_motions; }
    int input_vocab() const { return p * n_levels; }
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

// token id conventions
constexpr int kBos = 0;
constexpr int kImgOpen = 1;
constexpr int kImgClose = 2;
constexpr int kEop = 3;
constexpr int kFirstStarter = 4;

struct SceneState {
    std::vector<double> persistent;
    std::vector<double> transient;
};

struct StorySample {
    int id = 0;
    std::vector<int> persistent_levels;  // p entries in [0, n_levels)
    std::vector<int> input_tokens;       // p entries
    Tensor f_cond;                       // render of the initial state
    std::vector<std::vector<int>> runs;  // narrative runs, payload tokens only
    std::vector<Tensor> frames;          // one per run
    std::vector<SceneState> states;      // initial state + one per run

    int n_frames() const { return static_cast<int>(frames.size()); }
    // bos, run tokens, eop; delimiters are added by the sequence layout
    std::vector<int> payload_tokens() const;
};

class World {
public:
    explicit World(const WorldConfig& cfg);

    const WorldConfig& config() const { return cfg_; }

    StorySample roll_story(int n_frames, RandomStream& rng) const;
    int sample_frame_count(RandomStream& rng) const;

    // x = G s + b + sigma * noise, reshaped to l x d_latent
    Tensor render_frame(const SceneState& state, RandomStream& noise) const;
    SceneState recover_state(const Tensor& frame) const;

    // mean over persistent coords of the across-frame variance of the
    // recovered persistent values (population variance; needs >= 2 frames)
    double drift_metric(const std::vector<Tensor>& frames) const;

    double persistent_level_value(int level) const;
    std::vector<int> encode_input(const std::vector<int>& levels) const;

    // grammar tables, exposed for distribution tests
    const std::vector<double>& starter_transition_row(int s) const;
    const std::vector<double>& motion_row(int s) const;
    const std::vector<double>& run_extra_probs() const { return run_extra_probs_; }

    bool is_motion(int token) const;
    bool is_starter(int token) const;

private:
    void apply_run(SceneState& state, const std::vector<int>& run) const;

    WorldConfig cfg_;
    Tensor G_;     // (l * d_latent) x (p + q), orthonormal columns
    Tensor bias_;  // 1 x (l * d_latent)
    std::vector<std::vector<double>> starter_trans_;
    std::vector<std::vector<double>> motion_given_starter_;
    std::vector<std::vector<double>> deltas_;  // per token, q entries
    std::vector<double> run_extra_probs_ = {0.3, 0.5, 0.2};
};

// jsonl index + float64 blob, one pair per split
void save_corpus(const std::string& dir, const std::string& split, const WorldConfig& cfg,
                 const std::vector<StorySample>& stories);
std::vector<StorySample> load_corpus(const std::string& dir, const std::string& split,
                                     const WorldConfig& cfg);

// entropy (nats) of the empirical next-token distribution of the split's
// teacher-forced targets; the baseline a trained planner has to beat
double unigram_entropy(const std::vector<StorySample>& stories);

}  // namespace loom
