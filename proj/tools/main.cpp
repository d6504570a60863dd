#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "loom/costmodel.hpp"
#include "loom/layout.hpp"
#include "loom/trainer.hpp"

namespace {

loom::TrainConfig load_train_config(const std::string& path) {
    loom::TrainConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    in >> j;
    return j.get<loom::TrainConfig>();
}

loom::ModelDims load_dims(const std::string& path) {
    loom::ModelDims dims;
    if (path.empty()) return dims;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dims config: " + path);
    nlohmann::json j;
    in >> j;
    return j.get<loom::ModelDims>();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + path);
    out << text;
}

struct CommonFlags {
    std::string config;
    std::string out;
    int64_t seed = -1;

    loom::TrainConfig resolve() const {
        loom::TrainConfig cfg = load_train_config(config);
        if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
        return cfg;
    }
};

void add_common(CLI::App* sub, CommonFlags& f, bool out_required) {
    sub->add_option("--config", f.config, "training config JSON (defaults apply field-wise)");
    auto* o = sub->add_option("--out", f.out, "output directory");
    if (out_required) o->required();
    sub->add_option("--seed", f.seed, "override the config root seed");
}

int cmd_data_gen(const CommonFlags& f) {
    loom::TrainConfig cfg = f.resolve();
    std::filesystem::create_directories(f.out);
    loom::World world(cfg.world);
    loom::RunManifest man;
    man.stage = "data";
    man.seed = cfg.seed;
    man.config = cfg;
    const struct {
        const char* split;
        int n;
    } splits[] = {{"train", cfg.n_train}, {"val", cfg.n_val}, {"test", cfg.n_test}};
    for (const auto& s : splits) {
        auto stories = loom::synth_stories(world, s.n, cfg.seed,
                                           std::string("corpus.") + s.split);
        loom::save_corpus(f.out, s.split, cfg.world, stories);
        man.metrics[s.split] = s.n;
    }
    man.save(f.out + "/manifest.json");
    std::cout << "{\"out\": \"" << f.out << "\", \"splits\": [\"train\", \"val\", \"test\"]}\n";
    return 0;
}

int cmd_train(const CommonFlags& f, int stage, const std::string& resume, int run_until) {
    loom::TrainConfig cfg = f.resolve();
    std::filesystem::create_directories(f.out);
    loom::TrainContext ctx = loom::make_context(cfg);

    loom::Checkpoint start;
    if (!resume.empty()) {
        start = loom::load_checkpoint(resume);
    } else if (stage == 1) {
        start = loom::init_checkpoint(cfg);
    } else {
        throw std::runtime_error("stage " + std::to_string(stage) + " requires a stage-" +
                                 std::to_string(stage - 1) + " checkpoint (pass --resume)");
    }

    loom::StageOutput res;
    switch (stage) {
        case 1: res = loom::run_stage1(ctx, cfg, start, run_until); break;
        case 2: res = loom::run_stage2(ctx, cfg, start, run_until); break;
        default: res = loom::run_stage3(ctx, cfg, start, run_until); break;
    }

    const std::string ckpt_path = f.out + "/stage" + std::to_string(stage) + ".ckpt";
    const std::string man_path = f.out + "/stage" + std::to_string(stage) + "_manifest.json";
    loom::save_checkpoint(ckpt_path, res.ckpt);
    res.manifest.save(man_path);

    nlohmann::json summary = {{"checkpoint", ckpt_path},
                              {"manifest", man_path},
                              {"steps", res.manifest.losses.size()}};
    if (!res.manifest.losses.empty()) summary["final_loss"] = res.manifest.losses.back();
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_rollout(const std::string& ckpt_path, const std::string& mode_name, int n_frames,
                int n_stories, int64_t seed_flag, const std::string& out) {
    loom::Checkpoint ckpt = loom::load_checkpoint(ckpt_path);
    if (ckpt.stage < 3) throw std::runtime_error("rollout needs a stage-3 checkpoint");
    loom::TrainConfig cfg = ckpt.config.get<loom::TrainConfig>();
    const uint64_t seed = seed_flag >= 0 ? static_cast<uint64_t>(seed_flag) : cfg.seed;

    loom::RolloutMode mode;
    if (mode_name == "teacher_forced")
        mode = loom::RolloutMode::TeacherForced;
    else if (mode_name == "self_rollout")
        mode = loom::RolloutMode::SelfRollout;
    else
        throw CLI::ValidationError("--mode", "must be teacher_forced or self_rollout");

    std::filesystem::create_directories(out);
    loom::ParamSet ps = loom::params_from_checkpoint(ckpt, cfg);
    loom::World world(cfg.world);
    auto stories = loom::synth_stories(world, n_stories, seed, "rollout.story");

    loom::RunManifest man;
    man.stage = "rollout";
    man.seed = seed;
    man.config = cfg;
    nlohmann::json empties = nlohmann::json::array();
    double drift_sum = 0.0;
    int drift_n = 0;
    for (size_t i = 0; i < stories.size(); i++) {
        const auto& s = stories[i];
        const int want = n_frames > 0 ? n_frames : s.n_frames();
        loom::RolloutStory r = loom::rollout(ps, cfg, s.input_tokens, s.f_cond, want, mode,
                                             &s.frames, loom::derive_seed(seed, "rollout.run", i));
        if (r.empty) {
            empties.push_back(s.id);
            continue;
        }
        loom::save_latents(out + "/story" + std::to_string(s.id) + ".lat", r.frames, seed,
                           cfg.sample_steps);
        if (r.frames.size() >= 2) {
            drift_sum += world.drift_metric(r.frames);
            drift_n++;
        }
    }
    man.metrics["empty_stories"] = empties;
    man.metrics["stories"] = stories.size();
    if (drift_n > 0) man.metrics["mean_drift"] = drift_sum / drift_n;
    man.save(out + "/manifest.json");
    std::cout << man.metrics.dump() << "\n";
    return 0;
}

int cmd_ablate(const CommonFlags& f) {
    loom::TrainConfig cfg = f.resolve();
    std::filesystem::create_directories(f.out);
    loom::AblationResult res = loom::ablation_run(cfg, f.out);
    std::cout << res.to_json().dump(2) << "\n";
    return 0;
}

int cmd_metrics(const std::string& ckpt_path, const std::string& mode_name, int n_stories,
                int64_t seed_flag) {
    loom::Checkpoint ckpt = loom::load_checkpoint(ckpt_path);
    if (ckpt.stage < 3) throw std::runtime_error("metrics needs a stage-3 checkpoint");
    loom::TrainConfig cfg = ckpt.config.get<loom::TrainConfig>();
    const uint64_t seed = seed_flag >= 0 ? static_cast<uint64_t>(seed_flag) : cfg.seed;
    const loom::RolloutMode mode = mode_name == "teacher_forced"
                                       ? loom::RolloutMode::TeacherForced
                                       : loom::RolloutMode::SelfRollout;

    loom::ParamSet ps = loom::params_from_checkpoint(ckpt, cfg);
    loom::World world(cfg.world);
    auto stories = loom::synth_stories(world, n_stories, seed, "metrics.story");
    const double drift = loom::mean_rollout_drift(ps, cfg, world, stories, mode,
                                                  loom::derive_seed(seed, "metrics.drift"));
    nlohmann::json out = {{"mode", mode_name}, {"stories", n_stories}, {"mean_drift", drift}};
    std::cout << out.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"story planning and consistent frame generation, desk scale"};
    app.require_subcommand(1);

    int exit_code = 0;
    std::function<int()> action;

    // data gen
    auto* data = app.add_subcommand("data", "dataset workflows");
    data->require_subcommand(1);
    auto* gen = data->add_subcommand("gen", "materialize train/val/test splits");
    static CommonFlags gen_flags;
    add_common(gen, gen_flags, true);
    gen->callback([&] { action = [] { return cmd_data_gen(gen_flags); }; });

    // train
    auto* train = app.add_subcommand("train", "run one curriculum stage");
    static CommonFlags train_flags;
    static int train_stage = 0;
    static std::string train_resume;
    static int train_run_until = -1;
    train->add_option("--stage", train_stage, "curriculum stage")
        ->required()
        ->check(CLI::Range(1, 3));
    train->add_option("--resume", train_resume, "checkpoint to start from");
    train->add_option("--run-until", train_run_until,
                      "stop after this many optimizer steps (for mid-stage snapshots)");
    add_common(train, train_flags, true);
    train->callback([&] {
        action = [] { return cmd_train(train_flags, train_stage, train_resume, train_run_until); };
    });

    // rollout
    auto* roll = app.add_subcommand("rollout", "plan and generate frames from a checkpoint");
    static std::string roll_ckpt, roll_mode = "self_rollout", roll_out;
    static int roll_frames = 0, roll_stories = 8;
    static int64_t roll_seed = -1;
    roll->add_option("--ckpt", roll_ckpt, "stage-3 checkpoint")->required();
    roll->add_option("--mode", roll_mode, "teacher_forced or self_rollout");
    roll->add_option("--n-frames", roll_frames, "frames per story (0: story length)");
    roll->add_option("--stories", roll_stories, "number of evaluation stories");
    roll->add_option("--seed", roll_seed, "override the checkpoint seed");
    roll->add_option("--out", roll_out, "output directory")->required();
    roll->callback([&] {
        action = [] {
            return cmd_rollout(roll_ckpt, roll_mode, roll_frames, roll_stories, roll_seed,
                               roll_out);
        };
    });

    // ablate
    auto* abl = app.add_subcommand("ablate", "2x2 study over stages 2 and 3");
    static CommonFlags abl_flags;
    add_common(abl, abl_flags, true);
    abl->callback([&] { action = [] { return cmd_ablate(abl_flags); }; });

    // mask dump
    auto* mask = app.add_subcommand("mask", "attention mask tools");
    mask->require_subcommand(1);
    auto* dump = mask->add_subcommand("dump", "write the visibility matrix as a 0/1 grid");
    static std::string dump_layout, dump_out;
    static bool dump_bidi = false;
    dump->add_option("--layout", dump_layout, "segment spec, e.g. input:2,text:3,query:2")
        ->required();
    dump->add_option("--out", dump_out, "output file (default: standard output)");
    dump->add_flag("--bidirectional-input", dump_bidi, "input rows see all input columns");
    dump->callback([&] {
        action = [] {
            auto layout = loom::build_layout(loom::parse_layout_spec(dump_layout));
            const std::string text =
                loom::mask_to_text(loom::build_mask(layout, {dump_bidi}));
            if (dump_out.empty())
                std::cout << text;
            else
                write_text(dump_out, text);
            return 0;
        };
    });

    // cost report
    auto* cost = app.add_subcommand("cost", "compute cost model reports");
    cost->require_subcommand(1);
    auto* report = cost->add_subcommand("report", "per-frame token and flop counts");
    static std::string cost_dims, cost_format = "table";
    static int cost_frames = 20;
    report->add_option("--dims", cost_dims, "model dims JSON");
    report->add_option("--frames", cost_frames, "number of frames")->check(CLI::PositiveNumber);
    report->add_option("--format", cost_format, "table or csv")
        ->check(CLI::IsMember({"table", "csv"}));
    report->callback([&] {
        action = [] {
            loom::CostReport r = loom::cumulative_report(cost_frames, load_dims(cost_dims));
            std::cout << (cost_format == "csv" ? loom::report_csv(r) : loom::report_table(r));
            return 0;
        };
    });

    // metrics
    auto* met = app.add_subcommand("metrics", "drift metrics for a trained checkpoint");
    static std::string met_ckpt, met_mode = "self_rollout";
    static int met_stories = 32;
    static int64_t met_seed = -1;
    met->add_option("--ckpt", met_ckpt, "stage-3 checkpoint")->required();
    met->add_option("--mode", met_mode, "teacher_forced or self_rollout")
        ->check(CLI::IsMember({"teacher_forced", "self_rollout"}));
    met->add_option("--stories", met_stories, "number of evaluation stories");
    met->add_option("--seed", met_seed, "override the checkpoint seed");
    met->callback([&] {
        action = [] { return cmd_metrics(met_ckpt, met_mode, met_stories, met_seed); };
    });

    try {
        app.parse(argc, argv);
        if (action) exit_code = action();
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const loom::TrainDivergence& e) {
        std::cerr << "error: " << e.what() << "\n";
        if (!train_flags.out.empty()) {
            try {
                e.manifest.save(train_flags.out + "/diverged_manifest.json");
                std::cerr << "partial manifest written to " << train_flags.out
                          << "/diverged_manifest.json\n";
            } catch (const std::exception& save_err) {
                std::cerr << "could not write manifest: " << save_err.what() << "\n";
            }
        }
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return exit_code;
}
