#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "loom/checkpoint.hpp"
#include "loom/generator.hpp"
#include "loom/storyworld.hpp"
#include "loom/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path work_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "loom_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

CmdResult run_cli(const std::string& args) {
    const fs::path out_file = work_dir() / "last_stdout.txt";
    const fs::path err_file = work_dir() / "last_stderr.txt";
    const std::string cmd = std::string(STORYLOOM_BIN) + " " + args + " > " + out_file.string() +
                            " 2> " + err_file.string();
    const int status = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

// Small enough to train in seconds, big enough that the planner learns the
// bracket grammar well enough to emit image blocks at greedy decode.
loom::TrainConfig pipeline_config() {
    loom::TrainConfig cfg;
    cfg.world.l = 8;
    cfg.world.d_latent = 4;
    cfg.planner.d_model = 16;
    cfg.planner.n_layers = 1;
    cfg.planner.n_heads = 2;
    cfg.planner.m_queries = 2;
    cfg.gen.l = 8;
    cfg.gen.d_latent = 4;
    cfg.gen.d_model = 16;
    cfg.gen.n_layers = 1;
    cfg.gen.n_heads = 2;
    cfg.gen.planner_width = 16;
    cfg.gen.time_freqs = 3;
    cfg.gen.max_cond_rows = 48;
    cfg.gen.n_steps = 4;
    cfg.mem_lambda = 2;
    cfg.history_depth = 2;
    cfg.n_train = 24;
    cfg.n_val = 6;
    cfg.n_test = 6;
    cfg.stage1_steps = 240;
    cfg.stage1_batch = 8;
    cfg.stage2_steps = 30;
    cfg.stage2_batch = 4;
    cfg.stage3_steps = 30;
    cfg.stage3_batch = 4;
    cfg.eval_stories = 4;
    cfg.sample_steps = 4;
    cfg.seed = 11;
    return cfg;
}

std::string write_config(const loom::TrainConfig& cfg, const std::string& name) {
    const fs::path p = work_dir() / name;
    std::ofstream out(p);
    out << json(cfg).dump(2) << "\n";
    return p.string();
}

}  // namespace

TEST_CASE("mask dump prints the visibility grid") {
    CmdResult r = run_cli("mask dump --layout input:2,text:3,query:2");
    CHECK(r.code == 0);
    CHECK(r.out ==
          "100000000\n"
          "110000000\n"
          "111000000\n"
          "111100000\n"
          "111110000\n"
          "111111000\n"
          "111111110\n"
          "111111110\n"
          "111111001\n");

    // no query rows: the grid is exactly lower-triangular
    CmdResult tri = run_cli("mask dump --layout input:1,text:3");
    CHECK(tri.code == 0);
    CHECK(tri.out == "1000\n1100\n1110\n1111\n");

    CmdResult no_input = run_cli("mask dump --layout text:4");
    CHECK(no_input.code == 2);
    CHECK(no_input.err.find("input segment") != std::string::npos);

    const fs::path grid = work_dir() / "grid.txt";
    CmdResult to_file =
        run_cli("mask dump --layout input:2,text:3,query:2 --out " + grid.string());
    CHECK(to_file.code == 0);
    CHECK(slurp(grid) == r.out);

    CmdResult bad = run_cli("mask dump --layout input:x");
    CHECK(bad.code == 2);
    CHECK(bad.err.find("error:") != std::string::npos);
}

TEST_CASE("cost report emits csv and table") {
    CmdResult csv = run_cli("cost report --frames 20 --format csv");
    CHECK(csv.code == 0);
    CHECK(csv.out.rfind("frame,tokens_vanilla,tokens_bounded,flops_vanilla,flops_bounded,"
                        "cum_vanilla,cum_bounded\n",
                        0) == 0);
    int lines = 0;
    for (char c : csv.out)
        if (c == '\n') lines++;
    CHECK(lines == 21);

    CmdResult tab = run_cli("cost report --frames 12");
    CHECK(tab.code == 0);
    CHECK(tab.out.find("crossover_frame=") != std::string::npos);
    CHECK(tab.out.find("growth: vanilla=") != std::string::npos);

    CHECK(run_cli("cost report --format yaml").code == 1);
    CHECK(run_cli("cost report --frames 0").code == 1);
}

TEST_CASE("bad invocations exit through the parser") {
    CHECK(run_cli("bogus").code == 1);
    CHECK(run_cli("train --out x").code == 1);  // --stage is required
    CmdResult help = run_cli("--help");
    CHECK(help.code == 0);
    CHECK(help.out.find("train") != std::string::npos);
}

TEST_CASE("the full pipeline runs end to end") {
    const loom::TrainConfig cfg = pipeline_config();
    const std::string cfg_path = write_config(cfg, "pipeline.json");
    const fs::path data_dir = work_dir() / "data";
    const fs::path run_dir = work_dir() / "run";
    const fs::path run2_dir = work_dir() / "run2";
    const fs::path roll_dir = work_dir() / "roll";

    // data gen materializes three loadable splits
    CmdResult dg = run_cli("data gen --config " + cfg_path + " --out " + data_dir.string());
    CHECK(dg.code == 0);
    CHECK(json::parse(dg.out)["splits"].size() == 3);
    CHECK(fs::exists(data_dir / "manifest.json"));
    auto train_split = loom::load_corpus(data_dir.string(), "train", cfg.world);
    CHECK(train_split.size() == static_cast<size_t>(cfg.n_train));
    auto test_split = loom::load_corpus(data_dir.string(), "test", cfg.world);
    CHECK(test_split.size() == static_cast<size_t>(cfg.n_test));

    // stage 2 without a checkpoint is refused up front
    CmdResult no_resume =
        run_cli("train --stage 2 --config " + cfg_path + " --out " + run_dir.string());
    CHECK(no_resume.code == 2);
    CHECK(no_resume.err.find("requires a stage-1 checkpoint") != std::string::npos);

    // stage 1 trains and reports its artifacts
    CmdResult s1 = run_cli("train --stage 1 --config " + cfg_path + " --out " + run_dir.string());
    REQUIRE(s1.code == 0);
    json s1_summary = json::parse(s1.out);
    CHECK(s1_summary["steps"] == cfg.stage1_steps);
    CHECK(s1_summary["final_loss"].is_number());
    const std::string ckpt1 = (run_dir / "stage1.ckpt").string();
    CHECK(fs::exists(ckpt1));
    CHECK(fs::exists(run_dir / "stage1_manifest.json"));
    CHECK(loom::load_checkpoint(ckpt1).stage == 1);

    // the same invocation writes a byte-identical checkpoint
    CmdResult s1b =
        run_cli("train --stage 1 --config " + cfg_path + " --out " + run2_dir.string());
    REQUIRE(s1b.code == 0);
    CHECK(slurp(run_dir / "stage1.ckpt") == slurp(run2_dir / "stage1.ckpt"));

    // rollout refuses anything below stage 3
    CmdResult early = run_cli("rollout --ckpt " + ckpt1 + " --out " + roll_dir.string());
    CHECK(early.code == 2);
    CHECK(early.err.find("stage-3 checkpoint") != std::string::npos);

    // stages 2 and 3
    CmdResult s2 = run_cli("train --stage 2 --config " + cfg_path + " --resume " + ckpt1 +
                           " --out " + run_dir.string());
    REQUIRE(s2.code == 0);
    const std::string ckpt2 = (run_dir / "stage2.ckpt").string();
    CmdResult s3 = run_cli("train --stage 3 --config " + cfg_path + " --resume " + ckpt2 +
                           " --out " + run_dir.string());
    REQUIRE(s3.code == 0);
    const std::string ckpt3 = (run_dir / "stage3.ckpt").string();
    CHECK(loom::load_checkpoint(ckpt3).stage == 3);

    // rollout writes one latent file per planned story
    CmdResult roll = run_cli("rollout --ckpt " + ckpt3 + " --mode self_rollout --stories 3" +
                             " --out " + roll_dir.string());
    REQUIRE(roll.code == 0);
    json roll_metrics = json::parse(roll.out);
    CHECK(roll_metrics["stories"] == 3);
    json roll_manifest = json::parse(slurp(roll_dir / "manifest.json"));
    CHECK(roll_manifest["metrics"]["stories"] == 3);
    std::set<int> empties;
    for (const auto& id : roll_metrics["empty_stories"]) empties.insert(id.get<int>());
    int lat_files = 0;
    for (int id = 0; id < 3; id++) {
        const fs::path lat = roll_dir / ("story" + std::to_string(id) + ".lat");
        if (empties.count(id)) {
            CHECK(!fs::exists(lat));
            continue;
        }
        lat_files++;
        loom::LatentFile lf = loom::load_latents(lat.string());
        CHECK(lf.steps == cfg.sample_steps);
        REQUIRE(!lf.frames.empty());
        CHECK(lf.frames[0].rows() == cfg.world.l);
        CHECK(lf.frames[0].cols() == cfg.world.d_latent);
    }
    CHECK(lat_files > 0);

    CmdResult roll_tf = run_cli("rollout --ckpt " + ckpt3 + " --mode teacher_forced" +
                                " --stories 2 --out " + (work_dir() / "roll_tf").string());
    CHECK(roll_tf.code == 0);

    // metrics reports a finite drift for a trained checkpoint
    CmdResult met = run_cli("metrics --ckpt " + ckpt3 + " --mode self_rollout --stories 3");
    REQUIRE(met.code == 0);
    json met_out = json::parse(met.out);
    CHECK(met_out["mode"] == "self_rollout");
    CHECK(met_out["mean_drift"].is_number());
    CHECK(run_cli("metrics --ckpt " + ckpt3 + " --mode sideways --stories 2").code == 1);

    // a poisoned checkpoint diverges and leaves a partial manifest behind
    loom::Checkpoint bad = loom::init_checkpoint(cfg);
    for (auto& [name, tensor] : bad.blocks)
        if (name == "planner.lm_head") tensor.at(0, 0) = std::nan("");
    const fs::path bad_path = work_dir() / "bad.ckpt";
    loom::save_checkpoint(bad_path.string(), bad);
    const fs::path div_dir = work_dir() / "diverged";
    CmdResult div = run_cli("train --stage 1 --config " + cfg_path + " --resume " +
                            bad_path.string() + " --out " + div_dir.string());
    CHECK(div.code == 2);
    CHECK(div.err.find("diverged") != std::string::npos);
    CHECK(fs::exists(div_dir / "diverged_manifest.json"));
    CHECK(json::parse(slurp(div_dir / "diverged_manifest.json"))["metrics"].contains(
        "diverged_at"));
}
