#include "loom/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace loom {

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"world", c.world},
                       {"planner", c.planner},
                       {"gen", c.gen},
                       {"mem_lambda", c.mem_lambda},
                       {"history_depth", c.history_depth},
                       {"n_train", c.n_train},
                       {"n_val", c.n_val},
                       {"n_test", c.n_test},
                       {"stage1_steps", c.stage1_steps},
                       {"stage1_batch", c.stage1_batch},
                       {"stage1_lr", c.stage1_lr},
                       {"stage2_steps", c.stage2_steps},
                       {"stage2_batch", c.stage2_batch},
                       {"stage2_lr", c.stage2_lr},
                       {"stage3_steps", c.stage3_steps},
                       {"stage3_batch", c.stage3_batch},
                       {"stage3_lr", c.stage3_lr},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},
                       {"weight_decay", c.weight_decay},
                       {"clip_norm", c.clip_norm},
                       {"eval_stories", c.eval_stories},
                       {"sample_steps", c.sample_steps},
                       {"stage3_self_rollout", c.stage3_self_rollout},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig def;
    c.world = j.value("world", def.world);
    c.planner = j.value("planner", def.planner);
    c.gen = j.value("gen", def.gen);
    c.mem_lambda = j.value("mem_lambda", def.mem_lambda);
    c.history_depth = j.value("history_depth", def.history_depth);
    c.n_train = j.value("n_train", def.n_train);
    c.n_val = j.value("n_val", def.n_val);
    c.n_test = j.value("n_test", def.n_test);
    c.stage1_steps = j.value("stage1_steps", def.stage1_steps);
    c.stage1_batch = j.value("stage1_batch", def.stage1_batch);
    c.stage1_lr = j.value("stage1_lr", def.stage1_lr);
    c.stage2_steps = j.value("stage2_steps", def.stage2_steps);
    c.stage2_batch = j.value("stage2_batch", def.stage2_batch);
    c.stage2_lr = j.value("stage2_lr", def.stage2_lr);
    c.stage3_steps = j.value("stage3_steps", def.stage3_steps);
    c.stage3_batch = j.value("stage3_batch", def.stage3_batch);
    c.stage3_lr = j.value("stage3_lr", def.stage3_lr);
    c.beta1 = j.value("beta1", def.beta1);
    c.beta2 = j.value("beta2", def.beta2);
    c.adam_eps = j.value("adam_eps", def.adam_eps);
    c.weight_decay = j.value("weight_decay", def.weight_decay);
    c.clip_norm = j.value("clip_norm", def.clip_norm);
    c.eval_stories = j.value("eval_stories", def.eval_stories);
    c.sample_steps = j.value("sample_steps", def.sample_steps);
    c.stage3_self_rollout = j.value("stage3_self_rollout", def.stage3_self_rollout);
    c.seed = j.value("seed", def.seed);
}

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

nlohmann::json tokenizer_json(const WorldConfig& w) {
    return {{"bos", kBos},
            {"img_open", kImgOpen},
            {"img_close", kImgClose},
            {"eop", kEop},
            {"first_starter", kFirstStarter},
            {"n_starters", w.n_starters},
            {"first_motion", kFirstStarter + w.n_starters},
            {"n_motions", w.n_motions},
            {"input_vocab", w.input_vocab()}};
}

void validate(const TrainConfig& cfg) {
    if (cfg.planner.text_vocab != cfg.world.text_vocab())
        throw std::invalid_argument("planner text vocab must match the grammar");
    if (cfg.planner.input_vocab != cfg.world.input_vocab())
        throw std::invalid_argument("planner input vocab must match the grammar");
    if (cfg.gen.planner_width != cfg.planner.d_model)
        throw std::invalid_argument("projector width must match the planner");
    if (cfg.gen.l != cfg.world.l || cfg.gen.d_latent != cfg.world.d_latent)
        throw std::invalid_argument("generator latent shape must match the world");
    const int64_t rows = cfg.planner.m_queries + cfg.world.l +
                         total_memory_length(cfg.world.l, cfg.mem_lambda, cfg.history_depth);
    if (rows > cfg.gen.max_cond_rows)
        throw std::invalid_argument("conditioning signal exceeds max_cond_rows");
    if (cfg.n_train < 1 || cfg.n_val < 1)
        throw std::invalid_argument("corpus sizes must be positive");
}

ParamSet fresh_params(const TrainConfig& cfg) {
    ParamSet ps;
    RandomStream rp(derive_seed(cfg.seed, "init.planner"));
    init_planner_params(ps, cfg.planner, rp);
    RandomStream rj(derive_seed(cfg.seed, "init.proj"));
    init_projector_params(ps, cfg.gen, rj);
    RandomStream rg(derive_seed(cfg.seed, "init.gen"));
    init_generator_params(ps, cfg.gen, rg);
    return ps;
}

struct Adam {
    double lr = 0, b1 = 0.9, b2 = 0.99, eps = 1e-8, wd = 0.0, clip = 1.0;
    int64_t t = 0;
    std::vector<Tensor> m, v;

    void init(const ParamSet& ps) {
        m.clear();
        v.clear();
        for (size_t i = 0; i < ps.size(); i++) {
            const Tensor& p = ps.value_at(static_cast<int>(i));
            m.push_back(Tensor::zeros(p.rows(), p.cols()));
            v.push_back(Tensor::zeros(p.rows(), p.cols()));
        }
    }

    void step(ParamSet& ps, const std::vector<int>& idx) {
        double sq = 0.0;
        for (int i : idx)
            for (double g : ps.grad_at(i).data) sq += g * g;
        const double norm = std::sqrt(sq);
        const double scale = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;
        t++;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (int i : idx) {
            Tensor& p = ps.value_at(i);
            const Tensor& g = ps.grad_at(i);
            Tensor& mi = m[i];
            Tensor& vi = v[i];
            for (size_t e = 0; e < p.data.size(); e++) {
                const double gg = g.data[e] * scale;
                mi.data[e] = b1 * mi.data[e] + (1.0 - b1) * gg;
                vi.data[e] = b2 * vi.data[e] + (1.0 - b2) * gg * gg;
                const double update = (mi.data[e] / c1) / (std::sqrt(vi.data[e] / c2) + eps);
                p.data[e] -= lr * (update + wd * p.data[e]);
            }
        }
    }
};

Adam make_adam(const TrainConfig& cfg, double lr, const ParamSet& ps) {
    Adam a;
    a.lr = lr;
    a.b1 = cfg.beta1;
    a.b2 = cfg.beta2;
    a.eps = cfg.adam_eps;
    a.wd = cfg.weight_decay;
    a.clip = cfg.clip_norm;
    a.init(ps);
    return a;
}

Checkpoint build_ckpt(const TrainConfig& cfg, const ParamSet& ps, int stage, int pending_stage,
                      int pending_steps, const Adam* opt) {
    Checkpoint c;
    c.stage = stage;
    c.config = cfg;
    c.meta = {{"seed", cfg.seed},
              {"pending_stage", pending_stage},
              {"pending_steps", pending_steps},
              {"opt_step", opt ? opt->t : 0},
              {"tokenizer", tokenizer_json(cfg.world)}};
    for (size_t i = 0; i < ps.size(); i++)
        put_block(c, ps.names()[i], ps.value_at(static_cast<int>(i)));
    if (opt) {
        for (size_t i = 0; i < ps.size(); i++) {
            put_block(c, "opt.m." + ps.names()[i], opt->m[i]);
            put_block(c, "opt.v." + ps.names()[i], opt->v[i]);
        }
    }
    return c;
}

void load_opt(const Checkpoint& ckpt, const ParamSet& ps, Adam& opt) {
    if (!has_block(ckpt, "opt.m." + ps.names()[0]))
        throw std::runtime_error("checkpoint has no optimizer state to resume");
    for (size_t i = 0; i < ps.size(); i++) {
        opt.m[i] = get_block(ckpt, "opt.m." + ps.names()[i]);
        opt.v[i] = get_block(ckpt, "opt.v." + ps.names()[i]);
    }
    opt.t = ckpt.meta.at("opt_step").get<int64_t>();
}

void check_config(const Checkpoint& ckpt, const TrainConfig& cfg) {
    nlohmann::json want = cfg;
    if (ckpt.config != want)
        throw std::runtime_error("checkpoint config does not match the run config");
}

nlohmann::json checksum_snapshot(const ParamSet& ps) {
    return {{"planner_text", hex64(ps.checksum(planner_text_param_names(ps)))},
            {"planner_queries", hex64(ps.checksum({"planner.queries"}))},
            {"proj", hex64(ps.checksum_prefix("proj."))},
            {"gen", hex64(ps.checksum_prefix("gen."))}};
}

void head_tail_metrics(RunManifest& man) {
    const size_t n = man.losses.size();
    if (n == 0) return;
    const size_t w = std::max<size_t>(1, n / 4);
    double head = 0.0, tail = 0.0;
    for (size_t i = 0; i < w; i++) head += man.losses[i];
    for (size_t i = n - w; i < n; i++) tail += man.losses[i];
    man.metrics["loss_head"] = head / w;
    man.metrics["loss_tail"] = tail / w;
}

std::vector<int> trainable_indices(const ParamSet& ps, const std::vector<std::string>& names) {
    std::vector<int> idx;
    idx.reserve(names.size());
    for (const auto& n : names) idx.push_back(ps.index_of(n));
    return idx;
}

// resume bookkeeping shared by the three stage runners
int resume_point(const Checkpoint& start, int this_stage, int prev_stage) {
    const int pending = start.meta.value("pending_stage", 0);
    if (pending == this_stage) return start.meta.value("pending_steps", 0);
    if (pending != 0)
        throw std::runtime_error("checkpoint is mid-way through a different stage");
    if (start.stage < prev_stage)
        throw std::runtime_error("stage " + std::to_string(this_stage) + " requires a stage-" +
                                 std::to_string(prev_stage) + " checkpoint");
    return 0;
}

std::vector<ConditionSegment> query_only_segments(int m) {
    return {{ConditionSegment::QueryRows, 0, 0, m}};
}

// projected query states per frame, teacher-forced layout, no gradients
std::vector<Tensor> projected_query_values(ParamSet& ps, const TrainConfig& cfg,
                                           const PlannerExample& ex) {
    Graph g(&ps);
    PlannerOutput out = planner_forward(g, cfg.planner, ex.input);
    std::vector<Tensor> proj;
    proj.reserve(out.query_states.size());
    for (Graph::Ref q : out.query_states)
        proj.push_back(g.value(project_queries(g, cfg.gen, q)));
    return proj;
}

ConditionSignal full_condition(const TrainConfig& cfg, const Tensor& proj_q,
                               const Tensor& f_cond, const MemoryBank& bank) {
    return assemble_condition(proj_q, f_cond,
                              bank.pooled_history(cfg.history_depth, cfg.mem_lambda));
}

double eval_fm_items(ParamSet& ps, const TrainConfig& cfg, const std::vector<FMBatchItem>& items,
                     uint64_t seed) {
    RandomStream rs(derive_seed(seed, "eval.fm"));
    double sum = 0.0;
    size_t done = 0;
    while (done < items.size()) {
        const size_t take = std::min<size_t>(16, items.size() - done);
        std::vector<FMBatchItem> chunk(items.begin() + done, items.begin() + done + take);
        sum += fm_loss(ps, cfg.gen, chunk, rs, false) * take;
        done += take;
    }
    return sum / items.size();
}

}  // namespace

std::vector<StorySample> synth_stories(const World& world, int n, uint64_t seed,
                                       const std::string& purpose) {
    std::vector<StorySample> out;
    out.reserve(n);
    for (int i = 0; i < n; i++) {
        RandomStream rs(derive_seed(seed, purpose.c_str(), i));
        StorySample s = world.roll_story(world.sample_frame_count(rs), rs);
        s.id = i;
        out.push_back(std::move(s));
    }
    return out;
}

TrainContext make_context(const TrainConfig& cfg) {
    validate(cfg);
    TrainContext ctx{World(cfg.world), {}, {}};
    ctx.train_set = synth_stories(ctx.world, cfg.n_train, cfg.seed, "corpus.train");
    ctx.val_set = synth_stories(ctx.world, cfg.n_val, cfg.seed, "corpus.val");
    return ctx;
}

nlohmann::json RunManifest::to_json() const {
    return {{"stage", stage},     {"seed", seed},           {"config", config},
            {"losses", losses},   {"checksums", checksums}, {"metrics", metrics}};
}

void RunManifest::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    out << to_json().dump(2) << "\n";
}

Checkpoint init_checkpoint(const TrainConfig& cfg) {
    validate(cfg);
    ParamSet ps = fresh_params(cfg);
    return build_ckpt(cfg, ps, 0, 0, 0, nullptr);
}

ParamSet params_from_checkpoint(const Checkpoint& ckpt, const TrainConfig& cfg) {
    ParamSet ps = fresh_params(cfg);
    for (const auto& name : ps.names()) {
        const Tensor& b = get_block(ckpt, name);
        if (!ps.value(name).same_shape(b))
            throw std::runtime_error("checkpoint block shape mismatch: " + name);
        ps.value(name) = b;
    }
    return ps;
}

StageOutput run_stage1(const TrainContext& ctx, const TrainConfig& cfg, const Checkpoint& start,
                       int run_until) {
    check_config(start, cfg);
    const int first = resume_point(start, 1, 0);
    if (start.meta.value("pending_stage", 0) == 0 && start.stage != 0)
        throw std::runtime_error("stage 1 must start from a fresh checkpoint");

    ParamSet ps = params_from_checkpoint(start, cfg);
    Adam opt = make_adam(cfg, cfg.stage1_lr, ps);
    if (first > 0) load_opt(start, ps, opt);

    std::vector<std::string> train_names;
    for (const auto& n : ps.names_with_prefix("planner."))
        if (n != "planner.input_embed") train_names.push_back(n);
    const std::vector<int> idx = trainable_indices(ps, train_names);

    std::vector<PlannerExample> cache;
    cache.reserve(ctx.train_set.size());
    for (const auto& s : ctx.train_set) cache.push_back(make_teacher_forced(s, cfg.planner));

    RunManifest man;
    man.stage = "stage1";
    man.seed = cfg.seed;
    man.config = cfg;
    man.checksums["before"] = checksum_snapshot(ps);

    const int budget = cfg.stage1_steps;
    const int last = run_until < 0 ? budget : std::min(run_until, budget);
    if (last < first) throw std::invalid_argument("run_until precedes the resumed step");

    for (int step = first; step < last; step++) {
        RandomStream rs(derive_seed(cfg.seed, "stage1.step", step));
        std::vector<PlannerExample> batch;
        for (int b = 0; b < cfg.stage1_batch; b++)
            batch.push_back(cache[rs.uniform_int(0, static_cast<int>(cache.size()) - 1)]);
        Graph g(&ps);
        Graph::Ref loss = stage1_loss(g, cfg.planner, batch);
        const double lv = g.scalar(loss);
        man.losses.push_back(lv);
        if (!std::isfinite(lv)) {
            man.metrics["diverged_at"] = step;
            man.checksums["after"] = checksum_snapshot(ps);
            throw TrainDivergence("stage 1 loss diverged at step " + std::to_string(step),
                                  std::move(man));
        }
        ps.zero_grads();
        g.backward(loss);
        opt.step(ps, idx);
    }

    man.checksums["after"] = checksum_snapshot(ps);
    head_tail_metrics(man);

    StageOutput out;
    if (last < budget) {
        out.ckpt = build_ckpt(cfg, ps, 0, 1, last, &opt);
    } else {
        man.metrics["val_ce"] = eval_text_ce(ps, cfg, ctx.val_set);
        man.metrics["unigram_baseline"] = unigram_entropy(ctx.train_set);
        out.ckpt = build_ckpt(cfg, ps, 1, 0, 0, nullptr);
    }
    out.manifest = std::move(man);
    return out;
}

StageOutput run_stage2(const TrainContext& ctx, const TrainConfig& cfg, const Checkpoint& start,
                       int run_until) {
    check_config(start, cfg);
    const int first = resume_point(start, 2, 1);

    ParamSet ps = params_from_checkpoint(start, cfg);
    Adam opt = make_adam(cfg, cfg.stage2_lr, ps);
    if (first > 0) load_opt(start, ps, opt);

    std::vector<std::string> train_names = {"planner.queries"};
    for (const auto& n : ps.names_with_prefix("proj.")) train_names.push_back(n);
    const std::vector<int> idx = trainable_indices(ps, train_names);

    const uint64_t text_before = ps.checksum(planner_text_param_names(ps));
    const uint64_t gen_before = ps.checksum_prefix("gen.");

    std::vector<PlannerExample> cache;
    cache.reserve(ctx.train_set.size());
    for (const auto& s : ctx.train_set) cache.push_back(make_teacher_forced(s, cfg.planner));

    RunManifest man;
    man.stage = "stage2";
    man.seed = cfg.seed;
    man.config = cfg;
    man.checksums["before"] = checksum_snapshot(ps);

    const int budget = cfg.stage2_steps;
    const int last = run_until < 0 ? budget : std::min(run_until, budget);
    if (last < first) throw std::invalid_argument("run_until precedes the resumed step");

    const int m = cfg.planner.m_queries;
    const auto segs = query_only_segments(m);

    for (int step = first; step < last; step++) {
        RandomStream rs(derive_seed(cfg.seed, "stage2.step", step));
        struct Item {
            int story;
            int frame;
            double t;
            Tensor eps;
        };
        std::vector<Item> items;
        for (int b = 0; b < cfg.stage2_batch; b++) {
            Item it;
            it.story = rs.uniform_int(0, static_cast<int>(cache.size()) - 1);
            it.frame = rs.uniform_int(0, ctx.train_set[it.story].n_frames() - 1);
            it.t = rs.uniform();
            it.eps = Tensor(cfg.world.l, cfg.world.d_latent);
            for (double& v : it.eps.data) v = rs.normal();
            items.push_back(std::move(it));
        }
        Graph g(&ps);
        std::vector<Graph::Ref> terms;
        for (const auto& it : items) {
            PlannerOutput pout = planner_forward(g, cfg.planner, cache[it.story].input);
            Graph::Ref proj = project_queries(g, cfg.gen, pout.query_states[it.frame]);
            terms.push_back(fm_term(g, cfg.gen, ctx.train_set[it.story].frames[it.frame],
                                    it.eps, it.t, proj, segs));
        }
        Graph::Ref loss = g.mean_of(terms);
        const double lv = g.scalar(loss);
        man.losses.push_back(lv);
        if (!std::isfinite(lv)) {
            man.metrics["diverged_at"] = step;
            man.checksums["after"] = checksum_snapshot(ps);
            throw TrainDivergence("stage 2 loss diverged at step " + std::to_string(step),
                                  std::move(man));
        }
        ps.zero_grads();
        g.backward(loss);
        opt.step(ps, idx);
    }

    if (ps.checksum(planner_text_param_names(ps)) != text_before)
        throw std::runtime_error("stage 2 modified the frozen text path");
    if (ps.checksum_prefix("gen.") != gen_before)
        throw std::runtime_error("stage 2 modified the frozen velocity net");

    man.checksums["after"] = checksum_snapshot(ps);
    head_tail_metrics(man);

    StageOutput out;
    if (last < budget) {
        out.ckpt = build_ckpt(cfg, ps, start.stage, 2, last, &opt);
    } else {
        std::vector<FMBatchItem> val_items;
        for (const auto& s : ctx.val_set) {
            PlannerExample ex = make_teacher_forced(s, cfg.planner);
            std::vector<Tensor> proj = projected_query_values(ps, cfg, ex);
            for (int f = 0; f < s.n_frames(); f++)
                val_items.push_back({s.frames[f], {proj[f], segs}});
        }
        man.metrics["val_fm"] = eval_fm_items(ps, cfg, val_items, cfg.seed);
        out.ckpt = build_ckpt(cfg, ps, 2, 0, 0, nullptr);
    }
    out.manifest = std::move(man);
    return out;
}

StageOutput run_stage3(const TrainContext& ctx, const TrainConfig& cfg, const Checkpoint& start,
                       int run_until, bool require_stage2) {
    check_config(start, cfg);
    const int first = resume_point(start, 3, require_stage2 ? 2 : 1);

    ParamSet ps = params_from_checkpoint(start, cfg);
    Adam opt = make_adam(cfg, cfg.stage3_lr, ps);
    if (first > 0) load_opt(start, ps, opt);

    const std::vector<int> idx = trainable_indices(ps, ps.names_with_prefix("gen."));

    const uint64_t text_before = ps.checksum(planner_text_param_names(ps));
    const uint64_t queries_before = ps.checksum({"planner.queries"});
    const uint64_t proj_before = ps.checksum_prefix("proj.");

    // teacher-forced conditioning signals are fixed by the frozen planner and
    // projector, so build them once per story
    std::vector<std::vector<Tensor>> proj_q(ctx.train_set.size());
    std::vector<FMBatchItem> pool;
    for (size_t si = 0; si < ctx.train_set.size(); si++) {
        const StorySample& s = ctx.train_set[si];
        PlannerExample ex = make_teacher_forced(s, cfg.planner);
        proj_q[si] = projected_query_values(ps, cfg, ex);
        MemoryBank bank(cfg.world.l, cfg.world.d_latent, cfg.history_depth);
        for (int f = 0; f < s.n_frames(); f++) {
            pool.push_back({s.frames[f], full_condition(cfg, proj_q[si][f], s.f_cond, bank)});
            bank.push(s.frames[f], f);
        }
    }

    RunManifest man;
    man.stage = "stage3";
    man.seed = cfg.seed;
    man.config = cfg;
    man.checksums["before"] = checksum_snapshot(ps);

    const int budget = cfg.stage3_steps;
    const int last = run_until < 0 ? budget : std::min(run_until, budget);
    if (last < first) throw std::invalid_argument("run_until precedes the resumed step");

    for (int step = first; step < last; step++) {
        RandomStream rs(derive_seed(cfg.seed, "stage3.step", step));
        double lv = 0.0;
        if (!cfg.stage3_self_rollout) {
            std::vector<FMBatchItem> batch;
            for (int b = 0; b < cfg.stage3_batch; b++)
                batch.push_back(pool[rs.uniform_int(0, static_cast<int>(pool.size()) - 1)]);
            ps.zero_grads();
            lv = fm_loss(ps, cfg.gen, batch, rs, true);
        } else {
            // memory filled with the net's own samples instead of ground truth
            std::vector<FMBatchItem> batch;
            for (int b = 0; b < cfg.stage3_batch; b++) {
                const int si = rs.uniform_int(0, static_cast<int>(ctx.train_set.size()) - 1);
                const StorySample& s = ctx.train_set[si];
                const int f = rs.uniform_int(0, s.n_frames() - 1);
                MemoryBank bank(cfg.world.l, cfg.world.d_latent, cfg.history_depth);
                for (int p = 0; p < f; p++) {
                    ConditionSignal c = full_condition(cfg, proj_q[si][p], s.f_cond, bank);
                    bank.push(sample_euler(ps, cfg.gen, c, cfg.sample_steps, rs), p);
                }
                batch.push_back({s.frames[f], full_condition(cfg, proj_q[si][f], s.f_cond, bank)});
            }
            ps.zero_grads();
            lv = fm_loss(ps, cfg.gen, batch, rs, true);
        }
        man.losses.push_back(lv);
        if (!std::isfinite(lv)) {
            man.metrics["diverged_at"] = step;
            man.checksums["after"] = checksum_snapshot(ps);
            throw TrainDivergence("stage 3 loss diverged at step " + std::to_string(step),
                                  std::move(man));
        }
        opt.step(ps, idx);
    }

    if (ps.checksum(planner_text_param_names(ps)) != text_before)
        throw std::runtime_error("stage 3 modified the frozen text path");
    if (ps.checksum({"planner.queries"}) != queries_before)
        throw std::runtime_error("stage 3 modified the frozen queries");
    if (ps.checksum_prefix("proj.") != proj_before)
        throw std::runtime_error("stage 3 modified the frozen projector");

    man.checksums["after"] = checksum_snapshot(ps);
    head_tail_metrics(man);

    StageOutput out;
    if (last < budget) {
        out.ckpt = build_ckpt(cfg, ps, start.stage, 3, last, &opt);
    } else {
        std::vector<FMBatchItem> val_items;
        for (const auto& s : ctx.val_set) {
            PlannerExample ex = make_teacher_forced(s, cfg.planner);
            std::vector<Tensor> proj = projected_query_values(ps, cfg, ex);
            MemoryBank bank(cfg.world.l, cfg.world.d_latent, cfg.history_depth);
            for (int f = 0; f < s.n_frames(); f++) {
                val_items.push_back({s.frames[f], full_condition(cfg, proj[f], s.f_cond, bank)});
                bank.push(s.frames[f], f);
            }
        }
        man.metrics["val_fm"] = eval_fm_items(ps, cfg, val_items, cfg.seed);
        out.ckpt = build_ckpt(cfg, ps, 3, 0, 0, nullptr);
    }
    out.manifest = std::move(man);
    return out;
}

RolloutStory rollout(ParamSet& ps, const TrainConfig& cfg, const std::vector<int>& input_tokens,
                     const Tensor& f_cond, int n_frames, RolloutMode mode,
                     const std::vector<Tensor>* truth_frames, uint64_t seed) {
    if (n_frames < 1) throw std::invalid_argument("rollout needs at least one frame");
    if (mode == RolloutMode::TeacherForced && truth_frames == nullptr)
        throw std::invalid_argument("teacher forcing needs ground-truth frames");

    PlanLimits limits;
    limits.max_blocks = std::min(n_frames, cfg.planner.max_blocks);
    RolloutStory out;
    out.plan = generate_plan(ps, cfg.planner, input_tokens, limits);
    out.empty = out.plan.n_blocks() == 0;

    MemoryBank bank(cfg.world.l, cfg.world.d_latent, cfg.history_depth);
    for (int b = 0; b < out.plan.n_blocks(); b++) {
        Graph g(&ps);
        Graph::Ref proj =
            project_queries(g, cfg.gen, g.constant(out.plan.query_states[b]));
        ConditionSignal cond = full_condition(cfg, g.value(proj), f_cond, bank);
        RandomStream fr(derive_seed(seed, "rollout.frame", b));
        Tensor frame = sample_euler(ps, cfg.gen, cond, cfg.sample_steps, fr);
        const bool use_truth = mode == RolloutMode::TeacherForced &&
                               b < static_cast<int>(truth_frames->size());
        bank.push(use_truth ? (*truth_frames)[b] : frame, b);
        out.frames.push_back(std::move(frame));
    }
    return out;
}

double mean_rollout_drift(ParamSet& ps, const TrainConfig& cfg, const World& world,
                          const std::vector<StorySample>& stories, RolloutMode mode,
                          uint64_t seed) {
    double sum = 0.0;
    int counted = 0;
    for (size_t i = 0; i < stories.size(); i++) {
        const StorySample& s = stories[i];
        RolloutStory r = rollout(ps, cfg, s.input_tokens, s.f_cond, s.n_frames(), mode,
                                 &s.frames, derive_seed(seed, "drift.story", i));
        if (r.frames.size() < 2) continue;
        sum += world.drift_metric(r.frames);
        counted++;
    }
    if (counted == 0) throw std::runtime_error("no rollout produced enough frames for drift");
    return sum / counted;
}

std::vector<Tensor> sample_query_conditioned(ParamSet& ps, const TrainConfig& cfg,
                                             const StorySample& story, bool zero_condition,
                                             uint64_t seed) {
    PlannerExample ex = make_teacher_forced(story, cfg.planner);
    std::vector<Tensor> proj = projected_query_values(ps, cfg, ex);
    const auto segs = query_only_segments(cfg.planner.m_queries);
    std::vector<Tensor> frames;
    for (int f = 0; f < story.n_frames(); f++) {
        ConditionSignal cond;
        cond.rows = zero_condition
                        ? Tensor::zeros(cfg.planner.m_queries, cfg.world.d_latent)
                        : proj[f];
        cond.segments = segs;
        RandomStream fr(derive_seed(seed, "qcond.frame", f));
        frames.push_back(sample_euler(ps, cfg.gen, cond, cfg.sample_steps, fr));
    }
    return frames;
}

double persistent_recovery_rmse(const World& world, const StorySample& story,
                                const std::vector<Tensor>& gen_frames) {
    if (gen_frames.empty()) throw std::invalid_argument("no frames to score");
    const std::vector<double>& truth = story.states[0].persistent;
    double sq = 0.0;
    int n = 0;
    for (const Tensor& f : gen_frames) {
        SceneState rec = world.recover_state(f);
        for (size_t i = 0; i < truth.size(); i++) {
            const double d = rec.persistent[i] - truth[i];
            sq += d * d;
            n++;
        }
    }
    return std::sqrt(sq / n);
}

double eval_text_ce(ParamSet& ps, const TrainConfig& cfg,
                    const std::vector<StorySample>& stories) {
    if (stories.empty()) throw std::invalid_argument("empty evaluation set");
    double sum = 0.0;
    for (const auto& s : stories) {
        Graph g(&ps);
        sum += g.scalar(stage1_loss(g, cfg.planner, {make_teacher_forced(s, cfg.planner)}));
    }
    return sum / stories.size();
}

Tensor text_probe(ParamSet& ps, const TrainConfig& cfg,
                  const std::vector<StorySample>& stories) {
    if (stories.empty()) throw std::invalid_argument("empty probe set");
    std::vector<Tensor> parts;
    int total_rows = 0;
    for (const auto& s : stories) {
        Graph g(&ps);
        PlannerExample ex = make_teacher_forced(s, cfg.planner);
        PlannerOutput out = planner_forward(g, cfg.planner, ex.input);
        parts.push_back(g.value(out.text_logits));
        total_rows += parts.back().rows();
    }
    Tensor probe(total_rows, parts[0].cols());
    int at = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data.begin(), p.data.end(), probe.data.begin() + static_cast<size_t>(at) * probe.cols());
        at += p.rows();
    }
    return probe;
}

nlohmann::json AblationResult::to_json() const {
    return {{"seed", seed},
            {"drift", {{"s2_on_s3_on", drift[1][1]},
                       {"s2_on_s3_off", drift[1][0]},
                       {"s2_off_s3_on", drift[0][1]},
                       {"s2_off_s3_off", drift[0][0]}}}};
}

AblationResult ablation_run(const TrainConfig& cfg, const std::string& manifest_dir) {
    TrainContext ctx = make_context(cfg);
    Checkpoint c0 = init_checkpoint(cfg);
    StageOutput s1 = run_stage1(ctx, cfg, c0);
    StageOutput s2 = run_stage2(ctx, cfg, s1.ckpt);
    StageOutput s3_full = run_stage3(ctx, cfg, s2.ckpt);
    StageOutput s3_no2 = run_stage3(ctx, cfg, s1.ckpt, -1, false);

    if (!manifest_dir.empty()) {
        s1.manifest.save(manifest_dir + "/stage1.json");
        s2.manifest.save(manifest_dir + "/stage2.json");
        s3_full.manifest.save(manifest_dir + "/stage3_with2.json");
        s3_no2.manifest.save(manifest_dir + "/stage3_no2.json");
    }

    std::vector<StorySample> eval_set =
        synth_stories(ctx.world, cfg.eval_stories, cfg.seed, "ablation.eval");
    const uint64_t drift_seed = derive_seed(cfg.seed, "ablation.drift");

    AblationResult res;
    res.seed = cfg.seed;
    const Checkpoint* cells[2][2] = {{&s1.ckpt, &s3_no2.ckpt}, {&s2.ckpt, &s3_full.ckpt}};
    for (int a = 0; a < 2; a++) {
        for (int b = 0; b < 2; b++) {
            ParamSet ps = params_from_checkpoint(*cells[a][b], cfg);
            res.drift[a][b] = mean_rollout_drift(ps, cfg, ctx.world, eval_set,
                                                 RolloutMode::SelfRollout, drift_seed);
        }
    }
    if (!manifest_dir.empty()) {
        std::ofstream out(manifest_dir + "/ablation.json", std::ios::trunc);
        out << res.to_json().dump(2) << "\n";
    }
    return res;
}

void store_bank(Checkpoint& ckpt, const MemoryBank& bank, const std::string& prefix) {
    nlohmann::json frames = nlohmann::json::array();
    for (int lag = bank.size(); lag >= 1; lag--) {  // oldest first
        const FrameFeature& f = bank.raw(lag);
        frames.push_back(f.frame_index);
        put_block(ckpt, prefix + ".entry" + std::to_string(bank.size() - lag), f.feature);
    }
    ckpt.meta[prefix + ".frames"] = frames;
    ckpt.meta[prefix + ".capacity"] = bank.capacity();
}

MemoryBank load_bank(const Checkpoint& ckpt, const std::string& prefix, int l, int d,
                     int capacity) {
    MemoryBank bank(l, d, capacity);
    if (!ckpt.meta.contains(prefix + ".frames")) return bank;
    const auto& frames = ckpt.meta.at(prefix + ".frames");
    for (size_t i = 0; i < frames.size(); i++)
        bank.push(get_block(ckpt, prefix + ".entry" + std::to_string(i)), frames[i].get<int>());
    return bank;
}

}  // namespace loom
