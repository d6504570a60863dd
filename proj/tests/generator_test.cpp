#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "loom/generator.hpp"
#include "loom/gradcheck.hpp"
#include "loom/membank.hpp"
#include "loom/rng.hpp"

using namespace loom;

namespace {

Tensor rand_tensor(int r, int c, RandomStream& rng) {
    Tensor t(r, c);
    for (double& v : t.data) v = rng.normal();
    return t;
}

void zero_param(ParamSet& ps, const std::string& name) {
    Tensor& t = ps.value(name);
    std::fill(t.data.begin(), t.data.end(), 0.0);
}

GeneratorConfig tiny_config() {
    GeneratorConfig cfg;
    cfg.l = 4;
    cfg.d_latent = 4;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.planner_width = 8;
    cfg.time_freqs = 2;
    cfg.max_cond_rows = 24;
    cfg.n_steps = 4;
    return cfg;
}

// query rows, condition frame, and a two-entry pooled history
ConditionSignal tiny_signal(const GeneratorConfig& cfg, RandomStream& rng) {
    MemoryBank bank(cfg.l, cfg.d_latent, 2);
    bank.push(rand_tensor(cfg.l, cfg.d_latent, rng), 0);
    bank.push(rand_tensor(cfg.l, cfg.d_latent, rng), 1);
    return assemble_condition(rand_tensor(2, cfg.d_latent, rng),
                              rand_tensor(cfg.l, cfg.d_latent, rng), bank.pooled_history(2, 2));
}

}  // namespace

TEST_CASE("the noise interpolation hits both endpoints bitwise") {
    RandomStream rng(301);
    Tensor x0 = rand_tensor(3, 5, rng);
    Tensor eps = rand_tensor(3, 5, rng);
    CHECK(bitwise_equal(fm_interpolate(x0, eps, 0.0), x0));
    CHECK(bitwise_equal(fm_interpolate(x0, eps, 1.0), eps));

    Tensor a = Tensor::row_vector({0.0, 2.0});
    Tensor b = Tensor::row_vector({2.0, 0.0});
    Tensor mid = fm_interpolate(a, b, 0.5);
    CHECK(mid.at(0, 0) == 1.0);
    CHECK(mid.at(0, 1) == 1.0);

    const double t = 0.3;
    Tensor xt = fm_interpolate(x0, eps, t);
    for (size_t i = 0; i < xt.data.size(); i++)
        CHECK(xt.data[i] == (1.0 - t) * x0.data[i] + t * eps.data[i]);

    CHECK_THROWS_WITH(fm_interpolate(x0, eps, 1.5), doctest::Contains("lie in [0, 1]"));
    CHECK_THROWS_WITH(fm_interpolate(x0, eps, -0.1), doctest::Contains("lie in [0, 1]"));
    Tensor wrong(3, 4);
    CHECK_THROWS_WITH(fm_interpolate(x0, wrong, 0.5), doctest::Contains("shape mismatch"));
}

TEST_CASE("a zeroed output layer prices pure-noise targets at one") {
    GeneratorConfig cfg;  // default size for a decent sample
    ParamSet ps;
    RandomStream rng(302);
    init_generator_params(ps, cfg, rng);
    zero_param(ps, "gen.out.w");
    zero_param(ps, "gen.out.b");

    ConditionSignal cond =
        assemble_condition(Tensor::zeros(4, cfg.d_latent), Tensor::zeros(cfg.l, cfg.d_latent), {});
    std::vector<FMBatchItem> batch(32);
    for (auto& item : batch) {
        item.x0 = Tensor::zeros(cfg.l, cfg.d_latent);
        item.cond = cond;
    }
    RandomStream draw(303);
    // v == 0 and x0 == 0, so each term is the mean square of its noise draw
    const double loss = fm_loss(ps, cfg, batch, draw, false);
    CHECK(std::fabs(loss - 1.0) < 0.1);
}

TEST_CASE("the flow-matching loss replays bitwise from its stream") {
    GeneratorConfig cfg = tiny_config();
    ParamSet ps;
    RandomStream rng(304);
    init_generator_params(ps, cfg, rng);
    RandomStream sig_rng(305);
    ConditionSignal cond = tiny_signal(cfg, sig_rng);

    std::vector<FMBatchItem> batch(3);
    for (auto& item : batch) {
        item.x0 = rand_tensor(cfg.l, cfg.d_latent, sig_rng);
        item.cond = cond;
    }
    RandomStream d1(306), d2(306);
    const double l1 = fm_loss(ps, cfg, batch, d1, false);
    const double l2 = fm_loss(ps, cfg, batch, d2, false);
    CHECK(l1 == l2);
}

TEST_CASE("batch order does not move the mean loss") {
    GeneratorConfig cfg = tiny_config();
    ParamSet ps;
    RandomStream rng(307);
    init_generator_params(ps, cfg, rng);
    ConditionSignal cond = tiny_signal(cfg, rng);

    Tensor x0a = rand_tensor(cfg.l, cfg.d_latent, rng), epsa = rand_tensor(cfg.l, cfg.d_latent, rng);
    Tensor x0b = rand_tensor(cfg.l, cfg.d_latent, rng), epsb = rand_tensor(cfg.l, cfg.d_latent, rng);

    Graph g(&ps);
    Graph::Ref cref = g.constant(cond.rows);
    Graph::Ref ta = fm_term(g, cfg, x0a, epsa, 0.3, cref, cond.segments);
    Graph::Ref tb = fm_term(g, cfg, x0b, epsb, 0.7, cref, cond.segments);
    const double ab = g.scalar(g.mean_of({ta, tb}));
    const double ba = g.scalar(g.mean_of({tb, ta}));
    CHECK(std::fabs(ab - ba) <= 1e-12);
}

TEST_CASE("velocity gradients agree with finite differences") {
    GeneratorConfig cfg = tiny_config();
    ParamSet ps;
    RandomStream rng(308);
    init_generator_params(ps, cfg, rng);
    RandomStream data(309);
    ConditionSignal cond = tiny_signal(cfg, data);
    Tensor x0 = rand_tensor(cfg.l, cfg.d_latent, data);
    Tensor eps = rand_tensor(cfg.l, cfg.d_latent, data);

    auto loss_fn = [&](ParamSet& p, bool with_grad) {
        Graph g(&p);
        Graph::Ref loss = fm_term(g, cfg, x0, eps, 0.37, g.constant(cond.rows), cond.segments);
        if (with_grad) g.backward(loss);
        return g.scalar(loss);
    };
    GradCheckReport rep = grad_check(loss_fn, ps, 1e-5);
    INFO("worst param: ", rep.worst_param, " rel err ", rep.max_rel_err);
    CHECK(rep.passed(1e-4));
}

TEST_CASE("gradients flow through the query projection into the conditioning") {
    GeneratorConfig cfg = tiny_config();
    ParamSet ps;
    RandomStream rng(310);
    init_projector_params(ps, cfg, rng);
    init_generator_params(ps, cfg, rng);
    RandomStream data(311);
    Tensor rawq = rand_tensor(2, cfg.planner_width, data);
    Tensor x0 = rand_tensor(cfg.l, cfg.d_latent, data);
    Tensor eps = rand_tensor(cfg.l, cfg.d_latent, data);
    ConditionSegment seg;
    seg.kind = ConditionSegment::QueryRows;
    seg.start = 0;
    seg.len = 2;

    auto loss_fn = [&](ParamSet& p, bool with_grad) {
        Graph g(&p);
        Graph::Ref qproj = project_queries(g, cfg, g.constant(rawq));
        Graph::Ref loss = fm_term(g, cfg, x0, eps, 0.55, qproj, {seg});
        if (with_grad) g.backward(loss);
        return g.scalar(loss);
    };
    GradCheckReport rep = grad_check(loss_fn, ps, 1e-5);
    INFO("worst param: ", rep.worst_param, " rel err ", rep.max_rel_err);
    CHECK(rep.passed(1e-4));

    // sanity on the projection map itself with a square projector
    GeneratorConfig sq = cfg;
    sq.planner_width = sq.d_latent;
    ParamSet ps2;
    init_projector_params(ps2, sq, data);
    zero_param(ps2, "proj.b");
    Tensor& w = ps2.value("proj.w");
    std::fill(w.data.begin(), w.data.end(), 0.0);
    for (int i = 0; i < w.rows(); i++) w.at(i, i) = 1.0;
    Tensor rawq_sq = rand_tensor(3, sq.planner_width, data);
    Graph g(&ps2);
    CHECK(bitwise_equal(g.value(project_queries(g, sq, g.constant(rawq_sq))), rawq_sq));

    std::fill(w.data.begin(), w.data.end(), 0.0);
    Graph g2(&ps2);
    const Tensor& z = g2.value(project_queries(g2, sq, g2.constant(rawq_sq)));
    CHECK(max_abs_diff(z, Tensor::zeros(z.rows(), z.cols())) == 0.0);

    Tensor narrow(2, sq.planner_width + 1);
    Graph g3(&ps2);
    CHECK_THROWS_WITH(project_queries(g3, sq, g3.constant(narrow)),
                      doctest::Contains("does not match the projector"));
}

TEST_CASE("the velocity field reads the memory rows") {
    GeneratorConfig cfg = tiny_config();
    ParamSet ps;
    RandomStream rng(312);
    init_generator_params(ps, cfg, rng);
    RandomStream data(313);

    MemoryBank bank(cfg.l, cfg.d_latent, 2);
    bank.push(rand_tensor(cfg.l, cfg.d_latent, data), 0);
    bank.push(rand_tensor(cfg.l, cfg.d_latent, data), 1);
    Tensor queries = rand_tensor(2, cfg.d_latent, data);
    Tensor f_cond = rand_tensor(cfg.l, cfg.d_latent, data);
    auto history = bank.pooled_history(2, 2);
    ConditionSignal base = assemble_condition(queries, f_cond, history);

    Tensor xt = rand_tensor(cfg.l, cfg.d_latent, data);
    auto velocity = [&](const ConditionSignal& sig) {
        Graph g(&ps);
        return g.value(velocity_forward(g, cfg, g.constant(xt), 0.5, g.constant(sig.rows),
                                        sig.segments));
    };
    Tensor v_base = velocity(base);

    // editing one memory row must move the output
    ConditionSignal edited = base;
    edited.rows.at(edited.rows.rows() - 1, 0) += 0.5;
    CHECK(max_abs_diff(velocity(edited), v_base) > 0.0);

    // and so must permuting the history entries
    std::swap(history[0], history[1]);
    ConditionSignal swapped = assemble_condition(queries, f_cond, history);
    CHECK(max_abs_diff(velocity(swapped), v_base) > 0.0);
}

TEST_CASE("malformed conditioning is rejected") {
    GeneratorConfig cfg = tiny_config();
    ParamSet ps;
    RandomStream rng(314);
    init_generator_params(ps, cfg, rng);
    Tensor xt(cfg.l, cfg.d_latent);

    auto run = [&](const Tensor& rows, int seg_len) {
        ConditionSegment seg;
        seg.kind = ConditionSegment::QueryRows;
        seg.len = seg_len;
        Graph g(&ps);
        velocity_forward(g, cfg, g.constant(xt), 0.5, g.constant(rows), {seg});
    };
    CHECK_THROWS_WITH(run(Tensor(3, 2 * cfg.d_latent), 3),
                      doctest::Contains("conditioning width mismatch"));
    CHECK_THROWS_WITH(run(Tensor(cfg.max_cond_rows + 1, cfg.d_latent), cfg.max_cond_rows + 1),
                      doctest::Contains("conditioning too long"));
    CHECK_THROWS_WITH(run(Tensor(4, cfg.d_latent), 3),
                      doctest::Contains("segment table does not cover"));
}

TEST_CASE("a zero velocity field leaves the noise draw untouched") {
    GeneratorConfig cfg;
    ParamSet ps;
    RandomStream rng(315);
    init_generator_params(ps, cfg, rng);
    zero_param(ps, "gen.out.w");
    zero_param(ps, "gen.out.b");
    ConditionSignal cond =
        assemble_condition(Tensor::zeros(4, cfg.d_latent), Tensor::zeros(cfg.l, cfg.d_latent), {});

    RandomStream draw(77);
    Tensor out = sample_euler(ps, cfg, cond, 5, draw);

    RandomStream replay(77);
    Tensor eps(cfg.l, cfg.d_latent);
    for (double& v : eps.data) v = replay.normal();
    CHECK(bitwise_equal(out, eps));
}

TEST_CASE("one Euler step of a constant field lands exactly") {
    RandomStream rng(316);
    Tensor eps = rand_tensor(3, 4, rng);
    Tensor c = rand_tensor(3, 4, rng);
    auto field = [&](const Tensor&, double) { return c; };

    Tensor one = euler_integrate(field, eps, 1);
    for (size_t i = 0; i < one.data.size(); i++)
        CHECK(one.data[i] == eps.data[i] - c.data[i]);

    Tensor seven = euler_integrate(field, eps, 7);
    for (size_t i = 0; i < seven.data.size(); i++)
        CHECK(std::fabs(seven.data[i] - (eps.data[i] - c.data[i])) <= 1e-12);
}

TEST_CASE("Euler is exact on the straight-line field to a point mass") {
    RandomStream rng(317);
    Tensor target = rand_tensor(2, 3, rng);
    Tensor start = rand_tensor(2, 3, rng);
    auto field = [&](const Tensor& x, double t) {
        Tensor v(x.rows(), x.cols());
        for (size_t i = 0; i < v.data.size(); i++) v.data[i] = (x.data[i] - target.data[i]) / t;
        return v;
    };
    for (int n : {1, 5, 8, 13}) {
        Tensor end = euler_integrate(field, start, n);
        CHECK(max_abs_diff(end, target) <= 1e-12);
    }
}

TEST_CASE("halving the Euler step halves the endpoint error on a curved field") {
    const double mu = 0.7;
    const double sig0 = 0.5;
    RandomStream rng(318);
    Tensor start = rand_tensor(2, 3, rng);

    // probability-flow field of a Gaussian-to-Gaussian path; trajectories keep
    // their quantile, so the exact endpoint is mu + sig0 * start
    auto field = [&](const Tensor& x, double t) {
        const double s2 = (1.0 - t) * (1.0 - t) * sig0 * sig0 + t * t;
        const double coef = (t - (1.0 - t) * sig0 * sig0) / s2;
        Tensor v(x.rows(), x.cols());
        for (size_t i = 0; i < v.data.size(); i++)
            v.data[i] = coef * (x.data[i] - (1.0 - t) * mu) - mu;
        return v;
    };
    Tensor exact(start.rows(), start.cols());
    for (size_t i = 0; i < exact.data.size(); i++) exact.data[i] = mu + sig0 * start.data[i];

    const double e16 = max_abs_diff(euler_integrate(field, start, 16), exact);
    const double e32 = max_abs_diff(euler_integrate(field, start, 32), exact);
    REQUIRE(e32 > 0.0);
    const double ratio = e16 / e32;
    CHECK(ratio > 1.7);
    CHECK(ratio < 2.3);
}

TEST_CASE("a blowing-up field reports divergence") {
    Tensor start = Tensor::full(2, 2, 1.0);
    auto blow = [](const Tensor& x, double) {
        Tensor v = x;
        for (double& e : v.data) e *= -1e200;
        return v;
    };
    CHECK_THROWS_WITH(euler_integrate(blow, start, 4), doctest::Contains("diverged"));
    auto calm = [](const Tensor& x, double) { return Tensor::zeros(x.rows(), x.cols()); };
    CHECK_THROWS_WITH(euler_integrate(calm, start, 0), doctest::Contains("at least one step"));
}

TEST_CASE("latent files round-trip bitwise") {
    RandomStream rng(319);
    std::vector<Tensor> frames;
    for (int i = 0; i < 3; i++) frames.push_back(rand_tensor(4, 3, rng));
    const std::string path =
        (std::filesystem::temp_directory_path() / "loom_latents_test.lat").string();

    save_latents(path, frames, 123456789ull, 8);
    LatentFile lf = load_latents(path);
    CHECK(lf.seed == 123456789ull);
    CHECK(lf.steps == 8);
    REQUIRE(lf.frames.size() == frames.size());
    for (size_t i = 0; i < frames.size(); i++) CHECK(bitwise_equal(lf.frames[i], frames[i]));

    CHECK_THROWS_WITH(load_latents(path + ".missing"), doctest::Contains("cannot open"));
    CHECK_THROWS_WITH(save_latents(path, {}, 0, 0), doctest::Contains("no frames"));

    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
    CHECK_THROWS_WITH(load_latents(path), doctest::Contains("truncated"));
    std::filesystem::remove(path);
}
