#include "loom/generator.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace loom {

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = nlohmann::json{{"l", c.l},
                       {"d_latent", c.d_latent},
                       {"d_model", c.d_model},
                       {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},
                       {"planner_width", c.planner_width},
                       {"time_freqs", c.time_freqs},
                       {"max_cond_rows", c.max_cond_rows},
                       {"n_steps", c.n_steps}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    GeneratorConfig d;
    c.l = j.value("l", d.l);
    c.d_latent = j.value("d_latent", d.d_latent);
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.planner_width = j.value("planner_width", d.planner_width);
    c.time_freqs = j.value("time_freqs", d.time_freqs);
    c.max_cond_rows = j.value("max_cond_rows", d.max_cond_rows);
    c.n_steps = j.value("n_steps", d.n_steps);
}

namespace {

Tensor gaussian(int r, int c, double stddev, RandomStream& rng) {
    Tensor t(r, c);
    for (double& v : t.data) v = rng.normal(0.0, stddev);
    return t;
}

kernels::MaskRows full_mask(int nq, int nk) {
    kernels::MaskRows m;
    m.nq = nq;
    m.nk = nk;
    m.off.resize(nq + 1);
    m.idx.reserve(static_cast<size_t>(nq) * nk);
    for (int i = 0; i < nq; i++) {
        for (int j = 0; j < nk; j++) m.idx.push_back(j);
        m.off[i + 1] = static_cast<int32_t>(m.idx.size());
    }
    return m;
}

}  // namespace

void init_projector_params(ParamSet& ps, const GeneratorConfig& cfg, RandomStream& rng) {
    ps.add("proj.w", gaussian(cfg.d_latent, cfg.planner_width,
                              std::sqrt(2.0 / (cfg.planner_width + cfg.d_latent)), rng));
    ps.add("proj.b", Tensor::zeros(1, cfg.d_latent));
}

void init_generator_params(ParamSet& ps, const GeneratorConfig& cfg, RandomStream& rng) {
    if (cfg.d_model % cfg.n_heads != 0)
        throw std::invalid_argument("generator heads must divide d_model");
    const int d = cfg.d_model;
    const double wstd = std::sqrt(2.0 / (d + d));
    const double ostd = wstd / std::sqrt(2.0 * cfg.n_layers);

    ps.add("gen.lat_in.w", gaussian(d, cfg.d_latent, std::sqrt(2.0 / (cfg.d_latent + d)), rng));
    ps.add("gen.lat_in.b", Tensor::zeros(1, d));
    ps.add("gen.cond_in.w", gaussian(d, cfg.d_latent, std::sqrt(2.0 / (cfg.d_latent + d)), rng));
    ps.add("gen.cond_in.b", Tensor::zeros(1, d));
    ps.add("gen.time.w1", gaussian(d, cfg.time_feats(), std::sqrt(2.0 / (cfg.time_feats() + d)), rng));
    ps.add("gen.time.b1", Tensor::zeros(1, d));
    ps.add("gen.time.w2", gaussian(d, d, wstd, rng));
    ps.add("gen.time.b2", Tensor::zeros(1, d));
    ps.add("gen.lat_pos", gaussian(cfg.l, d, 0.1, rng));
    ps.add("gen.cond_pos", gaussian(cfg.max_cond_rows, d, 0.1, rng));
    ps.add("gen.seg_embed", gaussian(3, d, 0.1, rng));
    for (int l = 0; l < cfg.n_layers; l++) {
        const std::string p = "gen.l" + std::to_string(l) + ".";
        ps.add(p + "cross.norm", Tensor::full(1, d, 1.0));
        ps.add(p + "cross.wq", gaussian(d, d, wstd, rng));
        ps.add(p + "cross.wk", gaussian(d, d, wstd, rng));
        ps.add(p + "cross.wv", gaussian(d, d, wstd, rng));
        ps.add(p + "cross.wo", gaussian(d, d, ostd, rng));
        ps.add(p + "self.norm", Tensor::full(1, d, 1.0));
        ps.add(p + "self.wq", gaussian(d, d, wstd, rng));
        ps.add(p + "self.wk", gaussian(d, d, wstd, rng));
        ps.add(p + "self.wv", gaussian(d, d, wstd, rng));
        ps.add(p + "self.wo", gaussian(d, d, ostd, rng));
        ps.add(p + "mlp.norm", Tensor::full(1, d, 1.0));
        const int hidden = 4 * d;
        ps.add(p + "mlp.w1", gaussian(hidden, d, std::sqrt(2.0 / (d + hidden)), rng));
        ps.add(p + "mlp.b1", Tensor::zeros(1, hidden));
        ps.add(p + "mlp.w2", gaussian(d, hidden, ostd, rng));
        ps.add(p + "mlp.b2", Tensor::zeros(1, d));
    }
    ps.add("gen.out_norm", Tensor::full(1, d, 1.0));
    ps.add("gen.out.w", gaussian(cfg.d_latent, d, std::sqrt(2.0 / (d + cfg.d_latent)), rng));
    ps.add("gen.out.b", Tensor::zeros(1, cfg.d_latent));
}

Graph::Ref project_queries(Graph& g, const GeneratorConfig& cfg, Graph::Ref queries) {
    if (g.value(queries).cols() != cfg.planner_width)
        throw std::invalid_argument("query width does not match the projector");
    return g.add_row_broadcast(g.matmul_nt(queries, g.param("proj.w")), g.param("proj.b"));
}

Tensor fm_interpolate(const Tensor& x0, const Tensor& eps, double t) {
    if (!x0.same_shape(eps)) throw std::invalid_argument("fm_interpolate shape mismatch");
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("fm time must lie in [0, 1]");
    Tensor out(x0.rows(), x0.cols());
    for (size_t i = 0; i < out.data.size(); i++)
        out.data[i] = (1.0 - t) * x0.data[i] + t * eps.data[i];
    return out;
}

namespace {

Tensor time_features(const GeneratorConfig& cfg, double t) {
    Tensor f(1, cfg.time_feats());
    for (int k = 0; k < cfg.time_freqs; k++) {
        const double w = M_PI * std::pow(2.0, k);
        f.at(0, 2 * k) = std::sin(w * t);
        f.at(0, 2 * k + 1) = std::cos(w * t);
    }
    return f;
}

}  // namespace

Graph::Ref velocity_forward(Graph& g, const GeneratorConfig& cfg, Graph::Ref x_t, double t,
                            Graph::Ref cond, const std::vector<ConditionSegment>& segments) {
    // copy the dimensions out: adding nodes below may reallocate the graph's
    // storage, so references from g.value() must not be held across it
    const int x_rows = g.value(x_t).rows(), x_cols = g.value(x_t).cols();
    const int c_rows = g.value(cond).rows(), c_cols = g.value(cond).cols();
    if (x_rows != cfg.l || x_cols != cfg.d_latent)
        throw std::invalid_argument("latent shape does not match the generator");
    if (c_cols != cfg.d_latent) throw std::invalid_argument("conditioning width mismatch");
    if (c_rows < 1) throw std::invalid_argument("conditioning must have at least one row");
    if (c_rows > cfg.max_cond_rows) throw std::invalid_argument("conditioning too long");
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("fm time must lie in [0, 1]");

    // latent rows: input proj + row position + time embedding on every row
    Graph::Ref time_ref = g.constant(time_features(cfg, t));
    Graph::Ref temb = g.add_row_broadcast(
        g.matmul_nt(g.gelu(g.add_row_broadcast(g.matmul_nt(time_ref, g.param("gen.time.w1")),
                                               g.param("gen.time.b1"))),
                    g.param("gen.time.w2")),
        g.param("gen.time.b2"));
    Graph::Ref lat = g.add_row_broadcast(g.matmul_nt(x_t, g.param("gen.lat_in.w")),
                                         g.param("gen.lat_in.b"));
    lat = g.add(lat, g.param("gen.lat_pos"));
    lat = g.add_row_broadcast(lat, temb);

    // conditioning rows: input proj + row position + segment-kind embedding
    Graph::Ref seg_embed = g.param("gen.seg_embed");
    std::vector<std::pair<Graph::Ref, int>> seg_picks;
    for (const auto& s : segments)
        for (int i = 0; i < s.len; i++) seg_picks.emplace_back(seg_embed, static_cast<int>(s.kind));
    if (static_cast<int>(seg_picks.size()) != c_rows)
        throw std::invalid_argument("segment table does not cover the conditioning rows");
    std::vector<int> cond_pos_ids(c_rows);
    for (int i = 0; i < c_rows; i++) cond_pos_ids[i] = i;
    Graph::Ref cm = g.add_row_broadcast(g.matmul_nt(cond, g.param("gen.cond_in.w")),
                                        g.param("gen.cond_in.b"));
    cm = g.add(cm, g.gather_rows(g.param("gen.cond_pos"), cond_pos_ids));
    cm = g.add(cm, g.assemble_rows(seg_picks));

    kernels::MaskRows cross = full_mask(cfg.l, c_rows);
    kernels::MaskRows self = full_mask(cfg.l, cfg.l);

    for (int l = 0; l < cfg.n_layers; l++) {
        const std::string p = "gen.l" + std::to_string(l) + ".";
        Graph::Ref hc = g.rmsnorm(lat, g.param(p + "cross.norm"));
        Graph::Ref ca = g.attention(g.matmul_nt(hc, g.param(p + "cross.wq")),
                                    g.matmul_nt(cm, g.param(p + "cross.wk")),
                                    g.matmul_nt(cm, g.param(p + "cross.wv")), cross, cfg.n_heads);
        lat = g.add(lat, g.matmul_nt(ca, g.param(p + "cross.wo")));
        Graph::Ref hs = g.rmsnorm(lat, g.param(p + "self.norm"));
        Graph::Ref sa = g.attention(g.matmul_nt(hs, g.param(p + "self.wq")),
                                    g.matmul_nt(hs, g.param(p + "self.wk")),
                                    g.matmul_nt(hs, g.param(p + "self.wv")), self, cfg.n_heads);
        lat = g.add(lat, g.matmul_nt(sa, g.param(p + "self.wo")));
        Graph::Ref hm = g.rmsnorm(lat, g.param(p + "mlp.norm"));
        Graph::Ref mid = g.gelu(
            g.add_row_broadcast(g.matmul_nt(hm, g.param(p + "mlp.w1")), g.param(p + "mlp.b1")));
        lat = g.add(lat, g.add_row_broadcast(g.matmul_nt(mid, g.param(p + "mlp.w2")),
                                             g.param(p + "mlp.b2")));
    }
    Graph::Ref out = g.rmsnorm(lat, g.param("gen.out_norm"));
    return g.add_row_broadcast(g.matmul_nt(out, g.param("gen.out.w")), g.param("gen.out.b"));
}

Graph::Ref fm_term(Graph& g, const GeneratorConfig& cfg, const Tensor& x0, const Tensor& eps,
                   double t, Graph::Ref cond, const std::vector<ConditionSegment>& segments) {
    Graph::Ref x_t = g.constant(fm_interpolate(x0, eps, t));
    Graph::Ref v = velocity_forward(g, cfg, x_t, t, cond, segments);
    Tensor target(x0.rows(), x0.cols());
    for (size_t i = 0; i < target.data.size(); i++) target.data[i] = eps.data[i] - x0.data[i];
    return g.mse(v, g.constant(std::move(target)));
}

double fm_loss(ParamSet& ps, const GeneratorConfig& cfg, const std::vector<FMBatchItem>& batch,
               RandomStream& rng, bool with_grad) {
    if (batch.empty()) throw std::invalid_argument("fm_loss: empty batch");
    Graph g(&ps);
    std::vector<Graph::Ref> terms;
    for (const auto& item : batch) {
        const double t = rng.uniform();
        Tensor eps(item.x0.rows(), item.x0.cols());
        for (double& v : eps.data) v = rng.normal();
        Graph::Ref cond = g.constant(item.cond.rows);
        terms.push_back(fm_term(g, cfg, item.x0, eps, t, cond, item.cond.segments));
    }
    Graph::Ref loss = g.mean_of(terms);
    if (with_grad) g.backward(loss);
    return g.scalar(loss);
}

Tensor euler_integrate(const VelocityFn& v, const Tensor& x_start, int n_steps) {
    if (n_steps < 1) throw std::invalid_argument("euler_integrate needs at least one step");
    Tensor x = x_start;
    const double dt = 1.0 / n_steps;
    for (int s = 0; s < n_steps; s++) {
        const double t = 1.0 - s * dt;
        Tensor vel = v(x, t);
        if (!vel.same_shape(x)) throw std::invalid_argument("velocity shape mismatch");
        for (size_t i = 0; i < x.data.size(); i++) x.data[i] -= dt * vel.data[i];
        if (!x.all_finite()) throw std::runtime_error("euler integration diverged");
    }
    return x;
}

Tensor sample_euler(ParamSet& ps, const GeneratorConfig& cfg, const ConditionSignal& cond,
                    int n_steps, RandomStream& rng) {
    Tensor eps(cfg.l, cfg.d_latent);
    for (double& v : eps.data) v = rng.normal();
    auto field = [&](const Tensor& x, double t) {
        Graph g(&ps);
        Graph::Ref vref = velocity_forward(g, cfg, g.constant(x), t, g.constant(cond.rows),
                                           cond.segments);
        return g.value(vref);
    };
    return euler_integrate(field, eps, n_steps);
}

void save_latents(const std::string& path, const std::vector<Tensor>& frames, uint64_t seed,
                  int steps) {
    if (frames.empty()) throw std::invalid_argument("no frames to save");
    for (const Tensor& f : frames)
        if (!f.same_shape(frames[0])) throw std::invalid_argument("latent frames must share shape");
    nlohmann::json header = {{"cols", frames[0].cols()},
                             {"frames", frames.size()},
                             {"rows", frames[0].rows()},
                             {"seed", seed},
                             {"steps", steps}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write latent file: " + path);
    out << header.dump() << "\n";
    for (const Tensor& f : frames)
        out.write(reinterpret_cast<const char*>(f.data.data()),
                  static_cast<std::streamsize>(f.data.size() * sizeof(double)));
    if (!out) throw std::runtime_error("failed writing latent file: " + path);
}

LatentFile load_latents(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open latent file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("truncated latent file: " + path);
    nlohmann::json header = nlohmann::json::parse(line);
    LatentFile lf;
    lf.seed = header.at("seed").get<uint64_t>();
    lf.steps = header.at("steps").get<int>();
    const int n = header.at("frames").get<int>();
    const int rows = header.at("rows").get<int>();
    const int cols = header.at("cols").get<int>();
    for (int i = 0; i < n; i++) {
        Tensor f(rows, cols);
        in.read(reinterpret_cast<char*>(f.data.data()),
                static_cast<std::streamsize>(f.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated latent file: " + path);
        lf.frames.push_back(std::move(f));
    }
    return lf;
}

}  // namespace loom
