#include "loom/storyworld.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace loom {

void to_json(nlohmann::json& j, const WorldConfig& c) {
    j = nlohmann::json{{"p", c.p},
                       {"q", c.q},
                       {"l", c.l},
                       {"d_latent", c.d_latent},
                       {"n_levels", c.n_levels},
                       {"n_starters", c.n_starters},
                       {"n_motions", c.n_motions},
                       {"step_scale", c.step_scale},
                       {"sigma", c.sigma},
                       {"frames_min", c.frames_min},
                       {"frames_max", c.frames_max},
                       {"world_seed", c.world_seed}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
    WorldConfig d;
    c.p = j.value("p", d.p);
    c.q = j.value("q", d.q);
    c.l = j.value("l", d.l);
    c.d_latent = j.value("d_latent", d.d_latent);
    c.n_levels = j.value("n_levels", d.n_levels);
    c.n_starters = j.value("n_starters", d.n_starters);
    c.n_motions = j.value("n_motions", d.n_motions);
    c.step_scale = j.value("step_scale", d.step_scale);
    c.sigma = j.value("sigma", d.sigma);
    c.frames_min = j.value("frames_min", d.frames_min);
    c.frames_max = j.value("frames_max", d.frames_max);
    c.world_seed = j.value("world_seed", d.world_seed);
}

std::vector<int> StorySample::payload_tokens() const {
    std::vector<int> out;
    out.push_back(kBos);
    for (const auto& run : runs) out.insert(out.end(), run.begin(), run.end());
    out.push_back(kEop);
    return out;
}

World::World(const WorldConfig& cfg) : cfg_(cfg) {
    if (cfg.p <= 0 || cfg.q <= 0 || cfg.l <= 0 || cfg.d_latent <= 0)
        throw std::invalid_argument("world dims must be positive");
    if (cfg.n_levels < 2) throw std::invalid_argument("need at least two persistent levels");
    if (cfg.frames_min < 1 || cfg.frames_max < cfg.frames_min)
        throw std::invalid_argument("bad frame count range");
    const int flat = cfg.l * cfg.d_latent;
    const int s = cfg.p + cfg.q;
    if (s > flat) throw std::invalid_argument("state dim exceeds frame capacity");

    // orthonormal render map: state recovery is then just G^T (x - b)
    RandomStream grng(derive_seed(cfg.world_seed, "world.render"));
    G_ = Tensor(flat, s);
    for (double& v : G_.data) v = grng.normal();
    for (int c = 0; c < s; c++) {
        for (int prev = 0; prev < c; prev++) {
            double dot = 0.0;
            for (int r = 0; r < flat; r++) dot += G_.at(r, c) * G_.at(r, prev);
            for (int r = 0; r < flat; r++) G_.at(r, c) -= dot * G_.at(r, prev);
        }
        double norm = 0.0;
        for (int r = 0; r < flat; r++) norm += G_.at(r, c) * G_.at(r, c);
        norm = std::sqrt(norm);
        if (norm < 1e-8) throw std::runtime_error("render map is rank deficient");
        for (int r = 0; r < flat; r++) G_.at(r, c) /= norm;
    }
    bias_ = Tensor(1, flat);
    for (double& v : bias_.data) v = 0.05 * grng.normal();

    RandomStream trng(derive_seed(cfg.world_seed, "world.grammar"));
    auto random_row = [&](int n) {
        std::vector<double> row(n);
        double total = 0.0;
        for (double& w : row) {
            w = trng.uniform(0.2, 1.0);
            total += w;
        }
        for (double& w : row) w /= total;
        return row;
    };
    starter_trans_.resize(cfg.n_starters);
    motion_given_starter_.resize(cfg.n_starters);
    for (int i = 0; i < cfg.n_starters; i++) {
        starter_trans_[i] = random_row(cfg.n_starters);
        motion_given_starter_[i] = random_row(cfg.n_motions);
    }
    deltas_.assign(cfg.text_vocab(), std::vector<double>(cfg.q, 0.0));
    for (int t = kFirstStarter; t < cfg.text_vocab(); t++)
        for (int k = 0; k < cfg.q; k++) deltas_[t][k] = trng.normal(0.0, cfg.step_scale);
}

double World::persistent_level_value(int level) const {
    if (level < 0 || level >= cfg_.n_levels) throw std::out_of_range("bad persistent level");
    return -1.0 + 2.0 * level / (cfg_.n_levels - 1);
}

std::vector<int> World::encode_input(const std::vector<int>& levels) const {
    if (static_cast<int>(levels.size()) != cfg_.p)
        throw std::invalid_argument("need one level per persistent coord");
    std::vector<int> out(cfg_.p);
    for (int i = 0; i < cfg_.p; i++) {
        if (levels[i] < 0 || levels[i] >= cfg_.n_levels)
            throw std::out_of_range("bad persistent level");
        out[i] = i * cfg_.n_levels + levels[i];
    }
    return out;
}

bool World::is_starter(int token) const {
    return token >= kFirstStarter && token < kFirstStarter + cfg_.n_starters;
}

bool World::is_motion(int token) const {
    return token >= kFirstStarter + cfg_.n_starters && token < cfg_.text_vocab();
}

const std::vector<double>& World::starter_transition_row(int s) const {
    return starter_trans_.at(s);
}

const std::vector<double>& World::motion_row(int s) const { return motion_given_starter_.at(s); }

int World::sample_frame_count(RandomStream& rng) const {
    return rng.uniform_int(cfg_.frames_min, cfg_.frames_max);
}

void World::apply_run(SceneState& state, const std::vector<int>& run) const {
    for (int tok : run) {
        if (tok < kFirstStarter || tok >= cfg_.text_vocab())
            throw std::invalid_argument("run contains a non-payload token");
        for (int k = 0; k < cfg_.q; k++) state.transient[k] += deltas_[tok][k];
    }
}

StorySample World::roll_story(int n_frames, RandomStream& rng) const {
    if (n_frames < 2) throw std::invalid_argument("a story needs at least two frames");
    StorySample s;
    s.persistent_levels.resize(cfg_.p);
    SceneState state;
    state.persistent.resize(cfg_.p);
    state.transient.resize(cfg_.q);
    for (int i = 0; i < cfg_.p; i++) {
        s.persistent_levels[i] = rng.uniform_int(0, cfg_.n_levels - 1);
        state.persistent[i] = persistent_level_value(s.persistent_levels[i]);
    }
    for (int k = 0; k < cfg_.q; k++) state.transient[k] = rng.uniform(-0.5, 0.5);
    s.input_tokens = encode_input(s.persistent_levels);
    s.f_cond = render_frame(state, rng);
    s.states.push_back(state);

    int starter_idx = rng.uniform_int(0, cfg_.n_starters - 1);
    for (int f = 0; f < n_frames; f++) {
        std::vector<int> run;
        run.push_back(kFirstStarter + starter_idx);
        const int extra = rng.categorical(run_extra_probs_.data(),
                                          static_cast<int>(run_extra_probs_.size()));
        for (int e = 0; e < extra; e++) {
            const auto& mrow = motion_given_starter_[starter_idx];
            const int m = rng.categorical(mrow.data(), cfg_.n_motions);
            run.push_back(kFirstStarter + cfg_.n_starters + m);
        }
        apply_run(state, run);
        s.runs.push_back(run);
        s.frames.push_back(render_frame(state, rng));
        s.states.push_back(state);
        starter_idx = rng.categorical(starter_trans_[starter_idx].data(), cfg_.n_starters);
    }
    return s;
}

Tensor World::render_frame(const SceneState& state, RandomStream& noise) const {
    if (static_cast<int>(state.persistent.size()) != cfg_.p ||
        static_cast<int>(state.transient.size()) != cfg_.q)
        throw std::invalid_argument("state dims do not match the world");
    const int flat = cfg_.l * cfg_.d_latent;
    const int sdim = cfg_.p + cfg_.q;
    std::vector<double> sv(sdim);
    for (int i = 0; i < cfg_.p; i++) sv[i] = state.persistent[i];
    for (int k = 0; k < cfg_.q; k++) sv[cfg_.p + k] = state.transient[k];

    Tensor out(cfg_.l, cfg_.d_latent);
    for (int r = 0; r < flat; r++) {
        double acc = bias_.data[r];
        for (int c = 0; c < sdim; c++) acc += G_.at(r, c) * sv[c];
        if (cfg_.sigma > 0.0) acc += cfg_.sigma * noise.normal();
        out.data[r] = acc;
    }
    return out;
}

SceneState World::recover_state(const Tensor& frame) const {
    if (frame.rows() != cfg_.l || frame.cols() != cfg_.d_latent)
        throw std::invalid_argument("frame shape does not match the world");
    const int flat = cfg_.l * cfg_.d_latent;
    const int sdim = cfg_.p + cfg_.q;
    SceneState s;
    s.persistent.resize(cfg_.p);
    s.transient.resize(cfg_.q);
    for (int c = 0; c < sdim; c++) {
        double acc = 0.0;
        for (int r = 0; r < flat; r++) acc += G_.at(r, c) * (frame.data[r] - bias_.data[r]);
        if (c < cfg_.p)
            s.persistent[c] = acc;
        else
            s.transient[c - cfg_.p] = acc;
    }
    return s;
}

double World::drift_metric(const std::vector<Tensor>& frames) const {
    const int n = static_cast<int>(frames.size());
    if (n < 2) throw std::invalid_argument("drift metric needs at least two frames");
    std::vector<std::vector<double>> rec(n);
    for (int f = 0; f < n; f++) rec[f] = recover_state(frames[f]).persistent;
    double total = 0.0;
    for (int i = 0; i < cfg_.p; i++) {
        double mean = 0.0;
        for (int f = 0; f < n; f++) mean += rec[f][i];
        mean /= n;
        double var = 0.0;
        for (int f = 0; f < n; f++) {
            const double d = rec[f][i] - mean;
            var += d * d;
        }
        total += var / n;
    }
    return total / cfg_.p;
}

namespace {

void write_f64(std::ofstream& out, const double* p, size_t n) {
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_f64(std::ifstream& in, double* p, size_t n) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("corpus blob truncated");
}

}  // namespace

void save_corpus(const std::string& dir, const std::string& split, const WorldConfig& cfg,
                 const std::vector<StorySample>& stories) {
    const std::string base = dir + "/" + split;
    std::ofstream idx(base + ".jsonl");
    std::ofstream blob(base + ".blob", std::ios::binary);
    if (!idx || !blob) throw std::runtime_error("cannot write corpus files under " + dir);

    const size_t frame_n = static_cast<size_t>(cfg.l) * cfg.d_latent;
    const size_t state_n = static_cast<size_t>(cfg.p) + cfg.q;
    uint64_t offset = 0;
    for (const auto& s : stories) {
        const size_t doubles = frame_n * (1 + s.frames.size()) + state_n * s.states.size();
        nlohmann::json rec{{"id", s.id},
                           {"n_frames", s.n_frames()},
                           {"persistent_levels", s.persistent_levels},
                           {"input", s.input_tokens},
                           {"runs", s.runs},
                           {"blob_offset", offset},
                           {"blob_doubles", doubles}};
        idx << rec.dump() << "\n";

        write_f64(blob, s.f_cond.data.data(), frame_n);
        for (const auto& fr : s.frames) write_f64(blob, fr.data.data(), frame_n);
        for (const auto& st : s.states) {
            write_f64(blob, st.persistent.data(), cfg.p);
            write_f64(blob, st.transient.data(), cfg.q);
        }
        offset += doubles * sizeof(double);
    }
}

std::vector<StorySample> load_corpus(const std::string& dir, const std::string& split,
                                     const WorldConfig& cfg) {
    const std::string base = dir + "/" + split;
    std::ifstream idx(base + ".jsonl");
    std::ifstream blob(base + ".blob", std::ios::binary);
    if (!idx || !blob) throw std::runtime_error("cannot open corpus split " + base);

    std::vector<StorySample> out;
    std::string line;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line);
        StorySample s;
        s.id = rec.at("id").get<int>();
        s.persistent_levels = rec.at("persistent_levels").get<std::vector<int>>();
        s.input_tokens = rec.at("input").get<std::vector<int>>();
        s.runs = rec.at("runs").get<std::vector<std::vector<int>>>();
        const int nf = rec.at("n_frames").get<int>();
        blob.seekg(static_cast<std::streamoff>(rec.at("blob_offset").get<uint64_t>()));

        s.f_cond = Tensor(cfg.l, cfg.d_latent);
        read_f64(blob, s.f_cond.data.data(), s.f_cond.data.size());
        for (int f = 0; f < nf; f++) {
            Tensor fr(cfg.l, cfg.d_latent);
            read_f64(blob, fr.data.data(), fr.data.size());
            s.frames.push_back(std::move(fr));
        }
        for (int f = 0; f < nf + 1; f++) {
            SceneState st;
            st.persistent.resize(cfg.p);
            st.transient.resize(cfg.q);
            read_f64(blob, st.persistent.data(), cfg.p);
            read_f64(blob, st.transient.data(), cfg.q);
            s.states.push_back(std::move(st));
        }
        out.push_back(std::move(s));
    }
    return out;
}

double unigram_entropy(const std::vector<StorySample>& stories) {
    // distribution of teacher-forced targets: every text token after <bos>,
    // delimiters included, one <img> `</img>` pair per frame
    std::map<int, int64_t> counts;
    int64_t total = 0;
    for (const auto& s : stories) {
        for (const auto& run : s.runs) {
            for (int tok : run) counts[tok]++;
            counts[kImgOpen]++;
            counts[kImgClose]++;
            total += static_cast<int64_t>(run.size()) + 2;
        }
        counts[kEop]++;
        total++;
    }
    if (total == 0) throw std::invalid_argument("unigram_entropy: empty corpus");
    double h = 0.0;
    for (const auto& [tok, c] : counts) {
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace loom
