#include "loom/planner.hpp"

#include <cmath>
#include <stdexcept>

namespace loom {

void to_json(nlohmann::json& j, const PlannerConfig& c) {
    j = nlohmann::json{{"text_vocab", c.text_vocab},
                       {"input_vocab", c.input_vocab},
                       {"d_model", c.d_model},
                       {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},
                       {"m_queries", c.m_queries},
                       {"max_seq_len", c.max_seq_len},
                       {"max_blocks", c.max_blocks},
                       {"per_index_queries", c.per_index_queries},
                       {"bidirectional_input", c.bidirectional_input}};
}

void from_json(const nlohmann::json& j, PlannerConfig& c) {
    PlannerConfig d;
    c.text_vocab = j.value("text_vocab", d.text_vocab);
    c.input_vocab = j.value("input_vocab", d.input_vocab);
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.m_queries = j.value("m_queries", d.m_queries);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.max_blocks = j.value("max_blocks", d.max_blocks);
    c.per_index_queries = j.value("per_index_queries", d.per_index_queries);
    c.bidirectional_input = j.value("bidirectional_input", d.bidirectional_input);
}

namespace {

Tensor gaussian(int r, int c, double stddev, RandomStream& rng) {
    Tensor t(r, c);
    for (double& v : t.data) v = rng.normal(0.0, stddev);
    return t;
}

}  // namespace

void init_planner_params(ParamSet& ps, const PlannerConfig& cfg, RandomStream& rng) {
    if (cfg.d_model % cfg.n_heads != 0)
        throw std::invalid_argument("planner heads must divide d_model");
    const int d = cfg.d_model;
    const double emb = 0.1;
    const double wstd = std::sqrt(2.0 / (d + d));
    const double ostd = wstd / std::sqrt(2.0 * cfg.n_layers);

    ps.add("planner.input_embed", gaussian(cfg.input_vocab, d, emb, rng));
    ps.add("planner.tok_embed", gaussian(cfg.text_vocab, d, emb, rng));
    ps.add("planner.pos_embed", gaussian(cfg.max_seq_len, d, emb, rng));
    const int nq = cfg.per_index_queries ? cfg.max_blocks * cfg.m_queries : cfg.m_queries;
    ps.add("planner.queries", gaussian(nq, d, emb, rng));
    for (int l = 0; l < cfg.n_layers; l++) {
        const std::string p = "planner.l" + std::to_string(l) + ".";
        ps.add(p + "attn.norm", Tensor::full(1, d, 1.0));
        ps.add(p + "attn.wq", gaussian(d, d, wstd, rng));
        ps.add(p + "attn.wk", gaussian(d, d, wstd, rng));
        ps.add(p + "attn.wv", gaussian(d, d, wstd, rng));
        ps.add(p + "attn.wo", gaussian(d, d, ostd, rng));
        ps.add(p + "mlp.norm", Tensor::full(1, d, 1.0));
        ps.add(p + "mlp.w1", gaussian(cfg.mlp_hidden(), d, std::sqrt(2.0 / (d + cfg.mlp_hidden())), rng));
        ps.add(p + "mlp.b1", Tensor::zeros(1, cfg.mlp_hidden()));
        ps.add(p + "mlp.w2", gaussian(d, cfg.mlp_hidden(), ostd, rng));
        ps.add(p + "mlp.b2", Tensor::zeros(1, d));
    }
    ps.add("planner.out_norm", Tensor::full(1, d, 1.0));
    ps.add("planner.lm_head", gaussian(cfg.text_vocab, d, wstd, rng));
}

std::vector<std::string> planner_text_param_names(const ParamSet& ps) {
    std::vector<std::string> out;
    for (const auto& n : ps.names_with_prefix("planner."))
        if (n != "planner.queries") out.push_back(n);
    return out;
}

PlannerOutput planner_forward(Graph& g, const PlannerConfig& cfg, const PlannerInput& in) {
    const SequenceLayout& lay = in.layout;
    const int n = lay.size();
    if (n > cfg.max_seq_len) throw std::invalid_argument("sequence exceeds max_seq_len");
    if (lay.n_blocks > cfg.max_blocks) throw std::invalid_argument("too many query blocks");
    if (lay.n_blocks > 0 && lay.block_len != cfg.m_queries)
        throw std::invalid_argument("query block length does not match the planner");
    if (static_cast<int>(in.input_tokens.size()) != lay.n_input)
        throw std::invalid_argument("input token count does not match the layout");
    if (static_cast<int>(in.text_tokens.size()) != lay.n_text)
        throw std::invalid_argument("text token count does not match the layout");

    Graph::Ref input_embed = g.param("planner.input_embed");
    Graph::Ref tok_embed = g.param("planner.tok_embed");
    Graph::Ref pos_embed = g.param("planner.pos_embed");
    Graph::Ref queries = g.param("planner.queries");

    std::vector<std::pair<Graph::Ref, int>> picks;
    picks.reserve(n);
    std::vector<int> pos_ids(n);
    std::vector<int> qcount(lay.n_blocks, 0);
    int ii = 0, ti = 0;
    for (int i = 0; i < n; i++) {
        const Position& p = lay.positions[i];
        pos_ids[i] = p.pos_id;
        if (p.pos_id >= cfg.max_seq_len) throw std::invalid_argument("position id out of range");
        switch (p.role) {
            case Role::Input: {
                const int tok = in.input_tokens[ii++];
                if (tok < 0 || tok >= cfg.input_vocab)
                    throw std::invalid_argument("input token out of range");
                picks.emplace_back(input_embed, tok);
                break;
            }
            case Role::Text: {
                const int tok = in.text_tokens[ti++];
                if (tok < 0 || tok >= cfg.text_vocab)
                    throw std::invalid_argument("text token out of range");
                picks.emplace_back(tok_embed, tok);
                break;
            }
            case Role::Query: {
                const int slot = qcount[p.block]++;
                const int row = cfg.per_index_queries ? p.block * cfg.m_queries + slot : slot;
                picks.emplace_back(queries, row);
                break;
            }
        }
    }

    Graph::Ref x = g.add(g.assemble_rows(picks), g.gather_rows(pos_embed, pos_ids));

    MaskOptions mopts;
    mopts.bidirectional_input = cfg.bidirectional_input;
    kernels::MaskRows mask = to_mask_rows(build_mask(lay, mopts));

    for (int l = 0; l < cfg.n_layers; l++) {
        const std::string p = "planner.l" + std::to_string(l) + ".";
        Graph::Ref h = g.rmsnorm(x, g.param(p + "attn.norm"));
        Graph::Ref att = g.attention(g.matmul_nt(h, g.param(p + "attn.wq")),
                                     g.matmul_nt(h, g.param(p + "attn.wk")),
                                     g.matmul_nt(h, g.param(p + "attn.wv")), mask, cfg.n_heads);
        x = g.add(x, g.matmul_nt(att, g.param(p + "attn.wo")));
        Graph::Ref m = g.rmsnorm(x, g.param(p + "mlp.norm"));
        Graph::Ref mid = g.gelu(
            g.add_row_broadcast(g.matmul_nt(m, g.param(p + "mlp.w1")), g.param(p + "mlp.b1")));
        x = g.add(x, g.add_row_broadcast(g.matmul_nt(mid, g.param(p + "mlp.w2")),
                                         g.param(p + "mlp.b2")));
    }
    Graph::Ref xn = g.rmsnorm(x, g.param("planner.out_norm"));

    PlannerOutput out;
    out.text_positions = lay.text_indices();
    out.text_logits = g.matmul_nt(g.gather_rows(xn, out.text_positions), g.param("planner.lm_head"));
    out.input_states = g.gather_rows(xn, lay.input_indices());
    for (int b = 0; b < lay.n_blocks; b++)
        out.query_states.push_back(g.gather_rows(xn, lay.block_indices(b)));
    return out;
}

PlannerExample make_teacher_forced(const StorySample& story, const PlannerConfig& cfg) {
    std::vector<SegmentEvent> events;
    events.push_back({Role::Input, static_cast<int>(story.input_tokens.size())});
    for (size_t r = 0; r < story.runs.size(); r++) {
        const int lead = r == 0 ? 1 : 0;  // <bos> opens the first run
        events.push_back({Role::Text, lead + static_cast<int>(story.runs[r].size())});
        events.push_back({Role::Query, cfg.m_queries});
    }
    events.push_back({Role::Text, 1});  // <eop>

    PlannerExample ex;
    ex.input.layout = build_layout(events);
    ex.input.input_tokens = story.input_tokens;

    std::vector<int> payload = story.payload_tokens();
    size_t pi = 0;
    for (const Position& p : ex.input.layout.positions) {
        if (p.role != Role::Text) continue;
        if (p.delim == Delim::ImgOpen)
            ex.input.text_tokens.push_back(kImgOpen);
        else if (p.delim == Delim::ImgClose)
            ex.input.text_tokens.push_back(kImgClose);
        else
            ex.input.text_tokens.push_back(payload.at(pi++));
    }
    if (pi != payload.size()) throw std::logic_error("payload tokens left over");

    ex.targets.resize(ex.input.text_tokens.size());
    for (size_t j = 0; j + 1 < ex.input.text_tokens.size(); j++)
        ex.targets[j] = ex.input.text_tokens[j + 1];
    ex.targets.back() = -1;
    return ex;
}

Graph::Ref stage1_loss(Graph& g, const PlannerConfig& cfg,
                       const std::vector<PlannerExample>& batch) {
    if (batch.empty()) throw std::invalid_argument("stage1_loss: empty batch");
    std::vector<Graph::Ref> losses;
    for (const auto& ex : batch) {
        PlannerOutput out = planner_forward(g, cfg, ex.input);
        losses.push_back(g.cross_entropy_rows(out.text_logits, ex.targets));
    }
    return g.mean_of(losses);
}

namespace {

int pick_token(const Tensor& logits, int row, double temperature, RandomStream* rng) {
    const int vocab = logits.cols();
    if (temperature <= 0.0) {
        int best = 0;
        for (int j = 1; j < vocab; j++)
            if (logits.at(row, j) > logits.at(row, best)) best = j;
        return best;
    }
    if (!rng) throw std::invalid_argument("sampled decoding needs a random stream");
    std::vector<double> probs(vocab);
    double mx = logits.at(row, 0);
    for (int j = 1; j < vocab; j++) mx = std::max(mx, logits.at(row, j));
    for (int j = 0; j < vocab; j++) probs[j] = std::exp((logits.at(row, j) - mx) / temperature);
    return rng->categorical(probs.data(), vocab);
}

}  // namespace

PlanResult generate_plan(ParamSet& ps, const PlannerConfig& cfg,
                         const std::vector<int>& input_tokens, const PlanLimits& limits,
                         double temperature, RandomStream* rng) {
    PlanResult res;
    std::vector<std::vector<int>> segments;  // payload runs; blocks sit between them
    segments.emplace_back();                 // first segment starts with <bos>
    int payload_count = 0;
    int blocks = 0;

    auto build_input = [&]() {
        PlannerInput in;
        std::vector<SegmentEvent> events;
        events.push_back({Role::Input, static_cast<int>(input_tokens.size())});
        for (size_t s = 0; s < segments.size(); s++) {
            const int len = static_cast<int>(segments[s].size()) + (s == 0 ? 1 : 0);
            if (len > 0) events.push_back({Role::Text, len});
            if (s + 1 < segments.size()) events.push_back({Role::Query, cfg.m_queries});
        }
        in.layout = build_layout(events);
        in.input_tokens = input_tokens;
        std::vector<int> payload;
        payload.push_back(kBos);
        for (const auto& seg : segments) payload.insert(payload.end(), seg.begin(), seg.end());
        size_t pi = 0;
        for (const Position& p : in.layout.positions) {
            if (p.role != Role::Text) continue;
            if (p.delim == Delim::ImgOpen)
                in.text_tokens.push_back(kImgOpen);
            else if (p.delim == Delim::ImgClose)
                in.text_tokens.push_back(kImgClose);
            else
                in.text_tokens.push_back(payload.at(pi++));
        }
        return in;
    };

    while (true) {
        if (payload_count >= limits.max_payload) break;
        PlannerInput in = build_input();
        // keep headroom so an emitted <img> can always fit its block
        if (in.layout.size() + cfg.m_queries + 3 > cfg.max_seq_len) break;
        Graph g(&ps);
        PlannerOutput out = planner_forward(g, cfg, in);
        const Tensor& logits = g.value(out.text_logits);
        const int next = pick_token(logits, logits.rows() - 1, temperature, rng);

        if (next == kImgOpen) {
            if (blocks >= limits.max_blocks) break;
            blocks++;
            segments.emplace_back();  // decoding resumes after the forced close
        } else if (next == kEop) {
            res.finished = true;
            break;
        } else {
            if (next == kImgClose) res.stray_close = true;
            segments.back().push_back(next);
            payload_count++;
        }
    }

    // query states depend only on context before their block, so one forward
    // over the final sequence recovers all of them
    if (blocks > 0) {
        PlannerInput in = build_input();
        Graph g(&ps);
        PlannerOutput out = planner_forward(g, cfg, in);
        for (int b = 0; b < blocks; b++) res.query_states.push_back(g.value(out.query_states[b]));
    }
    res.runs = std::move(segments);
    return res;
}

}  // namespace loom
