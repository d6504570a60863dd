#include "loom/costmodel.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "loom/membank.hpp"

namespace loom {

void to_json(nlohmann::json& j, const ModelDims& d) {
    j = nlohmann::json{{"layers", d.layers},   {"d", d.d},
                       {"d_ff", d.d_ff},       {"l", d.l},
                       {"m", d.m},             {"l_cond", d.l_cond},
                       {"lambda", d.lambda_},  {"history_depth", d.history_depth}};
}

void from_json(const nlohmann::json& j, ModelDims& d) {
    ModelDims def;
    d.layers = j.value("layers", def.layers);
    d.d = j.value("d", def.d);
    d.d_ff = j.value("d_ff", def.d_ff);
    d.l = j.value("l", def.l);
    d.m = j.value("m", def.m);
    d.l_cond = j.value("l_cond", def.l_cond);
    d.lambda_ = j.value("lambda", def.lambda_);
    d.history_depth = j.value("history_depth", def.history_depth);
}

std::string growth_order_name(GrowthOrder g) {
    switch (g) {
        case GrowthOrder::Constant: return "constant";
        case GrowthOrder::Linear: return "linear";
        case GrowthOrder::Quadratic: return "quadratic";
        case GrowthOrder::Superquadratic: return "superquadratic";
    }
    return "?";
}

namespace {

void check_dims(const ModelDims& d) {
    if (d.layers < 1 || d.d < 1 || d.d_ff < 1 || d.l < 1 || d.m < 0 || d.l_cond < 0)
        throw std::invalid_argument("model dims must be positive");
    if (d.lambda_ < 2) throw std::invalid_argument("decay factor must exceed 1");
    if (d.history_depth < 0) throw std::invalid_argument("history depth must be >= 0");
}

}  // namespace

int64_t frame_tokens(Strategy s, int n, const ModelDims& dims) {
    check_dims(dims);
    if (n < 1) throw std::invalid_argument("frame index starts at 1");
    if (s == Strategy::Vanilla)
        return static_cast<int64_t>(n) * dims.l + dims.l_cond;
    const int64_t hist = std::min<int64_t>(n - 1, dims.history_depth);
    return static_cast<int64_t>(dims.l) + dims.m + dims.l_cond +
           (hist > 0 ? total_memory_length(dims.l, dims.lambda_, hist) : 0);
}

double frame_flops(int64_t tokens, const ModelDims& dims) {
    check_dims(dims);
    if (tokens < 1) throw std::invalid_argument("token count must be >= 1");
    const double t = static_cast<double>(tokens);
    const double d = dims.d;
    return dims.layers * (4.0 * t * t * d + 8.0 * t * d * d + 4.0 * t * d * dims.d_ff);
}

GrowthOrder growth_order(const std::vector<double>& series) {
    if (series.size() < 4) throw std::invalid_argument("growth_order needs at least 4 points");
    std::vector<double> cur = series;
    for (int order = 0; order <= 2; order++) {
        double lo = cur[0], hi = cur[0], mean = 0.0;
        for (double v : cur) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            mean += v;
        }
        mean /= cur.size();
        if (hi - lo <= 0.02 * std::max(std::fabs(mean), 1e-12)) {
            switch (order) {
                case 0: return GrowthOrder::Constant;
                case 1: return GrowthOrder::Linear;
                default: return GrowthOrder::Quadratic;
            }
        }
        std::vector<double> next(cur.size() - 1);
        for (size_t i = 0; i + 1 < cur.size(); i++) next[i] = cur[i + 1] - cur[i];
        cur = std::move(next);
    }
    return GrowthOrder::Superquadratic;
}

CostReport cumulative_report(int n_frames, const ModelDims& dims) {
    if (n_frames < 1) throw std::invalid_argument("need at least one frame");
    CostReport r;
    double cv = 0.0, cb = 0.0;
    for (int n = 1; n <= n_frames; n++) {
        const int64_t tv = frame_tokens(Strategy::Vanilla, n, dims);
        const int64_t tb = frame_tokens(Strategy::Bounded, n, dims);
        r.tokens_vanilla.push_back(tv);
        r.tokens_bounded.push_back(tb);
        r.flops_vanilla.push_back(frame_flops(tv, dims));
        r.flops_bounded.push_back(frame_flops(tb, dims));
        cv += r.flops_vanilla.back();
        cb += r.flops_bounded.back();
        r.cum_vanilla.push_back(cv);
        r.cum_bounded.push_back(cb);
        if (r.crossover_frame < 0 && cb <= cv) r.crossover_frame = n;
    }
    if (n_frames >= 4) r.growth_vanilla = growth_order(r.cum_vanilla);
    // the bounded strategy ramps while the bank fills; classify the plateau
    const int tail_from = std::min<int>(dims.history_depth, n_frames - 1);
    std::vector<double> tail(r.cum_bounded.begin() + tail_from, r.cum_bounded.end());
    if (tail.size() >= 4) r.growth_bounded = growth_order(tail);
    return r;
}

double polyfit_r2(const std::vector<double>& xs, const std::vector<double>& ys, int degree) {
    if (degree < 0 || degree > 3) throw std::invalid_argument("unsupported fit degree");
    const size_t n = xs.size();
    if (ys.size() != n || n < static_cast<size_t>(degree) + 1)
        throw std::invalid_argument("not enough points for the fit");
    const int k = degree + 1;
    // normal equations A c = b over the monomial basis
    std::vector<std::vector<double>> A(k, std::vector<double>(k + 1, 0.0));
    for (size_t i = 0; i < n; i++) {
        std::vector<double> pw(2 * k - 1, 1.0);
        for (int p = 1; p < 2 * k - 1; p++) pw[p] = pw[p - 1] * xs[i];
        for (int r = 0; r < k; r++) {
            for (int c = 0; c < k; c++) A[r][c] += pw[r + c];
            A[r][k] += pw[r] * ys[i];
        }
    }
    for (int col = 0; col < k; col++) {  // gaussian elimination, partial pivot
        int piv = col;
        for (int r = col + 1; r < k; r++)
            if (std::fabs(A[r][col]) > std::fabs(A[piv][col])) piv = r;
        std::swap(A[col], A[piv]);
        if (std::fabs(A[col][col]) < 1e-300) throw std::runtime_error("degenerate fit");
        for (int r = 0; r < k; r++) {
            if (r == col) continue;
            const double f = A[r][col] / A[col][col];
            for (int c = col; c <= k; c++) A[r][c] -= f * A[col][c];
        }
    }
    std::vector<double> coef(k);
    for (int r = 0; r < k; r++) coef[r] = A[r][k] / A[r][r];

    double mean = 0.0;
    for (double y : ys) mean += y;
    mean /= n;
    double ss_res = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < n; i++) {
        double fit = 0.0, pw = 1.0;
        for (int p = 0; p < k; p++) {
            fit += coef[p] * pw;
            pw *= xs[i];
        }
        ss_res += (ys[i] - fit) * (ys[i] - fit);
        ss_tot += (ys[i] - mean) * (ys[i] - mean);
    }
    if (ss_tot <= 0.0) return 1.0;
    return 1.0 - ss_res / ss_tot;
}

std::string report_csv(const CostReport& r) {
    std::string out =
        "frame,tokens_vanilla,tokens_bounded,flops_vanilla,flops_bounded,cum_vanilla,cum_bounded\n";
    char buf[256];
    for (size_t i = 0; i < r.tokens_vanilla.size(); i++) {
        std::snprintf(buf, sizeof(buf), "%zu,%lld,%lld,%.10g,%.10g,%.10g,%.10g\n", i + 1,
                      static_cast<long long>(r.tokens_vanilla[i]),
                      static_cast<long long>(r.tokens_bounded[i]), r.flops_vanilla[i],
                      r.flops_bounded[i], r.cum_vanilla[i], r.cum_bounded[i]);
        out += buf;
    }
    return out;
}

std::string report_table(const CostReport& r) {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%6s %14s %14s %16s %16s %16s %16s\n", "frame", "tok_vanilla",
                  "tok_bounded", "flops_vanilla", "flops_bounded", "cum_vanilla", "cum_bounded");
    out += buf;
    for (size_t i = 0; i < r.tokens_vanilla.size(); i++) {
        std::snprintf(buf, sizeof(buf), "%6zu %14lld %14lld %16.6e %16.6e %16.6e %16.6e\n", i + 1,
                      static_cast<long long>(r.tokens_vanilla[i]),
                      static_cast<long long>(r.tokens_bounded[i]), r.flops_vanilla[i],
                      r.flops_bounded[i], r.cum_vanilla[i], r.cum_bounded[i]);
        out += buf;
    }
    out += "growth: vanilla=" + growth_order_name(r.growth_vanilla) +
           " bounded=" + growth_order_name(r.growth_bounded) +
           " crossover_frame=" + std::to_string(r.crossover_frame) + "\n";
    return out;
}

}  // namespace loom
