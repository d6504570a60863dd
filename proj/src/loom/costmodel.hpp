#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace loom {

// Analytical transformer cost accounting for the two frame-generation
// strategies: vanilla keeps every prior frame in context, bounded keeps a
// fixed window plus the pooled memory.
struct ModelDims {
    int layers = 2;
    int d = 512;
    int d_ff = 2048;
    int l = 16;       // latent rows per frame
    int m = 4;        // query rows
    int l_cond = 16;  // condition-image rows
    int lambda_ = 2;
    int history_depth = 3;
};

void to_json(nlohmann::json& j, const ModelDims& d);
void from_json(const nlohmann::json& j, ModelDims& d);

enum class Strategy { Vanilla, Bounded };
enum class GrowthOrder { Constant, Linear, Quadratic, Superquadratic };

std::string growth_order_name(GrowthOrder g);

// Context rows fed to the generator for frame n (1-based).
int64_t frame_tokens(Strategy s, int n, const ModelDims& dims);

// layers * (4 t^2 d + 8 t d^2 + 4 t d d_ff): attention, projections, FFN.
// Norms and embeddings are deliberately not modeled.
double frame_flops(int64_t tokens, const ModelDims& dims);

struct CostReport {
    std::vector<int64_t> tokens_vanilla, tokens_bounded;
    std::vector<double> flops_vanilla, flops_bounded;
    std::vector<double> cum_vanilla, cum_bounded;
    GrowthOrder growth_vanilla = GrowthOrder::Superquadratic;
    GrowthOrder growth_bounded = GrowthOrder::Linear;
    int crossover_frame = -1;  // first frame where bounded cumulative <= vanilla
};

CostReport cumulative_report(int n_frames, const ModelDims& dims);

// Classifies by the first finite-difference order (0..2) that is constant
// within 2% relative spread; otherwise superquadratic. Needs >= 4 points.
GrowthOrder growth_order(const std::vector<double>& series);

// Least-squares polynomial fit diagnostics for the published-table checks.
double polyfit_r2(const std::vector<double>& xs, const std::vector<double>& ys, int degree);

std::string report_csv(const CostReport& r);
std::string report_table(const CostReport& r);

}  // namespace loom
