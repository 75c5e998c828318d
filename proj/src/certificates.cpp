#include "edit/certificates.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "edit/format.hpp"

namespace edit {

MarginReport margin_report(const ProbVector& p, int step) {
    if (p.probs.empty()) fail(ErrorCode::EmptyInput, "margin of an empty distribution");
    const std::size_t top = argmax_position(p);
    MarginReport r;
    r.argmax_index = p.support[top];
    r.step = step;
    if (p.probs.size() == 1) {
        r.margin = 1.0;  // no competitor
        return r;
    }
    double second = -1.0;
    for (std::size_t i = 0; i < p.probs.size(); ++i)
        if (i != top) second = std::max(second, p.probs[i]);
    r.margin = std::clamp(p.probs[top] - second, 0.0, 1.0);
    return r;
}

double tv_budget(double delta, int omega) {
    if (delta < 0.0 || omega < 1) fail(ErrorCode::InvalidArgument, "tv_budget needs delta>=0, omega>=1");
    return static_cast<double>(omega) * std::sqrt(delta / 2.0);
}

std::vector<ProbVector> reconcile_window(const std::vector<ProbVector>& window) {
    if (window.empty()) fail(ErrorCode::WindowTooShort, "empty window");
    VisibleSet common{window.front().support};
    for (const ProbVector& p : window) common = intersect(common, VisibleSet{p.support});
    if (common.empty()) fail(ErrorCode::EmptyIntersection, "window shares no visible token");
    std::vector<ProbVector> out;
    out.reserve(window.size());
    for (const ProbVector& p : window) out.push_back(restrict_to(p, common));
    return out;
}

RunLengthCheck verify_runlength_bound(const StabilityState& trace,
                                      const std::vector<ProbVector>& distributions,
                                      Thresholds thresholds) {
    const auto omega = static_cast<std::size_t>(thresholds.omega);
    if (trace.divergence_trace.size() < omega || distributions.size() < omega + 1)
        fail(ErrorCode::WindowTooShort, "run-length window needs omega divergences and omega+1 steps");
    for (std::size_t i = trace.divergence_trace.size() - omega; i < trace.divergence_trace.size(); ++i)
        if (!(trace.divergence_trace[i].divergence < thresholds.delta))
            fail(ErrorCode::InvalidArgument, "window contains a divergence >= delta");

    const std::vector<ProbVector> window(distributions.end() - static_cast<std::ptrdiff_t>(omega + 1),
                                         distributions.end());
    const std::vector<ProbVector> aligned = reconcile_window(window);
    RunLengthCheck out;
    out.budget = tv_budget(thresholds.delta, thresholds.omega);
    out.actual_tv = total_variation(aligned.back(), aligned.front());
    out.window_support = aligned.front().size();
    out.pass = out.actual_tv <= out.budget + 1e-9;
    return out;
}

bool local_certificate_holds(double margin, Thresholds thresholds) {
    return tv_budget(thresholds.delta, thresholds.omega) < 0.5 * margin;
}

LocalCertificate local_argmax_certificate(const std::vector<ProbVector>& window,
                                          const MarginReport& margin, Thresholds thresholds) {
    LocalCertificate out;
    out.budget = tv_budget(thresholds.delta, thresholds.omega);
    // a single visible token has nothing to flip to
    const bool singleton = !window.empty() && window.back().size() == 1;
    out.pass = singleton || out.budget < 0.5 * margin.margin;
    if (out.pass && !window.empty()) {
        const std::vector<ProbVector> aligned = reconcile_window(window);
        for (const ProbVector& p : aligned) {
            if (p.support[argmax_position(p)] != margin.argmax_index) {
                out.replay_consistent = false;
                break;
            }
        }
    }
    return out;
}

ContractionEstimate estimate_contraction(const std::vector<std::vector<ProbVector>>& traces,
                                         double denom_floor) {
    ContractionEstimate est;
    bool any = false;
    for (const auto& trace : traces) {
        if (trace.size() < 3) fail(ErrorCode::InvalidArgument, "contraction traces need >= 3 steps");
        for (std::size_t r = 1; r + 1 < trace.size(); ++r) {
            const double den = total_variation(trace[r], trace[r - 1]);
            if (den < denom_floor) {
                ++est.skipped_small_denominators;
                continue;
            }
            const double ratio = total_variation(trace[r + 1], trace[r]) / den;
            est.alpha_hat = any ? std::max(est.alpha_hat, ratio) : ratio;
            any = true;
            ++est.samples_used;
        }
    }
    if (!any) fail(ErrorCode::NoValidSamples, "every TV ratio denominator fell below the floor");
    return est;
}

namespace {
void require_contractive(double alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0))
        fail(ErrorCode::AlphaNotContractive, "alpha_hat=" + format_real(alpha) + " is not in [0,1)");
}
}  // namespace

double tail_budget(double alpha_hat, double delta, std::optional<int> s) {
    require_contractive(alpha_hat);
    const double base = std::sqrt(delta / 2.0) / (1.0 - alpha_hat);
    if (!s) return base;
    if (*s < 0) fail(ErrorCode::InvalidArgument, "tail horizon must be >= 0");
    return std::pow(alpha_hat, *s) * base;
}

bool global_argmax_certificate(double margin, Thresholds thresholds, double alpha_hat) {
    const double combined = tv_budget(thresholds.delta, thresholds.omega) + tail_budget(alpha_hat, thresholds.delta);
    return combined < 0.5 * margin;
}

double lipschitz_violation(const LipschitzObservable& obs, std::size_t support_size,
                           std::size_t pairs, unsigned seed) {
    if (support_size == 0) fail(ErrorCode::EmptyInput, "support size must be positive");
    std::mt19937_64 rng(seed);
    std::exponential_distribution<double> expo(1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto dirichlet = [&] {
        std::vector<double> w(support_size);
        for (double& x : w) x = expo(rng) + 1e-300;
        return normalized(w);
    };
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pairs; ++i) {
        const ProbVector p = dirichlet();
        ProbVector q;
        if (i % 2 == 0) {
            q = dirichlet();
        } else {
            // nearby pair: small multiplicative tilt
            std::vector<double> w(support_size);
            for (std::size_t j = 0; j < support_size; ++j) w[j] = p.probs[j] * std::exp(0.05 * gauss(rng));
            q = normalized(w);
        }
        const double gap = std::abs(obs.evaluate(p) - obs.evaluate(q)) -
                           obs.lipschitz_constant * total_variation(p, q);
        worst = std::max(worst, gap);
    }
    return worst;
}

LipschitzBounds lipschitz_stability_bound(const LipschitzObservable& obs, Thresholds thresholds,
                                          std::optional<double> alpha_hat) {
    LipschitzBounds b;
    b.window_bound = obs.lipschitz_constant * tv_budget(thresholds.delta, thresholds.omega);
    if (alpha_hat) b.tail_bound = obs.lipschitz_constant * tail_budget(*alpha_hat, thresholds.delta);
    return b;
}

double margin_quantile(std::vector<double> margins, double beta) {
    if (margins.empty()) fail(ErrorCode::EmptyInput, "no validation margins");
    if (!(beta > 0.0 && beta < 1.0)) fail(ErrorCode::InvalidArgument, "beta must be in (0,1)");
    std::sort(margins.begin(), margins.end(), std::greater<>());
    const double n = static_cast<double>(margins.size());
    // the small slack keeps e.g. 0.9*500 from rounding up to 451
    auto rank = static_cast<std::size_t>(std::ceil((1.0 - beta) * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, margins.size());
    return margins[rank - 1];
}

bool pac_admissible(Thresholds thresholds, double alpha_hat, double quantile) {
    require_contractive(alpha_hat);
    const double s = std::sqrt(thresholds.delta / 2.0);
    return thresholds.omega * s + s / (1.0 - alpha_hat) <= 0.5 * quantile;
}

const std::vector<double>& default_delta_grid() {
    static const std::vector<double> grid{0.025, 0.05, 0.1, 0.25, 0.45, 0.55};
    return grid;
}

const std::vector<int>& default_omega_grid() {
    static const std::vector<int> grid{6, 8, 10, 12};
    return grid;
}

CalibrationResult calibrate_pac(const MarginSource& margins_for, double beta, double alpha_hat,
                                const std::vector<double>& delta_grid,
                                const std::vector<int>& omega_grid,
                                const StepEstimator& expected_steps) {
    if (!(beta > 0.0 && beta < 1.0)) fail(ErrorCode::InvalidArgument, "beta must be in (0,1)");
    if (delta_grid.empty() || omega_grid.empty()) fail(ErrorCode::EmptyInput, "empty calibration grid");
    require_contractive(alpha_hat);

    CalibrationResult out;
    out.beta = beta;
    out.alpha_hat = alpha_hat;
    std::vector<double> estimates;
    for (double delta : delta_grid) {
        for (int omega : omega_grid) {
            const Thresholds pair{delta, omega};
            const double q = margin_quantile(margins_for(pair), beta);
            if (!pac_admissible(pair, alpha_hat, q)) continue;
            out.admissible_pairs.push_back(pair);
            out.pair_quantiles.push_back(q);
            estimates.push_back(expected_steps ? expected_steps(pair) : static_cast<double>(omega));
        }
    }
    if (out.admissible_pairs.empty())
        fail(ErrorCode::NoAdmissiblePair, "no (delta, omega) in the grid satisfies the PAC inequality");

    std::size_t best = 0;
    for (std::size_t i = 1; i < out.admissible_pairs.size(); ++i) {
        const Thresholds& a = out.admissible_pairs[i];
        const Thresholds& b = out.admissible_pairs[best];
        if (estimates[i] < estimates[best] ||
            (estimates[i] == estimates[best] &&
             (a.delta > b.delta || (a.delta == b.delta && a.omega < b.omega))))
            best = i;
    }
    out.chosen = out.admissible_pairs[best];
    out.margin_quantile = out.pair_quantiles[best];
    return out;
}

CalibrationResult calibrate_pac(const std::vector<double>& validation_margins, double beta,
                                double alpha_hat, const std::vector<double>& delta_grid,
                                const std::vector<int>& omega_grid,
                                const StepEstimator& expected_steps) {
    if (validation_margins.empty()) fail(ErrorCode::EmptyInput, "no validation margins");
    return calibrate_pac([&](Thresholds) { return validation_margins; }, beta, alpha_hat, delta_grid,
                         omega_grid, expected_steps);
}

Certificate certify_stop(int stop_step, Thresholds thresholds, const ProbVector& final_distribution,
                         std::optional<double> alpha_hat) {
    Certificate c;
    c.stop_step = stop_step;
    c.omega = thresholds.omega;
    c.delta = thresholds.delta;
    c.tv_budget = tv_budget(thresholds.delta, thresholds.omega);
    c.margin_report = margin_report(final_distribution, stop_step);
    const bool singleton = final_distribution.size() == 1;
    c.local_pass = singleton || local_certificate_holds(c.margin_report.margin, thresholds);
    if (alpha_hat) {
        if (*alpha_hat >= 0.0 && *alpha_hat < 1.0) {
            c.tail_budget = tail_budget(*alpha_hat, thresholds.delta);
            c.global_pass = singleton || c.tv_budget + *c.tail_budget < 0.5 * c.margin_report.margin;
            c.pac_pass = singleton || c.tv_budget + *c.tail_budget <= 0.5 * c.margin_report.margin;
        } else {
            c.global_pass = false;
            c.pac_pass = false;
        }
    }
    return c;
}

double certified_stop_fraction(const std::vector<Certificate>& certs) {
    if (certs.empty()) fail(ErrorCode::EmptyInput, "no certificates");
    std::size_t n = 0;
    for (const Certificate& c : certs)
        if (c.pac_pass.value_or(false)) ++n;
    return static_cast<double>(n) / static_cast<double>(certs.size());
}

// ---- JSON -------------------------------------------------------------------

namespace {
std::string real(double v) { return format_real(v, 12); }
double parse_real(const nlohmann::json& j) {
    return j.is_string() ? std::stod(j.get<std::string>()) : j.get<double>();
}
}  // namespace

nlohmann::json to_json(const Certificate& c) {
    nlohmann::json j;
    j["stop_step"] = c.stop_step;
    j["omega"] = c.omega;
    j["delta"] = real(c.delta);
    j["tv_budget"] = real(c.tv_budget);
    j["argmax_index"] = c.margin_report.argmax_index;
    j["margin"] = real(c.margin_report.margin);
    j["local_pass"] = c.local_pass;
    j["tail_budget"] = c.tail_budget ? nlohmann::json(real(*c.tail_budget)) : nlohmann::json(nullptr);
    j["global_pass"] = c.global_pass ? nlohmann::json(*c.global_pass) : nlohmann::json(nullptr);
    j["pac_pass"] = c.pac_pass ? nlohmann::json(*c.pac_pass) : nlohmann::json(nullptr);
    return j;
}

Certificate certificate_from_json(const nlohmann::json& j) {
    Certificate c;
    c.stop_step = j.at("stop_step").get<int>();
    c.omega = j.at("omega").get<int>();
    c.delta = parse_real(j.at("delta"));
    c.tv_budget = parse_real(j.at("tv_budget"));
    c.margin_report.argmax_index = j.at("argmax_index").get<int>();
    c.margin_report.margin = parse_real(j.at("margin"));
    c.margin_report.step = c.stop_step;
    c.local_pass = j.at("local_pass").get<bool>();
    if (!j.at("tail_budget").is_null()) c.tail_budget = parse_real(j.at("tail_budget"));
    if (!j.at("global_pass").is_null()) c.global_pass = j.at("global_pass").get<bool>();
    if (!j.at("pac_pass").is_null()) c.pac_pass = j.at("pac_pass").get<bool>();
    return c;
}

nlohmann::json to_json(const CalibrationResult& c) {
    nlohmann::json j;
    j["beta"] = real(c.beta);
    j["margin_quantile"] = real(c.margin_quantile);
    j["alpha_hat"] = real(c.alpha_hat);
    nlohmann::json pairs = nlohmann::json::array();
    for (std::size_t i = 0; i < c.admissible_pairs.size(); ++i) {
        nlohmann::json p;
        p["delta"] = real(c.admissible_pairs[i].delta);
        p["omega"] = c.admissible_pairs[i].omega;
        if (i < c.pair_quantiles.size()) p["margin_quantile"] = real(c.pair_quantiles[i]);
        pairs.push_back(p);
    }
    j["admissible_pairs"] = pairs;
    j["chosen_delta"] = real(c.chosen.delta);
    j["chosen_omega"] = c.chosen.omega;
    return j;
}

CalibrationResult calibration_from_json(const nlohmann::json& j) {
    CalibrationResult c;
    c.beta = parse_real(j.at("beta"));
    c.margin_quantile = parse_real(j.at("margin_quantile"));
    c.alpha_hat = parse_real(j.at("alpha_hat"));
    for (const auto& p : j.at("admissible_pairs")) {
        c.admissible_pairs.push_back({parse_real(p.at("delta")), p.at("omega").get<int>()});
        if (p.contains("margin_quantile")) c.pair_quantiles.push_back(parse_real(p.at("margin_quantile")));
    }
    c.chosen = {parse_real(j.at("chosen_delta")), j.at("chosen_omega").get<int>()};
    return c;
}

}  // namespace edit
