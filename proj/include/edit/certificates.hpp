#pragma once

// Runtime-checkable guarantees attached to a stop: run-length TV bounds,
// argmax invariance (window and, under contraction, forever), Lipschitz
// observables and PAC-style calibration of (delta, omega).

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "edit/stability.hpp"

namespace edit {

struct MarginReport {
    int argmax_index = 0;  ///< token index i*(t)
    double margin = 0.0;   ///< top1 - top2; 1 on a singleton support
    int step = 0;
};

MarginReport margin_report(const ProbVector& p, int step = 0);

/// Omega * sqrt(delta / 2)
double tv_budget(double delta, int omega);

struct RunLengthCheck {
    bool pass = false;
    double actual_tv = 0.0;
    double budget = 0.0;
    std::size_t window_support = 0;
};

/// Checks TV(P(t), P(t-omega)) <= omega*sqrt(delta/2) on the running
/// intersection of the window's supports. `distributions` holds one entry per
/// step of the block (as kept by StabilityMonitor); the trace must show the
/// last omega divergences below delta.
RunLengthCheck verify_runlength_bound(const StabilityState& trace,
                                      const std::vector<ProbVector>& distributions,
                                      Thresholds thresholds);

/// Distributions of the window t-omega..t restricted to their common support.
std::vector<ProbVector> reconcile_window(const std::vector<ProbVector>& window);

struct LocalCertificate {
    bool pass = false;
    double budget = 0.0;
    bool replay_consistent = true;  ///< argmax unchanged over the window (checked on pass)
};

LocalCertificate local_argmax_certificate(const std::vector<ProbVector>& window,
                                          const MarginReport& margin, Thresholds thresholds);

/// Pure arithmetic form: tv_budget < margin/2.
bool local_certificate_holds(double margin, Thresholds thresholds);

struct ContractionEstimate {
    double alpha_hat = 0.0;
    std::size_t samples_used = 0;
    std::size_t skipped_small_denominators = 0;
};

inline constexpr double kDefaultDenomFloor = 1e-9;

/// alpha_hat = max over r of TV(p(r+1), p(r)) / TV(p(r), p(r-1)) on traces with
/// a fixed support.
ContractionEstimate estimate_contraction(const std::vector<std::vector<ProbVector>>& traces,
                                         double denom_floor = kDefaultDenomFloor);

/// With s: alpha^s/(1-alpha) * sqrt(delta/2). Without: sqrt(delta/2)/(1-alpha).
double tail_budget(double alpha_hat, double delta, std::optional<int> s = std::nullopt);

bool global_argmax_certificate(double margin, Thresholds thresholds, double alpha_hat);

struct LipschitzObservable {
    std::string name;
    std::function<double(const ProbVector&)> evaluate;
    double lipschitz_constant = 1.0;
};

/// Largest observed |F(p)-F(q)| - L*TV(p,q) over `pairs` random pairs on
/// supports of size `support_size`. Nonpositive (up to 1e-9) means the
/// declared constant held.
double lipschitz_violation(const LipschitzObservable& obs, std::size_t support_size,
                           std::size_t pairs, unsigned seed);

struct LipschitzBounds {
    double window_bound = 0.0;
    std::optional<double> tail_bound;
};

LipschitzBounds lipschitz_stability_bound(const LipschitzObservable& obs, Thresholds thresholds,
                                          std::optional<double> alpha_hat = std::nullopt);

/// Nearest-rank quantile exceeded by at least a (1-beta) fraction of margins:
/// sort descending and take rank ceil((1-beta) * n).
double margin_quantile(std::vector<double> margins, double beta);

/// Omega*sqrt(delta/2) + sqrt(delta/2)/(1-alpha) <= q/2
bool pac_admissible(Thresholds thresholds, double alpha_hat, double quantile);

struct CalibrationResult {
    double beta = 0.1;
    double margin_quantile = 0.0;
    double alpha_hat = 0.0;
    std::vector<Thresholds> admissible_pairs;
    Thresholds chosen;
    std::vector<double> pair_quantiles;  ///< quantile each admissible pair was checked against
};

const std::vector<double>& default_delta_grid();
const std::vector<int>& default_omega_grid();

/// Expected stopping step for a candidate pair; smaller is preferred.
using StepEstimator = std::function<double(Thresholds)>;
/// Margins at the stopping time produced by a candidate pair.
using MarginSource = std::function<std::vector<double>(Thresholds)>;

CalibrationResult calibrate_pac(const std::vector<double>& validation_margins, double beta,
                                double alpha_hat, const std::vector<double>& delta_grid,
                                const std::vector<int>& omega_grid,
                                const StepEstimator& expected_steps = {});

/// Variant where each candidate pair is checked against the quantile of its
/// own stopping-time margins.
CalibrationResult calibrate_pac(const MarginSource& margins_for, double beta, double alpha_hat,
                                const std::vector<double>& delta_grid,
                                const std::vector<int>& omega_grid,
                                const StepEstimator& expected_steps = {});

struct Certificate {
    int stop_step = 0;
    int omega = 0;
    double delta = 0.0;
    double tv_budget = 0.0;
    MarginReport margin_report;
    bool local_pass = false;
    std::optional<double> tail_budget;
    std::optional<bool> global_pass;
    std::optional<bool> pac_pass;
};

/// Annotates a stop. alpha_hat enables the global and PAC checks.
Certificate certify_stop(int stop_step, Thresholds thresholds, const ProbVector& final_distribution,
                         std::optional<double> alpha_hat);

double certified_stop_fraction(const std::vector<Certificate>& certs);

nlohmann::json to_json(const Certificate& c);
nlohmann::json to_json(const CalibrationResult& c);
Certificate certificate_from_json(const nlohmann::json& j);
CalibrationResult calibration_from_json(const nlohmann::json& j);

}  // namespace edit
