#pragma once

// Per-token early freezing: local subspace distributions Q_s, a non-strict
// run-length rule per token, finite-difference coupling probes and the
// freeze-safety check.

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "edit/certificates.hpp"
#include "edit/metadata.hpp"
#include "edit/stability.hpp"

namespace edit {

struct FreezeConfig {
    double delta_tok = 0.05;
    int omega_tok = 6;
    double tau_sub = 1.0;
    int k = 3;

    void validate() const;
};

struct TokenTrack {
    int counter = 0;
    std::optional<ProbVector> last_q;
    std::optional<DenseVector> last_f;
    std::deque<double> recent_moves;      ///< last omega_tok values of ||f(r) - f(r-1)||
    std::deque<ProbVector> q_window;      ///< last omega_tok + 1 local distributions
    std::vector<double> divergences;      ///< D_{s,t} per observed step
    double epsilon = 0.0;
    std::optional<int> frozen_at;
    std::optional<DenseVector> frozen_value;
};

struct TokenFreezeState {
    std::map<int, TokenTrack> tokens;

    bool is_frozen(int token) const;
    std::vector<int> frozen_tokens() const;
    /// Activation to pass downstream: the pinned value once frozen.
    const DenseVector& deliver(int token, const DenseVector& live) const;
};

/// g = U^T f; softmax of |g_j| / tau_sub over the k components.
ProbVector local_distribution(const DenseVector& f, const SubspaceBasis& basis, double tau_sub);

/// Advances token `token` by one step. Returns true when the token freezes on
/// this step. Calling it on a frozen token is an error.
bool token_stability_step(TokenFreezeState& state, int token, int step, const DenseVector& f,
                          const SubspaceBasis& basis, const FreezeConfig& cfg);

struct ComponentCertificate {
    bool pass = false;
    double budget = 0.0;
    double margin = 0.0;
    bool replay_consistent = true;
};

/// Omega_tok * sqrt(delta_tok / 2) < margin/2, with a replay of the window on pass.
ComponentCertificate local_component_certificate(const TokenTrack& track, double margin_s,
                                                 const FreezeConfig& cfg);
/// Same, using the margin of the token's latest local distribution.
ComponentCertificate local_component_certificate(const TokenTrack& track, const FreezeConfig& cfg);

struct CouplingEstimate {
    double beta = 0.0;
    double probe_magnitude = 0.0;
    int samples = 0;
};

/// Counterfactual access to one denoising step: the next-step global
/// distribution when token `token`'s activation is shifted by `delta`
/// (a zero vector gives the unperturbed step).
struct CouplingProbe {
    std::function<ProbVector(int token, const DenseVector& delta)> next_step;
    std::size_t activation_dim = 0;
};

CouplingEstimate probe_coupling(const CouplingProbe& probe, int token, double probe_magnitude,
                                int trials, unsigned seed = 0);

/// Conservative stand-in for unprobed tokens: the max over probed ones.
CouplingEstimate pooled_coupling(const std::vector<CouplingEstimate>& estimates);

struct FreezeSafetyReport {
    int token = 0;
    double bound = 0.0;      ///< beta/(1-alpha) * epsilon
    double combined = 0.0;   ///< omega*sqrt(delta/2) + bound
    double global_margin_half = 0.0;
    bool safe = false;
};

FreezeSafetyReport freeze_safety(int token, const TokenTrack& track, const CouplingEstimate& coupling,
                                 double alpha_hat, Thresholds global, double global_margin);

}  // namespace edit
