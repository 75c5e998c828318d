#include "edit/token_freeze.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace edit {

void FreezeConfig::validate() const {
    if (!(delta_tok > 0.0)) fail(ErrorCode::ConfigError, "delta_tok must be positive");
    if (omega_tok < 1) fail(ErrorCode::ConfigError, "omega_tok must be >= 1");
    if (!(tau_sub > 0.0)) fail(ErrorCode::ConfigError, "tau_sub must be positive");
    if (k < 1 || k > 8) fail(ErrorCode::ConfigError, "k must be in [1,8]");
}

bool TokenFreezeState::is_frozen(int token) const {
    auto it = tokens.find(token);
    return it != tokens.end() && it->second.frozen_at.has_value();
}

std::vector<int> TokenFreezeState::frozen_tokens() const {
    std::vector<int> out;
    for (const auto& [token, track] : tokens)
        if (track.frozen_at) out.push_back(token);
    return out;
}

const DenseVector& TokenFreezeState::deliver(int token, const DenseVector& live) const {
    auto it = tokens.find(token);
    if (it != tokens.end() && it->second.frozen_value) return *it->second.frozen_value;
    return live;
}

ProbVector local_distribution(const DenseVector& f, const SubspaceBasis& basis, double tau_sub) {
    if (!(tau_sub > 0.0)) fail(ErrorCode::NonPositiveTemperature, "tau_sub must be positive");
    const DenseMatrix& u = basis.columns;
    if (u.rows() != f.size())
        fail(ErrorCode::DimMismatch, "activation length " + std::to_string(f.size()) +
                                         " vs basis rows " + std::to_string(u.rows()));
    std::vector<double> g(u.cols(), 0.0);
    for (std::size_t r = 0; r < u.rows(); ++r)
        for (std::size_t j = 0; j < u.cols(); ++j) g[j] += u(r, j) * f[r];
    for (double& x : g) x = std::abs(x);
    return softmax(g, tau_sub);
}

bool token_stability_step(TokenFreezeState& state, int token, int step, const DenseVector& f,
                          const SubspaceBasis& basis, const FreezeConfig& cfg) {
    TokenTrack& tr = state.tokens[token];
    if (tr.frozen_at) fail(ErrorCode::InvalidArgument, "token " + std::to_string(token) + " already frozen");
    ProbVector q = local_distribution(f, basis, cfg.tau_sub);
    const auto window = static_cast<std::size_t>(cfg.omega_tok);

    if (tr.last_q) {
        const double d = kl_divergence(q, *tr.last_q);
        tr.divergences.push_back(d);
        tr.counter = d <= cfg.delta_tok ? tr.counter + 1 : 0;
        double move = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) move += (f[i] - (*tr.last_f)[i]) * (f[i] - (*tr.last_f)[i]);
        tr.recent_moves.push_back(std::sqrt(move));
        if (tr.recent_moves.size() > window) tr.recent_moves.pop_front();
    }
    tr.q_window.push_back(q);
    if (tr.q_window.size() > window + 1) tr.q_window.pop_front();
    tr.last_q = std::move(q);
    tr.last_f = f;

    if (tr.counter >= cfg.omega_tok) {
        tr.epsilon = tr.recent_moves.empty() ? 0.0
                                             : *std::max_element(tr.recent_moves.begin(), tr.recent_moves.end());
        tr.frozen_at = step;
        tr.frozen_value = f;
        return true;
    }
    return false;
}

ComponentCertificate local_component_certificate(const TokenTrack& track, double margin_s,
                                                 const FreezeConfig& cfg) {
    ComponentCertificate c;
    c.margin = margin_s;
    c.budget = cfg.omega_tok * std::sqrt(cfg.delta_tok / 2.0);
    c.pass = cfg.k == 1 || (track.last_q && track.last_q->size() == 1) || c.budget < 0.5 * margin_s;
    if (c.pass && track.last_q) {
        const int dominant = track.last_q->support[argmax_position(*track.last_q)];
        for (const ProbVector& q : track.q_window)
            if (q.support[argmax_position(q)] != dominant) c.replay_consistent = false;
    }
    return c;
}

ComponentCertificate local_component_certificate(const TokenTrack& track, const FreezeConfig& cfg) {
    if (!track.last_q) fail(ErrorCode::InvalidArgument, "token has no local distribution yet");
    return local_component_certificate(track, margin_report(*track.last_q).margin, cfg);
}

CouplingEstimate probe_coupling(const CouplingProbe& probe, int token, double probe_magnitude,
                                int trials, unsigned seed) {
    if (!probe.next_step || probe.activation_dim == 0)
        fail(ErrorCode::ProbeUnsupported, "model exposes no counterfactual step");
    if (!(probe_magnitude > 0.0)) fail(ErrorCode::InvalidArgument, "probe magnitude must be positive");
    if (trials < 1) fail(ErrorCode::InvalidArgument, "trials must be >= 1");

    const ProbVector base = probe.next_step(token, DenseVector(probe.activation_dim, 0.0));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    CouplingEstimate est;
    est.probe_magnitude = probe_magnitude;
    for (int i = 0; i < trials; ++i) {
        DenseVector delta(probe.activation_dim);
        for (double& x : delta) x = gauss(rng);
        const double n = norm2(delta);
        if (n == 0.0) continue;
        for (double& x : delta) x *= probe_magnitude / n;
        const ProbVector moved = probe.next_step(token, delta);
        est.beta = std::max(est.beta, total_variation(moved, base) / probe_magnitude);
        ++est.samples;
    }
    return est;
}

CouplingEstimate pooled_coupling(const std::vector<CouplingEstimate>& estimates) {
    if (estimates.empty()) fail(ErrorCode::EmptyInput, "nothing to pool");
    CouplingEstimate out;
    for (const CouplingEstimate& e : estimates) {
        out.beta = std::max(out.beta, e.beta);
        out.probe_magnitude = std::max(out.probe_magnitude, e.probe_magnitude);
        out.samples += e.samples;
    }
    return out;
}

FreezeSafetyReport freeze_safety(int token, const TokenTrack& track, const CouplingEstimate& coupling,
                                 double alpha_hat, Thresholds global, double global_margin) {
    if (!(alpha_hat >= 0.0 && alpha_hat < 1.0))
        fail(ErrorCode::AlphaNotContractive, "alpha_hat must be in [0,1)");
    FreezeSafetyReport r;
    r.token = token;
    r.bound = coupling.beta / (1.0 - alpha_hat) * track.epsilon;
    r.combined = tv_budget(global.delta, global.omega) + r.bound;
    r.global_margin_half = 0.5 * global_margin;
    r.safe = r.combined < r.global_margin_half;
    return r;
}

}  // namespace edit
