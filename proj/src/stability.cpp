#include "edit/stability.hpp"

#include <cmath>
#include <ostream>
#include <string>

#include "edit/format.hpp"

namespace edit {

const char* to_string(StopReason r) noexcept {
    switch (r) {
        case StopReason::still_running: return "still_running";
        case StopReason::run_length_met: return "run_length_met";
        case StopReason::budget_exhausted: return "budget_exhausted";
    }
    return "unknown";
}

Thresholds StopConfig::for_block(int block_index) const {
    if (block_index == 0 && first_block_overrides) return *first_block_overrides;
    return {delta, omega};
}

void StopConfig::validate() const {
    auto check = [](double d, int o) {
        if (std::isnan(d) || d < 0.0) fail(ErrorCode::ConfigError, "delta must be >= 0");
        if (o < 1) fail(ErrorCode::ConfigError, "omega must be >= 1");
    };
    check(delta, omega);
    if (first_block_overrides) check(first_block_overrides->delta, first_block_overrides->omega);
    if (!(tau_blk > 0.0)) fail(ErrorCode::ConfigError, "tau_blk must be positive");
}

ProbVector restrict_to(const ProbVector& p, const VisibleSet& support) {
    std::vector<double> w;
    w.reserve(support.size());
    std::size_t j = 0;
    for (int token : support.members) {
        while (j < p.support.size() && p.support[j] < token) ++j;
        if (j == p.support.size() || p.support[j] != token)
            fail(ErrorCode::SupportMismatch, "token " + std::to_string(token) + " not in support");
        w.push_back(p.probs[j]);
    }
    ProbVector out = normalized(w);
    out.support = support.members;
    return out;
}

MatchedSupport matched_renormalize(const AlignmentDistribution& curr, const AlignmentDistribution& prev) {
    if (curr.step != prev.step + 1)
        fail(ErrorCode::StepOrder, "matched_renormalize expects consecutive steps, got " +
                                       std::to_string(prev.step) + " -> " + std::to_string(curr.step));
    const VisibleSet a{curr.dist.support};
    const VisibleSet b{prev.dist.support};
    VisibleSet common = intersect(a, b);
    if (common.empty()) fail(ErrorCode::EmptyIntersection, "no token visible at both steps");
    return {restrict_to(curr.dist, common), restrict_to(prev.dist, common), std::move(common)};
}

double step_divergence(const ProbVector& p_tilde, const ProbVector& q_tilde) {
    return kl_divergence(p_tilde, q_tilde);
}

StopDecision update_counter(StabilityState& state, int step, double d_t, std::size_t matched_size,
                            const StopConfig& cfg) {
    if (!(d_t >= 0.0)) fail(ErrorCode::InvalidArgument, "divergence must be >= 0");
    if (!state.divergence_trace.empty() && step <= state.divergence_trace.back().step)
        fail(ErrorCode::StepOrder, "trace steps must increase");
    const Thresholds th = cfg.for_block(state.block_index);
    if (d_t < th.delta)
        ++state.counter;
    else
        state.counter = 0;

    StopDecision d;
    d.step = step;
    d.final_counter = state.counter;
    if (state.counter >= th.omega) {
        d.stop = true;
        d.reason = StopReason::run_length_met;
        state.stopped_at = step;
    }
    state.divergence_trace.push_back({step, d_t, matched_size, state.counter, d.stop});
    return d;
}

StabilityMonitor::StabilityMonitor(ReasoningMap map, SimilarityMode mode, StopConfig cfg,
                                   int block_index, int max_steps)
    : map_(std::move(map)), mode_(mode), cfg_(cfg), max_steps_(max_steps) {
    cfg_.validate();
    mode_.validate();
    if (max_steps_ < 1) fail(ErrorCode::ConfigError, "max_steps must be >= 1");
    state_.block_index = block_index;
}

StopDecision StabilityMonitor::observe(const ActivationFrame& frame) {
    AlignmentDistribution dist = align_frame(frame, map_, mode_, cfg_.tau_blk);
    return observe_distribution(std::move(dist), frame.visible);
}

StopDecision StabilityMonitor::observe_distribution(AlignmentDistribution dist, const VisibleSet& visible) {
    if (last_.stop) return last_;
    if (state_.prev_visible && !visible.is_superset_of(*state_.prev_visible))
        fail(ErrorCode::NonMonotoneVisibleSet,
             "step " + std::to_string(dist.step) + " dropped a previously visible token");
    if (!history_.empty() && dist.step != history_.back().step + 1)
        fail(ErrorCode::StepOrder, "frames must arrive on consecutive steps");

    ++state_.frames_seen;
    StopDecision decision;
    decision.step = dist.step;
    decision.final_counter = state_.counter;

    if (state_.prev_distribution) {
        try {
            const MatchedSupport ms = matched_renormalize(dist, *state_.prev_distribution);
            const double d_t = step_divergence(ms.p_tilde, ms.q_tilde);
            decision = update_counter(state_, dist.step, d_t, ms.intersection.size(), cfg_);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::EmptyIntersection) throw;
            ++state_.skipped_steps;
        }
    }
    if (!decision.stop && state_.frames_seen >= max_steps_) {
        decision.stop = true;
        decision.reason = StopReason::budget_exhausted;
        decision.final_counter = state_.counter;
        if (!state_.divergence_trace.empty() && state_.divergence_trace.back().step == dist.step)
            state_.divergence_trace.back().stopped = true;
    }
    state_.prev_visible = visible;
    state_.prev_distribution = dist;
    history_.push_back(std::move(dist));
    last_ = decision;
    return decision;
}

BlockRun run_block(const FrameStream& stream, const ReasoningMap& map, const SimilarityMode& mode,
                   const StopConfig& cfg, int max_steps, int block_index) {
    StabilityMonitor monitor(map, mode, cfg, block_index, max_steps);
    StopDecision decision;
    while (!decision.stop) {
        std::optional<ActivationFrame> frame = stream();
        if (!frame) break;
        decision = monitor.observe(*frame);
    }
    return {decision, monitor.state(), monitor.distributions()};
}

void write_trace_csv(std::ostream& out, const StabilityState& state, bool header) {
    if (header) out << "step,D_t,matched_support,counter,stopped\n";
    for (const TraceRow& r : state.divergence_trace) {
        out << r.step << ',' << format_real(r.divergence) << ',' << r.matched_support << ','
            << r.counter << ',' << (r.stopped ? 1 : 0) << '\n';
    }
}

}  // namespace edit
