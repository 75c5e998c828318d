#pragma once

// Matched-support renormalization, step-wise KL and the run-length stopping
// rule for one denoising block.

#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <vector>

#include "edit/alignment.hpp"

namespace edit {

struct Thresholds {
    double delta = 0.05;
    int omega = 6;
};

/// delta may also take two limit values: 0 never counts a step as stable,
/// +infinity counts every comparable step as stable.
struct StopConfig {
    double delta = 0.05;
    int omega = 6;
    double tau_blk = kDefaultBlockTemperature;
    std::optional<Thresholds> first_block_overrides;

    Thresholds for_block(int block_index) const;
    void validate() const;

    static constexpr double never_stable() { return 0.0; }
    static constexpr double always_stable() { return std::numeric_limits<double>::infinity(); }
};

enum class StopReason { still_running, run_length_met, budget_exhausted };
const char* to_string(StopReason r) noexcept;

struct StopDecision {
    bool stop = false;
    int step = 0;
    StopReason reason = StopReason::still_running;
    int final_counter = 0;
};

struct TraceRow {
    int step = 0;
    double divergence = 0.0;
    std::size_t matched_support = 0;
    int counter = 0;
    bool stopped = false;
};

struct StabilityState {
    int block_index = 0;
    int counter = 0;
    std::optional<AlignmentDistribution> prev_distribution;
    std::optional<VisibleSet> prev_visible;
    std::vector<TraceRow> divergence_trace;
    std::optional<int> stopped_at;
    int frames_seen = 0;
    int skipped_steps = 0;  ///< steps whose matched support was empty
};

struct MatchedSupport {
    ProbVector p_tilde;  ///< current step, restricted and renormalized
    ProbVector q_tilde;  ///< previous step, restricted and renormalized
    VisibleSet intersection;
};

/// Restricts a distribution to `support` (a subset of its own) and renormalizes.
ProbVector restrict_to(const ProbVector& p, const VisibleSet& support);

MatchedSupport matched_renormalize(const AlignmentDistribution& curr, const AlignmentDistribution& prev);

/// KL(p_tilde || q_tilde); current step first.
double step_divergence(const ProbVector& p_tilde, const ProbVector& q_tilde);

/// Run-length rule: D_t < delta increments, anything else resets. Appends the
/// trace row and reports whether the block should stop.
StopDecision update_counter(StabilityState& state, int step, double d_t, std::size_t matched_size,
                            const StopConfig& cfg);

/// Streaming form of the block loop: feed frames as they are produced.
class StabilityMonitor {
public:
    StabilityMonitor(ReasoningMap map, SimilarityMode mode, StopConfig cfg, int block_index,
                     int max_steps);

    StopDecision observe(const ActivationFrame& frame);
    StopDecision observe_distribution(AlignmentDistribution dist, const VisibleSet& visible);

    const StabilityState& state() const noexcept { return state_; }
    const std::vector<AlignmentDistribution>& distributions() const noexcept { return history_; }
    const StopConfig& config() const noexcept { return cfg_; }
    Thresholds thresholds() const { return cfg_.for_block(state_.block_index); }
    bool stopped() const noexcept { return last_.stop; }

private:
    ReasoningMap map_;
    SimilarityMode mode_;
    StopConfig cfg_;
    int max_steps_;
    StabilityState state_;
    std::vector<AlignmentDistribution> history_;
    StopDecision last_;
};

struct BlockRun {
    StopDecision decision;
    StabilityState state;
    std::vector<AlignmentDistribution> distributions;
};

using FrameStream = std::function<std::optional<ActivationFrame>()>;

/// Pulls frames until the stop rule fires or `max_steps` frames were consumed.
BlockRun run_block(const FrameStream& stream, const ReasoningMap& map, const SimilarityMode& mode,
                   const StopConfig& cfg, int max_steps, int block_index = 0);

/// CSV rows: step,D_t,matched_support,counter,stopped
void write_trace_csv(std::ostream& out, const StabilityState& state, bool header = true);

}  // namespace edit
