#pragma once

// Inference-time pseudo-gradients through LoRA-B, their RMS trajectory and
// the comparison band taken from fine-tuning gradient RMS.

#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "edit/diffusion.hpp"

namespace edit {

struct PseudoGradOptions {
    /// Layer and projection of the LoRA-B tensor; the side field is ignored.
    TapSpec module;
    bool sum_all_b = false;          ///< sum over every LoRA-B tensor instead
    bool differentiate_both = false; ///< also differentiate the step-t branch
};

/// sum over s in S_{t+1} of KL(p_t(s) || p_{t+1}(s)); the step-t distribution
/// comes from the recorded logits unless differentiate_both is set.
double pseudo_objective(const ToyModel& model, const DenoiseTrajectory& traj, int t,
                        const PseudoGradOptions& opts = {});

/// Gradient of pseudo_objective with respect to the selected LoRA-B (d_out x r).
DenseMatrix pseudo_gradient(const ToyModel& model, const DenoiseTrajectory& traj, int t,
                            const PseudoGradOptions& opts = {});

/// sqrt(mean of squares)
double rms(const DenseMatrix& m);
double rms(std::span<const double> values);

struct SftBand {
    double mu_sft = 0.0;
    double sigma_sft = 0.0;
    std::size_t n_steps = 0;
    double width = 1.0;  ///< band is mu +- width * sigma

    bool contains(double x) const { return x >= mu_sft - width * sigma_sft && x <= mu_sft + width * sigma_sft; }
};

/// Sample mean and (n-1) standard deviation.
SftBand sft_band(const std::vector<double>& rms_trace, double width = 1.0);

/// First index whose value and the following W-1 values all sit in the band.
std::optional<int> detect_convergence(const std::vector<double>& trace, const SftBand& band, int persistence = 3);

struct PseudoGradTrace {
    std::vector<int> steps;
    std::vector<double> rms_values;
    std::vector<bool> in_band;
    std::optional<int> convergence_step;
};

/// Pseudo-gradient RMS for every consecutive step pair of a trajectory.
PseudoGradTrace analyze_trajectory(const ToyModel& model, const DenoiseTrajectory& traj, const SftBand& band,
                                   const PseudoGradOptions& opts = {}, int persistence = 3);

/// CSV rows: step,rms,in_band,t_conv
void write_pseudo_grad_csv(std::ostream& out, const PseudoGradTrace& trace, bool header = true);

}  // namespace edit
