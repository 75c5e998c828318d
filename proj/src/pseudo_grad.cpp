#include "edit/pseudo_grad.hpp"

#include <cmath>
#include <ostream>
#include <string>

#include "edit/format.hpp"

namespace edit {

namespace {

struct StepPair {
    const StepRecord* prev;
    const StepRecord* next;
    int offset;
};

StepPair locate(const DenoiseTrajectory& traj, int t) {
    if (traj.steps.empty()) fail(ErrorCode::NoRecordedGraph, "trajectory kept no per-step records");
    if (t < 1 || t + 1 > static_cast<int>(traj.steps.size()))
        fail(ErrorCode::MissingStep, "steps " + std::to_string(t) + " and " + std::to_string(t + 1) +
                                         " are not both in the trajectory");
    const StepRecord& a = traj.steps[t - 1];
    const StepRecord& b = traj.steps[t];
    const int offset = static_cast<int>(b.input.size()) - static_cast<int>(b.block_tokens.size());
    return {&a, &b, offset};
}

std::vector<double> log_softmax_row(const Mat& logits, Eigen::Index row) {
    const double mx = logits.row(row).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(logits(row, j) - mx);
    const double lz = mx + std::log(z);
    std::vector<double> out(logits.cols());
    for (Eigen::Index j = 0; j < logits.cols(); ++j) out[j] = logits(row, j) - lz;
    return out;
}

double kl_from_logs(const std::vector<double>& lp, const std::vector<double>& lq) {
    double kl = 0.0;
    for (std::size_t j = 0; j < lp.size(); ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
    return kl;
}

// Logits of the step-t branch: recorded, or recomputed when differentiated.
Mat prev_logits(const ToyModel& model, const StepPair& sp, const PseudoGradOptions& opts,
                std::optional<ForwardResult>& fwd) {
    if (!opts.differentiate_both) return sp.prev->block_logits;
    fwd = model.forward(sp.prev->input, true);
    return fwd->logits.middleRows(sp.offset, sp.prev->block_tokens.size());
}

}  // namespace

double pseudo_objective(const ToyModel& model, const DenoiseTrajectory& traj, int t, const PseudoGradOptions& opts) {
    const StepPair sp = locate(traj, t);
    std::optional<ForwardResult> fprev;
    const Mat lp_all = prev_logits(model, sp, opts, fprev);
    const ForwardResult fr = model.forward(sp.next->input, false);
    double total = 0.0;
    for (int s : sp.next->visible)
        total += kl_from_logs(log_softmax_row(lp_all, s), log_softmax_row(fr.logits, sp.offset + s));
    return total;
}

DenseMatrix pseudo_gradient(const ToyModel& model, const DenoiseTrajectory& traj, int t,
                            const PseudoGradOptions& opts) {
    const StepPair sp = locate(traj, t);
    std::optional<ForwardResult> fprev;
    const Mat lp_all = prev_logits(model, sp, opts, fprev);
    const ForwardResult fr = model.forward(sp.next->input, true);

    Mat d_next = Mat::Zero(fr.logits.rows(), fr.logits.cols());
    Mat d_prev;
    if (fprev) d_prev = Mat::Zero(fprev->logits.rows(), fprev->logits.cols());
    for (int s : sp.next->visible) {
        const std::vector<double> lp = log_softmax_row(lp_all, s);
        const std::vector<double> lq = log_softmax_row(fr.logits, sp.offset + s);
        // d/dz_{t+1} KL(p || softmax(z)) = softmax(z) - p
        for (std::size_t j = 0; j < lp.size(); ++j) d_next(sp.offset + s, j) = std::exp(lq[j]) - std::exp(lp[j]);
        if (fprev) {
            const double kl = kl_from_logs(lp, lq);
            for (std::size_t j = 0; j < lp.size(); ++j)
                d_prev(sp.offset + s, j) = std::exp(lp[j]) * (lp[j] - lq[j] - kl);
        }
    }
    ModelParams grads = model.zero_like();
    model.backward(fr, d_next, grads, GradScope::lora);
    if (fprev) model.backward(*fprev, d_prev, grads, GradScope::lora);

    const ModelConfig& mc = model.config();
    const int r = mc.lora_rank;
    DenseMatrix out(mc.d_model, r);
    auto add = [&](const Mat& b) {
        for (Eigen::Index i = 0; i < b.rows(); ++i)
            for (Eigen::Index j = 0; j < b.cols(); ++j) out(i, j) += b(i, j);
    };
    if (opts.sum_all_b) {
        for (const LayerParams& L : grads.layers)
            for (const LoraPair& lp : L.lora) add(lp.b);
    } else {
        add(grads.layers[opts.module.resolved_layer(mc)].lora[static_cast<int>(opts.module.proj)].b);
    }
    return out;
}

double rms(std::span<const double> values) {
    if (values.empty()) fail(ErrorCode::EmptyInput, "rms of an empty input");
    double sq = 0.0;
    for (double v : values) sq += v * v;
    return std::sqrt(sq / static_cast<double>(values.size()));
}

double rms(const DenseMatrix& m) { return rms(std::span<const double>(m.data())); }

SftBand sft_band(const std::vector<double>& rms_trace, double width) {
    if (rms_trace.size() < 2) fail(ErrorCode::TooFewSamples, "sft_band needs at least 2 values");
    SftBand b;
    b.n_steps = rms_trace.size();
    b.width = width;
    b.mu_sft = pairwise_sum(rms_trace) / static_cast<double>(rms_trace.size());
    std::vector<double> dev;
    dev.reserve(rms_trace.size());
    for (double x : rms_trace) dev.push_back((x - b.mu_sft) * (x - b.mu_sft));
    b.sigma_sft = std::sqrt(pairwise_sum(dev) / static_cast<double>(rms_trace.size() - 1));
    return b;
}

std::optional<int> detect_convergence(const std::vector<double>& trace, const SftBand& band, int persistence) {
    if (persistence < 1) fail(ErrorCode::InvalidArgument, "persistence must be >= 1");
    int run = 0;
    for (int i = 0; i < static_cast<int>(trace.size()); ++i) {
        run = band.contains(trace[i]) ? run + 1 : 0;
        if (run == persistence) return i - persistence + 1;
    }
    return std::nullopt;
}

PseudoGradTrace analyze_trajectory(const ToyModel& model, const DenoiseTrajectory& traj, const SftBand& band,
                                   const PseudoGradOptions& opts, int persistence) {
    PseudoGradTrace out;
    for (int t = 1; t + 1 <= static_cast<int>(traj.steps.size()); ++t) {
        const double v = rms(pseudo_gradient(model, traj, t, opts));
        out.steps.push_back(t);
        out.rms_values.push_back(v);
        out.in_band.push_back(band.contains(v));
    }
    if (auto idx = detect_convergence(out.rms_values, band, persistence)) out.convergence_step = out.steps[*idx];
    return out;
}

void write_pseudo_grad_csv(std::ostream& out, const PseudoGradTrace& trace, bool header) {
    if (header) out << "step,rms,in_band,t_conv\n";
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        out << trace.steps[i] << ',' << format_real(trace.rms_values[i]) << ',' << (trace.in_band[i] ? 1 : 0) << ',';
        if (trace.convergence_step) out << *trace.convergence_step;
        out << '\n';
    }
}

}  // namespace edit
