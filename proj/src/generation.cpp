#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>

#include "edit/diffusion.hpp"
#include "json.hpp"

namespace edit {

const char* to_string(StopPolicy p) noexcept {
    switch (p) {
        case StopPolicy::fixed_steps: return "fixed";
        case StopPolicy::edit: return "edit";
        case StopPolicy::edit_freeze: return "edit-freeze";
    }
    return "?";
}

StopPolicy parse_policy(const std::string& name) {
    if (name == "fixed" || name == "fixed_steps") return StopPolicy::fixed_steps;
    if (name == "edit") return StopPolicy::edit;
    if (name == "edit-freeze" || name == "edit+freeze" || name == "edit_freeze") return StopPolicy::edit_freeze;
    fail(ErrorCode::ConfigError, "unknown policy '" + name + "'");
}

namespace {

// Largest probability over content tokens and the token achieving it.
std::pair<double, int> best_content(const Mat& logits, int row) {
    const DenseVector p = softmax_row(logits, row);
    int best = kFirstContentToken;
    for (int j = kFirstContentToken + 1; j < static_cast<int>(p.size()); ++j)
        if (p[j] > p[best]) best = j;
    return {p[best], best};
}

}  // namespace

DenoiseTrajectory denoise_block(const ToyModel& model, const std::vector<int>& context, int block_index,
                                const GenerateOptions& opts) {
    const ModelConfig& mc = model.config();
    const int L = mc.block_length;
    const int T = opts.steps_per_block;
    if (T < 1) fail(ErrorCode::ConfigError, "steps_per_block must be >= 1");
    const int offset = static_cast<int>(context.size());
    const int per_step = (L + T - 1) / T;
    const bool monitored = opts.policy != StopPolicy::fixed_steps;
    const bool freezing = opts.policy == StopPolicy::edit_freeze;
    if (monitored && !opts.map) fail(ErrorCode::ConfigError, "edit policies need a reasoning map");
    if (freezing && !opts.freeze_basis) fail(ErrorCode::ConfigError, "edit-freeze needs a subspace basis");
    std::optional<SubspaceBasis> local_basis;
    if (freezing) {
        opts.freeze.validate();
        const SubspaceBasis& full = *opts.freeze_basis;
        if (static_cast<int>(full.columns.cols()) < opts.freeze.k)
            fail(ErrorCode::RankTooLarge, "freeze k exceeds the basis rank");
        // leading k columns
        local_basis = SubspaceBasis{DenseMatrix(full.columns.rows(), opts.freeze.k),
                                    static_cast<std::uint32_t>(opts.freeze.k), full.source_module};
        for (std::size_t r = 0; r < full.columns.rows(); ++r)
            for (int j = 0; j < opts.freeze.k; ++j) local_basis->columns(r, j) = full.columns(r, j);
    }

    std::vector<int> tokens = context;
    tokens.resize(offset + L, kMaskToken);

    DenoiseTrajectory traj;
    traj.block_index = block_index;
    std::optional<StabilityMonitor> monitor;
    if (monitored) monitor.emplace(*opts.map, opts.mode, opts.stop, block_index, T);
    bool monitor_active = monitored;
    TokenFreezeState freeze_state;
    TapPins pins;

    ForwardResult fr;
    std::vector<int> cached_input;
    bool dirty = true;
    auto run_forward = [&] {
        if (dirty || tokens != cached_input) {
            fr = model.forward(tokens, false, &opts.tap, pins.empty() ? nullptr : &pins);
            cached_input = tokens;
            dirty = false;
        }
    };

    for (int step = 1; step <= T; ++step) {
        run_forward();
        std::vector<std::pair<double, int>> cand;  // (-confidence, position)
        for (int s = 0; s < L; ++s)
            if (tokens[offset + s] == kMaskToken) cand.emplace_back(-best_content(fr.logits, offset + s).first, s);
        std::sort(cand.begin(), cand.end());
        for (int i = 0; i < per_step && i < static_cast<int>(cand.size()); ++i) {
            const int pos = offset + cand[i].second;
            tokens[pos] = best_content(fr.logits, pos).second;
        }

        ActivationFrame frame;
        frame.step = step;
        std::vector<int> positions;
        for (int s = 0; s < L; ++s)
            if (tokens[offset + s] != kMaskToken) {
                frame.visible.members.push_back(s);
                positions.push_back(offset + s);
            }
        frame.activations = model.tap(fr, opts.tap, positions);
        for (std::size_t i = 0; i < positions.size(); ++i)
            frame.activations[i] = freeze_state.deliver(frame.visible.members[i], frame.activations[i]);
        traj.steps_used = step;

        if (opts.keep_steps) {
            StepRecord rec;
            rec.step = step;
            rec.input = cached_input;
            rec.visible = frame.visible.members;
            rec.block_tokens.assign(tokens.begin() + offset, tokens.end());
            rec.block_logits = fr.logits.middleRows(offset, L);
            rec.frame = frame;
            traj.steps.push_back(std::move(rec));
        }
        if (!monitor_active) continue;

        const StopDecision decision = monitor->observe(frame);

        if (freezing) {
            const ProbVector& global = monitor->distributions().back().dist;
            for (std::size_t i = 0; i < positions.size(); ++i) {
                const int s = frame.visible.members[i];
                if (freeze_state.is_frozen(s)) continue;
                if (!token_stability_step(freeze_state, s, step, frame.activations[i], *local_basis, opts.freeze))
                    continue;
                const TokenTrack& tr = freeze_state.tokens.at(s);
                FreezeEvent ev;
                ev.step = step;
                ev.token = s;
                ev.epsilon = tr.epsilon;
                ev.component = local_component_certificate(tr, opts.freeze);
                ev.global_margin = margin_report(global).margin;
                if (opts.alpha_hat && opts.coupling && *opts.alpha_hat < 1.0)
                    ev.safety = freeze_safety(s, tr, *opts.coupling, *opts.alpha_hat, monitor->thresholds(),
                                              ev.global_margin);
                traj.freezes.push_back(std::move(ev));
                pins[positions[i]] = frame.activations[i];
                dirty = true;
            }
        }

        if (decision.stop) {
            traj.decision = decision;
            if (decision.reason == StopReason::run_length_met) {
                const auto& hist = monitor->distributions();
                const MatchedSupport ms = matched_renormalize(hist.back(), hist[hist.size() - 2]);
                traj.certificate = certify_stop(step, monitor->thresholds(), ms.p_tilde, opts.alpha_hat);
                if (opts.strict_certificates && !traj.certificate->local_pass) {
                    monitor_active = false;  // keep denoising to the budget
                    continue;
                }
            }
            break;
        }
    }
    if (monitor) {
        traj.stability = monitor->state();
        traj.distributions = monitor->distributions();
    }

    if (std::find(tokens.begin() + offset, tokens.end(), kMaskToken) != tokens.end()) {
        run_forward();
        for (int s = 0; s < L; ++s)
            if (tokens[offset + s] == kMaskToken) tokens[offset + s] = best_content(fr.logits, offset + s).second;
        traj.final_pass = true;
    }
    traj.final_block.assign(tokens.begin() + offset, tokens.end());
    return traj;
}

double GenerationResult::average_steps() const {
    if (steps_per_block.empty()) return 0.0;
    double total = 0.0;
    for (int s : steps_per_block) total += s;
    return total / static_cast<double>(steps_per_block.size());
}

GenerationResult generate(const ToyModel& model, const std::vector<int>& prompt, int seq_len,
                          const GenerateOptions& opts) {
    const int L = model.config().block_length;
    if (seq_len < L || seq_len % L != 0) fail(ErrorCode::ConfigError, "seq_len must be a multiple of L");
    GenerationResult out;
    std::vector<int> context = prompt;
    for (int b = 0; b < seq_len / L; ++b) {
        DenoiseTrajectory traj = denoise_block(model, context, b, opts);
        context.insert(context.end(), traj.final_block.begin(), traj.final_block.end());
        out.output.insert(out.output.end(), traj.final_block.begin(), traj.final_block.end());
        out.steps_per_block.push_back(traj.steps_used);
        out.blocks.push_back(std::move(traj));
    }
    return out;
}

CouplingProbe make_model_probe(const ToyModel& model, const std::vector<int>& tokens, int block_offset,
                               const std::vector<int>& visible, const TapSpec& tap, const ReasoningMap& map,
                               const SimilarityMode& mode, double tau_blk) {
    std::vector<int> positions;
    for (int s : visible) positions.push_back(block_offset + s);
    const ForwardResult base = model.forward(tokens, false);
    const std::vector<DenseVector> acts = model.tap(base, tap, positions);
    CouplingProbe probe;
    probe.activation_dim = static_cast<std::size_t>(tap.width(model.config()));
    probe.next_step = [&model, tokens, positions, visible, tap, map, mode, tau_blk, acts](int token,
                                                                                       const DenseVector& delta) {
        const auto it = std::find(visible.begin(), visible.end(), token);
        if (it == visible.end()) fail(ErrorCode::InvalidArgument, "probe token is not visible");
        const std::size_t i = static_cast<std::size_t>(it - visible.begin());
        TapPins pins;
        DenseVector f = acts[i];
        for (std::size_t j = 0; j < f.size(); ++j) f[j] += delta[j];
        pins[positions[i]] = f;
        const ForwardResult fr = model.forward(tokens, false, &tap, &pins);
        ActivationFrame frame{0, VisibleSet{visible}, model.tap(fr, tap, positions)};
        return align_frame(frame, map, mode, tau_blk).dist;
    };
    return probe;
}

void write_generation_jsonl(std::ostream& out, const TaskSample& s, const GenerationResult& g) {
    nlohmann::json j;
    j["id"] = s.id;
    j["prompt"] = s.prompt;
    j["target"] = s.target;
    j["output"] = g.output;
    j["steps_per_block"] = g.steps_per_block;
    out << j.dump() << '\n';
}

}  // namespace edit
