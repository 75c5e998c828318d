#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "edit/diffusion.hpp"

namespace edit {

const char* to_string(TaskKind k) noexcept {
    switch (k) {
        case TaskKind::copy_reverse: return "copy_reverse";
        case TaskKind::modular_sum: return "modular_sum";
        case TaskKind::sort_small: return "sort_small";
    }
    return "?";
}

TaskKind parse_task(const std::string& name) {
    if (name == "copy_reverse") return TaskKind::copy_reverse;
    if (name == "modular_sum") return TaskKind::modular_sum;
    if (name == "sort_small") return TaskKind::sort_small;
    fail(ErrorCode::ConfigError, "unknown task '" + name + "'");
}

namespace {
std::mt19937_64 seeded(std::initializer_list<std::uint64_t> parts) {
    std::vector<std::uint32_t> words;
    for (std::uint64_t p : parts) {
        words.push_back(static_cast<std::uint32_t>(p));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}
}  // namespace

TaskSample SyntheticTask::sample(std::uint64_t index) const {
    auto rng = seeded({seed, index, static_cast<std::uint64_t>(kind)});
    std::uniform_int_distribution<int> sym(0, alphabet - 1);
    std::vector<int> raw(seq_len);
    for (int& v : raw) v = sym(rng);

    std::vector<int> out(seq_len);
    switch (kind) {
        case TaskKind::copy_reverse:
            std::reverse_copy(raw.begin(), raw.end(), out.begin());
            break;
        case TaskKind::modular_sum: {
            int acc = 0;
            for (int i = 0; i < seq_len; ++i) out[i] = acc = (acc + raw[i]) % alphabet;
            break;
        }
        case TaskKind::sort_small:
            out = raw;
            std::sort(out.begin(), out.end());
            break;
    }
    TaskSample s;
    s.id = index;
    for (int v : raw) s.prompt.push_back(kFirstContentToken + v);
    s.prompt.push_back(kSepToken);
    for (int v : out) s.target.push_back(kFirstContentToken + v);
    return s;
}

void SyntheticTask::validate(const ModelConfig& model) const {
    if (seq_len < 1 || seq_len % model.block_length != 0)
        fail(ErrorCode::ConfigError, "seq_len must be a positive multiple of the block length");
    if (seq_len / model.block_length > model.max_blocks)
        fail(ErrorCode::ConfigError, "seq_len needs more blocks than max_blocks");
    if (alphabet < 2 || kFirstContentToken + alphabet > model.vocab_size)
        fail(ErrorCode::ConfigError, "alphabet does not fit the vocabulary");
    if (2 * seq_len + 1 > model.max_positions)
        fail(ErrorCode::ConfigError, "prompt plus target exceed max_positions");
}

TrainingExample make_training_example(const TaskSample& s, const ModelConfig& cfg, int block, double mask_rate,
                                      std::uint64_t rng_seed) {
    const int L = cfg.block_length;
    TrainingExample ex;
    ex.tokens = s.prompt;
    ex.tokens.insert(ex.tokens.end(), s.target.begin(), s.target.begin() + static_cast<std::ptrdiff_t>(block + 1) * L);
    const int offset = static_cast<int>(s.prompt.size()) + block * L;
    std::vector<int> idx(L);
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = seeded({rng_seed});
    std::shuffle(idx.begin(), idx.end(), rng);
    const int count = std::clamp(static_cast<int>(std::lround(mask_rate * L)), 1, L);
    std::sort(idx.begin(), idx.begin() + count);
    for (int i = 0; i < count; ++i) {
        const int pos = offset + idx[i];
        ex.targets.emplace_back(pos, ex.tokens[pos]);
        ex.tokens[pos] = kMaskToken;
    }
    return ex;
}

double batch_gradients(const ToyModel& model, const std::vector<TrainingExample>& batch, ModelParams& grads,
                       GradScope scope) {
    double loss = 0.0;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (const TrainingExample& ex : batch) {
        const ForwardResult fr = model.forward(ex.tokens, true);
        Mat dlogits;
        loss += masked_cross_entropy(fr.logits, ex.targets, dlogits) * w;
        dlogits *= w;
        model.backward(fr, dlogits, grads, scope);
    }
    if (!std::isfinite(loss)) fail(ErrorCode::TrainingDiverged, "loss became non-finite");
    return loss;
}

namespace {

std::vector<TrainingExample> draw_batch(const SyntheticTask& task, const ModelConfig& mc, const TrainConfig& cfg,
                                        std::uint64_t phase, int step) {
    const int blocks = task.seq_len / mc.block_length;
    std::vector<TrainingExample> batch;
    for (int i = 0; i < cfg.batch_size; ++i) {
        auto rng = seeded({cfg.seed, phase, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)});
        const std::uint64_t index = rng() >> 24;  // training ids stay below 2^40
        const int block = std::uniform_int_distribution<int>(0, blocks - 1)(rng);
        const double rate =
            cfg.mask_rates[std::uniform_int_distribution<std::size_t>(0, cfg.mask_rates.size() - 1)(rng)];
        batch.push_back(make_training_example(task.sample(index), mc, block, rate, rng()));
    }
    return batch;
}

void clip_global_norm(std::vector<ParamRef>& grads, double max_norm) {
    double sq = 0.0;
    for (const ParamRef& g : grads) sq += g.value.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > max_norm)
        for (ParamRef& g : grads) g.value *= max_norm / norm;
}

DenseMatrix to_dense(const Eigen::Map<Mat>& m) {
    return DenseMatrix(m.rows(), m.cols(), std::vector<double>(m.data(), m.data() + m.size()));
}

}  // namespace

std::vector<double> pretrain(ToyModel& model, const SyntheticTask& task, const TrainConfig& cfg) {
    task.validate(model.config());
    std::vector<double> losses;
    if (cfg.pretrain_steps <= 0) return losses;
    ModelParams& params = model.params();
    ModelParams m1 = model.zero_like();
    ModelParams m2 = model.zero_like();
    auto pv = base_tensors(params);
    auto mv = base_tensors(m1);
    auto vv = base_tensors(m2);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const int warmup = std::max(1, cfg.pretrain_steps / 20);
    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        ModelParams grads = model.zero_like();
        losses.push_back(batch_gradients(model, draw_batch(task, model.config(), cfg, 1, step), grads, GradScope::all));
        auto gv = base_tensors(grads);
        clip_global_norm(gv, 1.0);
        const double progress = static_cast<double>(step) / cfg.pretrain_steps;
        const double lr = cfg.pretrain_lr * std::min(1.0, (step + 1.0) / warmup) * 0.5 *
                          (1.0 + std::cos(3.14159265358979323846 * progress));
        const double c1 = 1.0 - std::pow(b1, step + 1);
        const double c2 = 1.0 - std::pow(b2, step + 1);
        for (std::size_t i = 0; i < pv.size(); ++i) {
            mv[i].value = b1 * mv[i].value + (1.0 - b1) * gv[i].value;
            vv[i].value = b2 * vv[i].value + (1.0 - b2) * gv[i].value.cwiseProduct(gv[i].value);
            pv[i].value.array() -=
                lr * (mv[i].value.array() / c1) / ((vv[i].value.array() / c2).sqrt() + eps);
        }
    }
    return losses;
}

SftResult sft_train(ToyModel& model, const SyntheticTask& task, const TrainConfig& cfg) {
    if (cfg.sft_steps < 1) fail(ErrorCode::ConfigError, "sft_steps must be >= 1");
    task.validate(model.config());
    cfg.sft_opt.validate();
    const ModelConfig& mc = model.config();
    const std::string tap_id = cfg.tap.module_id(mc);

    auto pv = lora_tensors(model.params());
    std::vector<MomentState> moments;
    std::vector<EvolutionAccumulator> acc;
    for (const ParamRef& r : pv) {
        moments.push_back(MomentState::zeros(r.value.rows(), r.value.cols()));
        acc.emplace_back(r.value.rows(), r.value.cols());
    }
    SftResult out;
    const AdamWConfig& opt = cfg.sft_opt;
    DenseMatrix update;
    for (int step = 0; step < cfg.sft_steps; ++step) {
        ModelParams grads = model.zero_like();
        out.loss_trace.push_back(
            batch_gradients(model, draw_batch(task, mc, cfg, 2, step), grads, GradScope::lora));
        auto gv = lora_tensors(grads);
        const double c1 = 1.0 - std::pow(opt.beta1, step + 1);
        const double c2 = 1.0 - std::pow(opt.beta2, step + 1);
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const DenseMatrix g = to_dense(gv[i].value);
            if (gv[i].name == tap_id) {
                double sq = 0.0;
                for (double x : g.data()) sq += x * x;
                out.grad_rms_trace.push_back(std::sqrt(sq / static_cast<double>(g.size())));
            }
            adamw_step_inplace(moments[i], g, opt, update);
            acc[i].accumulate(update);
            // parameter step uses the bias-corrected moments; the captured U does not
            for (Eigen::Index j = 0; j < pv[i].value.size(); ++j) {
                const double mh = moments[i].m.data()[j] / c1;
                const double vh = moments[i].v.data()[j] / c2;
                double& p = pv[i].value.data()[j];
                p -= opt.learning_rate * (mh / (std::sqrt(vh) + opt.epsilon) + opt.weight_decay * p);
            }
        }
    }
    for (std::size_t i = 0; i < pv.size(); ++i) {
        DenseMatrix evo = acc[i].finalize();
        out.energy_vectors.push_back(reduce_row_energy(evo, pv[i].name));
        out.mean_vectors.push_back(reduce_row_mean(evo, pv[i].name + ":mean"));
        if (pv[i].name == tap_id)
            out.bases.push_back(build_subspace(evo, static_cast<std::size_t>(std::min<long>(cfg.basis_k, evo.cols())),
                                               pv[i].name));
        out.evolution.emplace(pv[i].name, std::move(evo));
    }
    return out;
}

}  // namespace edit
