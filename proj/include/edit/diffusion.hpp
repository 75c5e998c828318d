#pragma once

// Synthetic tasks, pretraining + LoRA fine-tuning with metadata capture, and
// block-wise denoising under the fixed / edit / edit+freeze stop policies.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "edit/certificates.hpp"
#include "edit/metadata.hpp"
#include "edit/stability.hpp"
#include "edit/token_freeze.hpp"
#include "edit/toy_model.hpp"

namespace edit {

enum class TaskKind { copy_reverse, modular_sum, sort_small };
const char* to_string(TaskKind k) noexcept;
TaskKind parse_task(const std::string& name);

struct TaskSample {
    std::uint64_t id = 0;
    std::vector<int> prompt;  ///< content tokens followed by the separator
    std::vector<int> target;
};

struct SyntheticTask {
    TaskKind kind = TaskKind::copy_reverse;
    int seq_len = 32;   ///< target length
    int alphabet = 16;  ///< content symbols kFirstContentToken..+alphabet-1
    std::uint64_t seed = 0;

    /// Deterministic in (seed, index).
    TaskSample sample(std::uint64_t index) const;
    void validate(const ModelConfig& model) const;
};

// ---- training ---------------------------------------------------------------

struct TrainConfig {
    int pretrain_steps = 600;
    int sft_steps = 200;
    int batch_size = 8;
    double pretrain_lr = 3e-3;
    AdamWConfig sft_opt{0.9, 0.999, 1e-8, 2e-3, 0.0, false};
    std::vector<double> mask_rates{0.25, 0.5, 0.75};
    std::uint64_t seed = 0;
    TapSpec tap;      ///< module whose gradient RMS feeds the SFT band
    int basis_k = 3;  ///< subspace rank persisted for the tapped module
};

struct SftResult {
    std::vector<EvolutionVector> energy_vectors;  ///< one per LoRA tensor, id "L1.q.B"
    std::vector<EvolutionVector> mean_vectors;    ///< id "L1.q.B:mean"
    std::vector<SubspaceBasis> bases;             ///< for the tapped module
    std::map<std::string, DenseMatrix> evolution;
    std::vector<double> grad_rms_trace;
    std::vector<double> loss_trace;
    std::vector<double> pretrain_loss_trace;
};

/// One masked training example: blocks before `block` visible, the block
/// partially masked, later blocks absent.
struct TrainingExample {
    std::vector<int> tokens;
    std::vector<std::pair<int, int>> targets;  ///< (position, token)
};

TrainingExample make_training_example(const TaskSample& s, const ModelConfig& cfg, int block, double mask_rate,
                                      std::uint64_t rng_seed);

/// Full-parameter AdamW on the task; LoRA stays at identity.
std::vector<double> pretrain(ToyModel& model, const SyntheticTask& task, const TrainConfig& cfg);

/// LoRA-only AdamW with capture of U = M/(sqrt(V)+eps) for every LoRA tensor.
SftResult sft_train(ToyModel& model, const SyntheticTask& task, const TrainConfig& cfg);

/// Batch loss and gradients (scope selects which tensors receive them).
double batch_gradients(const ToyModel& model, const std::vector<TrainingExample>& batch, ModelParams& grads,
                       GradScope scope);

// ---- denoising --------------------------------------------------------------

enum class StopPolicy { fixed_steps, edit, edit_freeze };
const char* to_string(StopPolicy p) noexcept;
StopPolicy parse_policy(const std::string& name);

struct GenerateOptions {
    StopPolicy policy = StopPolicy::fixed_steps;
    int steps_per_block = 32;
    StopConfig stop;
    SimilarityMode mode;
    TapSpec tap;
    std::optional<ReasoningMap> map;
    FreezeConfig freeze;
    std::optional<SubspaceBasis> freeze_basis;
    std::optional<double> alpha_hat;
    std::optional<CouplingEstimate> coupling;  ///< pooled beta for freeze safety
    bool strict_certificates = false;
    bool keep_steps = true;
};

struct StepRecord {
    int step = 0;
    std::vector<int> input;    ///< full sequence fed to the forward pass
    std::vector<int> visible;  ///< block-local visible positions after this step's commit
    std::vector<int> block_tokens;
    Mat block_logits;  ///< L x V
    ActivationFrame frame;
};

struct FreezeEvent {
    int step = 0;
    int token = 0;
    double epsilon = 0.0;
    ComponentCertificate component;
    double global_margin = 0.0;
    std::optional<FreezeSafetyReport> safety;
};

struct DenoiseTrajectory {
    int block_index = 0;
    int steps_used = 0;
    bool final_pass = false;
    std::vector<int> final_block;
    std::vector<StepRecord> steps;
    StopDecision decision;
    StabilityState stability;
    std::vector<AlignmentDistribution> distributions;
    std::optional<Certificate> certificate;
    std::vector<FreezeEvent> freezes;
};

/// Runs one block on top of `context` (prompt plus committed blocks).
DenoiseTrajectory denoise_block(const ToyModel& model, const std::vector<int>& context, int block_index,
                                const GenerateOptions& opts);

struct GenerationResult {
    std::vector<int> output;
    std::vector<int> steps_per_block;
    std::vector<DenoiseTrajectory> blocks;
    double average_steps() const;
};

GenerationResult generate(const ToyModel& model, const std::vector<int>& prompt, int seq_len,
                          const GenerateOptions& opts);

/// Counterfactual next-step alignment distribution for coupling probes.
CouplingProbe make_model_probe(const ToyModel& model, const std::vector<int>& tokens, int block_offset,
                               const std::vector<int>& visible, const TapSpec& tap, const ReasoningMap& map,
                               const SimilarityMode& mode, double tau_blk);

/// One JSON line: id, prompt, target, output, steps_per_block.
void write_generation_jsonl(std::ostream& out, const TaskSample& s, const GenerationResult& g);

}  // namespace edit
