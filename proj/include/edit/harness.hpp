#pragma once

// Experiment orchestration behind the edit_cli subcommands.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "edit/diffusion.hpp"
#include "edit/pseudo_grad.hpp"

namespace edit {

struct ExperimentConfig {
    ModelConfig model;
    SyntheticTask task;
    TrainConfig train;
    GenerateOptions gen;       ///< policy, steps, stop config, tap, similarity mode
    FreezeConfig freeze;
    std::string reduction = "energy";  ///< energy | mean
    std::vector<std::uint64_t> seeds{0, 1, 2};
    double validation_fraction = 0.2;
    int dataset_size = 250;    ///< held-out pool split into validation and test
    int trace_instances = 20;  ///< full per-step traces kept for the first N
    double beta = 0.1;
    std::vector<double> delta_grid = default_delta_grid();
    std::vector<int> omega_grid = default_omega_grid();
    std::string calibrate_objective = "pac";  ///< pac | utility
    int probe_tokens = 8;
    double probe_magnitude = 1e-3;
    int probe_trials = 8;
    std::filesystem::path out_dir = "edit_out";

    void validate() const;
    int validation_count() const;
    int test_count() const;
};

/// key = value lines, '#' comments. Unknown keys are a ConfigError.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field with its effective value, in a fixed order.
std::string render_config(const ExperimentConfig& cfg);
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Held-out instance ids: validation first, then test.
std::uint64_t validation_instance(int i);
std::uint64_t test_instance(int i);

struct SeedArtifacts {
    std::filesystem::path dir;
    std::filesystem::path checkpoint, metadata, sft_rms;
};

SeedArtifacts seed_artifacts(const ExperimentConfig& cfg, std::uint64_t seed);

struct SeedReport {
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double baseline_accuracy = 0.0;
    double avg_steps = 0.0;
    double baseline_steps = 0.0;
    double reduction_pct = 0.0;
    std::optional<double> certified_fraction;
    int instances = 0;
    int freeze_events = 0;
    std::vector<std::string> trace_files;
};

struct RunReport {
    std::string policy;
    std::vector<SeedReport> seeds;
    double mean_accuracy = 0.0;
    double mean_baseline_accuracy = 0.0;
    double mean_avg_steps = 0.0;
    double mean_reduction_pct = 0.0;
};

nlohmann::json to_json(const RunReport& r);

/// Loads checkpoint + metadata and checks them against the config.
struct LoadedSeed {
    ToyModel model;
    MetadataBundle metadata;
    std::vector<double> sft_rms;
};
LoadedSeed load_seed(const ExperimentConfig& cfg, std::uint64_t seed);

/// Generation options for a seed: reasoning map and basis from its metadata.
GenerateOptions options_for(const ExperimentConfig& cfg, const LoadedSeed& s);

void cmd_train(const ExperimentConfig& cfg);
RunReport cmd_infer(const ExperimentConfig& cfg);

struct CalibrateOutcome {
    std::optional<CalibrationResult> pac;
    Thresholds chosen;
    bool fallback = false;
    double alpha_hat = 0.0;
    std::string note;
};
CalibrateOutcome cmd_calibrate(const ExperimentConfig& cfg);

struct CertifyOutcome {
    std::vector<Certificate> certificates;
    double certified_fraction = 0.0;
};
CertifyOutcome cmd_certify(const ExperimentConfig& cfg);

struct AblationCell {
    Projection proj;
    LoraSide side;
    std::string reduction;  ///< energy | mean
    double mean_divergence = 0.0;
    std::size_t samples = 0;
};
std::vector<AblationCell> cmd_ablate(const ExperimentConfig& cfg, int instances = 20);

/// Merges run reports found under the given directories.
void cmd_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir);

/// Process exit code for an error.
int exit_code_for(const Error& e);

}  // namespace edit
