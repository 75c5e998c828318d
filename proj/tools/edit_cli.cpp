// Command-line front end: train, infer, calibrate, certify, ablate, report.

#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "edit/harness.hpp"

namespace {

struct Common {
    std::string config;
    std::string out;
    std::vector<std::uint64_t> seeds;
    std::string policy;
    bool strict = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "key = value experiment file");
    cmd->add_option("--out", c.out, "output directory (overrides out_dir)");
    cmd->add_option("--seed", c.seeds, "seed, repeatable (overrides seeds)");
    cmd->add_option("--policy", c.policy, "fixed | edit | edit-freeze")
        ->check(CLI::IsMember({"fixed", "edit", "edit-freeze"}));
    cmd->add_flag("--strict-certificates", c.strict, "ignore stops whose local certificate fails");
}

edit::ExperimentConfig resolve(const Common& c) {
    edit::ExperimentConfig cfg;
    if (!c.config.empty()) {
        cfg = edit::load_config(c.config);
    } else {
        std::istringstream empty;
        cfg = edit::parse_config(empty);
    }
    if (!c.out.empty()) cfg.out_dir = c.out;
    if (!c.seeds.empty()) cfg.seeds = c.seeds;
    if (!c.policy.empty()) cfg.gen.policy = edit::parse_policy(c.policy);
    if (c.strict) cfg.gen.strict_certificates = true;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EDIT early termination for block-diffusion sampling on a toy model"};
    app.require_subcommand(1);

    Common common;
    auto* train = app.add_subcommand("train", "pretrain, LoRA fine-tune, persist metadata");
    auto* infer = app.add_subcommand("infer", "generate on the test split under a stop policy");
    auto* calibrate = app.add_subcommand("calibrate", "estimate alpha and pick (delta, omega)");
    auto* certify = app.add_subcommand("certify", "re-evaluate certificates of recorded stops");
    auto* ablate = app.add_subcommand("ablate", "module x side x reduction divergence table");
    auto* report = app.add_subcommand("report", "merge run reports");
    for (auto* cmd : {train, infer, calibrate, certify, ablate}) add_common(cmd, common);

    int ablate_instances = 20;
    ablate->add_option("--instances", ablate_instances, "test instances per cell")->check(CLI::PositiveNumber);
    std::vector<std::string> run_dirs;
    std::string report_out = "report_out";
    report->add_option("runs", run_dirs, "run directories")->required();
    report->add_option("--out", report_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (report->parsed()) {
            std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
            edit::cmd_report(dirs, report_out);
            std::cout << "wrote " << report_out << "/summary.json\n";
            return 0;
        }
        const edit::ExperimentConfig cfg = resolve(common);
        if (train->parsed()) {
            edit::cmd_train(cfg);
            std::cout << "trained " << cfg.seeds.size() << " seed(s) into " << cfg.out_dir.string() << '\n';
        } else if (infer->parsed()) {
            const edit::RunReport r = edit::cmd_infer(cfg);
            std::printf("%s: accuracy %.4f (fixed %.4f), steps/block %.3f (fixed %.3f), reduction %.2f%%\n",
                        r.policy.c_str(), r.mean_accuracy, r.mean_baseline_accuracy, r.mean_avg_steps,
                        r.seeds.empty() ? 0.0 : r.seeds.front().baseline_steps, r.mean_reduction_pct);
        } else if (calibrate->parsed()) {
            try {
                const edit::CalibrateOutcome c = edit::cmd_calibrate(cfg);
                std::printf("alpha_hat %.6g, chosen delta %.6g omega %d%s\n", c.alpha_hat, c.chosen.delta,
                            c.chosen.omega, c.fallback ? " (fallback)" : "");
                if (!c.note.empty()) std::cout << "note: " << c.note << '\n';
            } catch (const edit::Error& e) {
                if (e.code() != edit::ErrorCode::NoAdmissiblePair) throw;
                std::cerr << "no admissible (delta, omega) pair: " << e.what()
                          << "\nfalling back to the configured thresholds; see calibration.json\n";
                return 4;
            }
        } else if (certify->parsed()) {
            const edit::CertifyOutcome c = edit::cmd_certify(cfg);
            std::printf("%zu certificates, certified stop fraction %.4f\n", c.certificates.size(),
                        c.certified_fraction);
        } else if (ablate->parsed()) {
            for (const edit::AblationCell& cell : edit::cmd_ablate(cfg, ablate_instances))
                std::printf("%s %s %-6s %.6g (%zu)\n", edit::to_string(cell.proj), edit::to_string(cell.side),
                            cell.reduction.c_str(), cell.mean_divergence, cell.samples);
        }
    } catch (const edit::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return edit::exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
