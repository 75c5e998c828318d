#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "edit/harness.hpp"

using namespace edit;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(# tiny end-to-end run
vocab_size = 24
d_model = 16
n_heads = 2
d_ff = 24
lora_rank = 2
block_length = 4
max_positions = 24
seq_len = 8
alphabet = 6
pretrain_steps = 20
sft_steps = 10
batch_size = 2
steps_per_block = 8
omega = 2
seeds = 0
dataset_size = 12
trace_instances = 2
)";

ExperimentConfig tiny(const std::string& out) {
    std::istringstream in(kTiny);
    ExperimentConfig c = parse_config(in);
    c.out_dir = fs::temp_directory_path() / "edit_unit" / out;
    fs::remove_all(c.out_dir);
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

int code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return exit_code_for(e);
    }
    return 0;
}

}  // namespace

TEST_CASE("config parsing") {
    const ExperimentConfig c = tiny("parse");
    CHECK(c.model.d_model == 16);
    CHECK(c.gen.stop.omega == 2);
    CHECK(c.seeds == std::vector<std::uint64_t>{0});
    CHECK(c.validation_count() == 2);
    CHECK(c.test_count() == 10);

    // render -> parse is a fixed point
    std::istringstream again(render_config(c));
    const ExperimentConfig d = parse_config(again);
    CHECK(render_config(d) == render_config(c));

    ExperimentConfig e = c;
    apply_setting(e, "delta", "inf");
    CHECK(std::isinf(e.gen.stop.delta));
    apply_setting(e, "policy", "edit-freeze");
    CHECK(e.gen.policy == StopPolicy::edit_freeze);

    std::istringstream unknown("colour = blue\n");
    CHECK(code_of([&] { parse_config(unknown); }) == 2);
    std::istringstream bad_frac("validation_fraction = 1.5\n");
    CHECK(code_of([&] { parse_config(bad_frac); }) == 2);
    std::istringstream bad_num("omega = six\n");
    CHECK(code_of([&] { parse_config(bad_num); }) == 2);
    std::istringstream no_eq("omega 6\n");
    CHECK(code_of([&] { parse_config(no_eq); }) == 2);
    CHECK(validation_instance(0) != test_instance(0));
}

TEST_CASE("train, infer, certify, ablate, report on a tiny model") {
    ExperimentConfig c = tiny("run");
    cmd_train(c);
    const SeedArtifacts art = seed_artifacts(c, 0);
    CHECK(fs::exists(art.checkpoint));
    CHECK(fs::exists(c.out_dir / "config.resolved"));
    const MetadataBundle meta = load_metadata(art.metadata);
    CHECK(meta.vectors.size() == 24);  // energy and mean for 2 layers x 3 projections x 2 sides
    CHECK(meta.bases.size() == 1);

    // same seed -> byte-identical artifacts
    ExperimentConfig c2 = tiny("run2");
    cmd_train(c2);
    CHECK(slurp(art.metadata) == slurp(seed_artifacts(c2, 0).metadata));
    CHECK(slurp(art.checkpoint) == slurp(seed_artifacts(c2, 0).checkpoint));

    c.gen.policy = StopPolicy::fixed_steps;
    const RunReport fixed = cmd_infer(c);
    CHECK(fixed.mean_reduction_pct == 0.0);
    CHECK(fixed.seeds[0].instances == 10);

    c.gen.policy = StopPolicy::edit;
    c.gen.stop.delta = StopConfig::always_stable();
    const RunReport fast = cmd_infer(c);
    CHECK(fast.mean_avg_steps == 3.0);
    CHECK(fast.mean_reduction_pct == doctest::Approx(100.0 * (1.0 - 3.0 / 8.0)));
    CHECK(fs::exists(art.dir / "infer_edit" / "stops.jsonl"));
    CHECK(fs::exists(art.dir / "infer_edit" / "traces" / "inst0_block0.csv"));
    CHECK(fs::exists(art.dir / "infer_edit" / "pseudo_grad.csv"));
    const std::string first = slurp(c.out_dir / "report_edit.json");
    cmd_infer(c);
    CHECK(slurp(c.out_dir / "report_edit.json") == first);

    const CertifyOutcome cert = cmd_certify(c);
    CHECK(cert.certificates.size() == 20);

    const std::vector<AblationCell> cells = cmd_ablate(c, 2);
    CHECK(cells.size() == 12);
    for (const AblationCell& cell : cells) CHECK(cell.samples > 0);

    cmd_report({c.out_dir}, c.out_dir / "merged");
    CHECK(fs::exists(c.out_dir / "merged" / "summary.csv"));
    CHECK(fs::exists(c.out_dir / "merged" / "plot_data.json"));
}

TEST_CASE("artifact problems map to exit code 3") {
    ExperimentConfig c = tiny("missing");
    CHECK(code_of([&] { cmd_infer(c); }) == 3);

    ExperimentConfig trained = tiny("mismatch");
    cmd_train(trained);
    ExperimentConfig wider = trained;
    wider.model.d_model = 32;
    CHECK(code_of([&] { cmd_infer(wider); }) == 3);
    ExperimentConfig other_tap = trained;
    other_tap.gen.tap.layer = 0;  // no metadata entry for L0 bases
    other_tap.gen.policy = StopPolicy::edit_freeze;
    CHECK(code_of([&] { cmd_infer(other_tap); }) == 3);
}
