#include "edit/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "edit/format.hpp"

namespace edit {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- configuration ----------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double to_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail(ErrorCode::ConfigError, key + ": expected a number, got '" + v + "'");
    }
}

int to_int(const std::string& key, const std::string& v) {
    const double x = to_real(key, v);
    if (x != std::floor(x) || std::abs(x) > 1e9) fail(ErrorCode::ConfigError, key + ": expected an integer");
    return static_cast<int>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(ErrorCode::ConfigError, key + ": expected true/false");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

Projection parse_proj(const std::string& v) {
    if (v == "q") return Projection::q;
    if (v == "k") return Projection::k;
    if (v == "v") return Projection::v;
    fail(ErrorCode::ConfigError, "tap_proj must be q, k or v");
}

SimilarityVariant parse_similarity(const std::string& v) {
    if (v == "vector_cosine" || v == "vector") return SimilarityVariant::vector_cosine;
    if (v == "subspace_norm") return SimilarityVariant::subspace_norm;
    if (v == "subspace_cosine") return SimilarityVariant::subspace_cosine;
    fail(ErrorCode::ConfigError, "unknown similarity '" + v + "'");
}

const char* similarity_name(SimilarityVariant v) {
    switch (v) {
        case SimilarityVariant::vector_cosine: return "vector_cosine";
        case SimilarityVariant::subspace_norm: return "subspace_norm";
        case SimilarityVariant::subspace_cosine: return "subspace_cosine";
    }
    return "?";
}

// shortest text that reads back to the same double
std::string real(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace

void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& v) {
    ModelConfig& m = c.model;
    if (key == "vocab_size") m.vocab_size = to_int(key, v);
    else if (key == "d_model") m.d_model = to_int(key, v);
    else if (key == "n_heads") m.n_heads = to_int(key, v);
    else if (key == "n_layers") m.n_layers = to_int(key, v);
    else if (key == "d_ff") m.d_ff = to_int(key, v);
    else if (key == "lora_rank") m.lora_rank = to_int(key, v);
    else if (key == "lora_scale") m.lora_scale = to_real(key, v);
    else if (key == "block_length") m.block_length = to_int(key, v);
    else if (key == "max_blocks") m.max_blocks = to_int(key, v);
    else if (key == "max_positions") m.max_positions = to_int(key, v);
    else if (key == "task") c.task.kind = parse_task(v);
    else if (key == "seq_len") c.task.seq_len = to_int(key, v);
    else if (key == "alphabet") c.task.alphabet = to_int(key, v);
    else if (key == "task_seed") c.task.seed = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "pretrain_steps") c.train.pretrain_steps = to_int(key, v);
    else if (key == "sft_steps") c.train.sft_steps = to_int(key, v);
    else if (key == "batch_size") c.train.batch_size = to_int(key, v);
    else if (key == "pretrain_lr") c.train.pretrain_lr = to_real(key, v);
    else if (key == "sft_lr") c.train.sft_opt.learning_rate = to_real(key, v);
    else if (key == "sft_weight_decay") c.train.sft_opt.weight_decay = to_real(key, v);
    else if (key == "basis_k") c.train.basis_k = to_int(key, v);
    else if (key == "policy") c.gen.policy = parse_policy(v);
    else if (key == "steps_per_block") c.gen.steps_per_block = to_int(key, v);
    else if (key == "delta") c.gen.stop.delta = to_real(key, v);
    else if (key == "omega") c.gen.stop.omega = to_int(key, v);
    else if (key == "tau_blk") c.gen.stop.tau_blk = to_real(key, v);
    else if (key == "first_block_delta") {
        Thresholds t = c.gen.stop.first_block_overrides.value_or(Thresholds{c.gen.stop.delta, c.gen.stop.omega});
        t.delta = to_real(key, v);
        c.gen.stop.first_block_overrides = t;
    } else if (key == "first_block_omega") {
        Thresholds t = c.gen.stop.first_block_overrides.value_or(Thresholds{c.gen.stop.delta, c.gen.stop.omega});
        t.omega = to_int(key, v);
        c.gen.stop.first_block_overrides = t;
    } else if (key == "similarity") c.gen.mode.variant = parse_similarity(v);
    else if (key == "similarity_k") c.gen.mode.basis_k = to_int(key, v);
    else if (key == "tap_layer") c.gen.tap.layer = to_int(key, v);
    else if (key == "tap_proj") c.gen.tap.proj = parse_proj(v);
    else if (key == "tap_side") {
        if (v != "A" && v != "B") fail(ErrorCode::ConfigError, "tap_side must be A or B");
        c.gen.tap.side = v == "A" ? LoraSide::a : LoraSide::b;
    } else if (key == "tap_kind") {
        if (v != "branch" && v != "full") fail(ErrorCode::ConfigError, "tap_kind must be branch or full");
        c.gen.tap.kind = v == "branch" ? TapKind::branch : TapKind::full;
    } else if (key == "reduction") {
        if (v != "energy" && v != "mean") fail(ErrorCode::ConfigError, "reduction must be energy or mean");
        c.reduction = v;
    } else if (key == "delta_tok") c.freeze.delta_tok = to_real(key, v);
    else if (key == "omega_tok") c.freeze.omega_tok = to_int(key, v);
    else if (key == "tau_sub") c.freeze.tau_sub = to_real(key, v);
    else if (key == "freeze_k") c.freeze.k = to_int(key, v);
    else if (key == "seeds") {
        c.seeds.clear();
        for (const std::string& s : split_list(v)) c.seeds.push_back(static_cast<std::uint64_t>(to_int(key, s)));
    } else if (key == "validation_fraction") c.validation_fraction = to_real(key, v);
    else if (key == "dataset_size") c.dataset_size = to_int(key, v);
    else if (key == "trace_instances") c.trace_instances = to_int(key, v);
    else if (key == "beta") c.beta = to_real(key, v);
    else if (key == "delta_grid") {
        c.delta_grid.clear();
        for (const std::string& s : split_list(v)) c.delta_grid.push_back(to_real(key, s));
    } else if (key == "omega_grid") {
        c.omega_grid.clear();
        for (const std::string& s : split_list(v)) c.omega_grid.push_back(to_int(key, s));
    } else if (key == "calibrate_objective") {
        if (v != "pac" && v != "utility") fail(ErrorCode::ConfigError, "calibrate_objective must be pac or utility");
        c.calibrate_objective = v;
    } else if (key == "probe_tokens") c.probe_tokens = to_int(key, v);
    else if (key == "probe_magnitude") c.probe_magnitude = to_real(key, v);
    else if (key == "probe_trials") c.probe_trials = to_int(key, v);
    else if (key == "strict_certificates") c.gen.strict_certificates = to_bool(key, v);
    else if (key == "out_dir") c.out_dir = v;
    else fail(ErrorCode::ConfigError, "unknown config key '" + key + "'");
}

void ExperimentConfig::validate() const {
    model.validate();
    task.validate(model);
    gen.stop.validate();
    gen.mode.validate();
    if (gen.policy == StopPolicy::edit_freeze) freeze.validate();
    if (gen.steps_per_block < 1) fail(ErrorCode::ConfigError, "steps_per_block must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        fail(ErrorCode::ConfigError, "validation_fraction must be in (0,1)");
    if (dataset_size < 2) fail(ErrorCode::ConfigError, "dataset_size must be >= 2");
    if (seeds.empty()) fail(ErrorCode::ConfigError, "at least one seed is required");
    if (!(beta > 0.0 && beta < 1.0)) fail(ErrorCode::ConfigError, "beta must be in (0,1)");
    if (train.batch_size < 1) fail(ErrorCode::ConfigError, "batch_size must be >= 1");
    if (train.sft_steps < 1) fail(ErrorCode::ConfigError, "sft_steps must be >= 1");
    if (delta_grid.empty() || omega_grid.empty()) fail(ErrorCode::ConfigError, "calibration grids must be nonempty");
    gen.tap.resolved_layer(model);
}

int ExperimentConfig::validation_count() const {
    return std::clamp(static_cast<int>(std::lround(validation_fraction * dataset_size)), 1, dataset_size - 1);
}

int ExperimentConfig::test_count() const { return dataset_size - validation_count(); }

ExperimentConfig parse_config(std::istream& in) {
    ExperimentConfig cfg;
    cfg.train.pretrain_steps = 500;
    cfg.train.sft_steps = 200;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            fail(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": expected key = value");
        apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.train.tap = cfg.gen.tap;
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorCode::ConfigError, "cannot open config " + path.string());
    return parse_config(f);
}

std::string render_config(const ExperimentConfig& c) {
    std::ostringstream o;
    auto kv = [&](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
    auto join = [](const auto& xs, auto fmt) {
        std::string s;
        for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt(xs[i]);
        return s;
    };
    const ModelConfig& m = c.model;
    kv("vocab_size", std::to_string(m.vocab_size));
    kv("d_model", std::to_string(m.d_model));
    kv("n_heads", std::to_string(m.n_heads));
    kv("n_layers", std::to_string(m.n_layers));
    kv("d_ff", std::to_string(m.d_ff));
    kv("lora_rank", std::to_string(m.lora_rank));
    kv("lora_scale", real(m.lora_scale));
    kv("block_length", std::to_string(m.block_length));
    kv("max_blocks", std::to_string(m.max_blocks));
    kv("max_positions", std::to_string(m.max_positions));
    kv("task", to_string(c.task.kind));
    kv("seq_len", std::to_string(c.task.seq_len));
    kv("alphabet", std::to_string(c.task.alphabet));
    kv("task_seed", std::to_string(c.task.seed));
    kv("pretrain_steps", std::to_string(c.train.pretrain_steps));
    kv("sft_steps", std::to_string(c.train.sft_steps));
    kv("batch_size", std::to_string(c.train.batch_size));
    kv("pretrain_lr", real(c.train.pretrain_lr));
    kv("sft_lr", real(c.train.sft_opt.learning_rate));
    kv("sft_weight_decay", real(c.train.sft_opt.weight_decay));
    kv("basis_k", std::to_string(c.train.basis_k));
    kv("policy", to_string(c.gen.policy));
    kv("steps_per_block", std::to_string(c.gen.steps_per_block));
    kv("delta", real(c.gen.stop.delta));
    kv("omega", std::to_string(c.gen.stop.omega));
    kv("tau_blk", real(c.gen.stop.tau_blk));
    if (c.gen.stop.first_block_overrides) {
        kv("first_block_delta", real(c.gen.stop.first_block_overrides->delta));
        kv("first_block_omega", std::to_string(c.gen.stop.first_block_overrides->omega));
    }
    kv("similarity", similarity_name(c.gen.mode.variant));
    if (c.gen.mode.basis_k) kv("similarity_k", std::to_string(*c.gen.mode.basis_k));
    kv("tap_layer", std::to_string(c.gen.tap.layer));
    kv("tap_proj", to_string(c.gen.tap.proj));
    kv("tap_side", to_string(c.gen.tap.side));
    kv("tap_kind", c.gen.tap.kind == TapKind::branch ? "branch" : "full");
    kv("reduction", c.reduction);
    kv("delta_tok", real(c.freeze.delta_tok));
    kv("omega_tok", std::to_string(c.freeze.omega_tok));
    kv("tau_sub", real(c.freeze.tau_sub));
    kv("freeze_k", std::to_string(c.freeze.k));
    kv("seeds", join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }));
    kv("validation_fraction", real(c.validation_fraction));
    kv("dataset_size", std::to_string(c.dataset_size));
    kv("trace_instances", std::to_string(c.trace_instances));
    kv("beta", real(c.beta));
    kv("delta_grid", join(c.delta_grid, [](double d) { return real(d); }));
    kv("omega_grid", join(c.omega_grid, [](int w) { return std::to_string(w); }));
    kv("calibrate_objective", c.calibrate_objective);
    kv("probe_tokens", std::to_string(c.probe_tokens));
    kv("probe_magnitude", real(c.probe_magnitude));
    kv("probe_trials", std::to_string(c.probe_trials));
    kv("strict_certificates", c.gen.strict_certificates ? "true" : "false");
    kv("out_dir", c.out_dir.string());
    return o.str();
}

std::uint64_t validation_instance(int i) { return (1ULL << 40) + static_cast<std::uint64_t>(i); }
std::uint64_t test_instance(int i) { return (1ULL << 41) + static_cast<std::uint64_t>(i); }

// ---- artifacts ----------------------------------------------------------------

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    f << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::ArtifactMismatch, "missing artifact " + path.string());
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

std::string series_csv(const char* header, const std::vector<double>& xs) {
    std::ostringstream o;
    o << "step," << header << '\n';
    for (std::size_t i = 0; i < xs.size(); ++i) o << i + 1 << ',' << format_real(xs[i]) << '\n';
    return o.str();
}

std::vector<double> read_series(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    std::getline(in, line);
    std::vector<double> out;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        out.push_back(std::stod(line.substr(comma + 1)));
    }
    return out;
}

ModelConfig seeded_model(const ExperimentConfig& cfg, std::uint64_t seed) {
    ModelConfig m = cfg.model;
    m.seed = seed;
    return m;
}

std::string j12(double v) { return format_real(v, 12); }

}  // namespace

SeedArtifacts seed_artifacts(const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedArtifacts a;
    a.dir = cfg.out_dir / ("seed_" + std::to_string(seed));
    a.checkpoint = a.dir / "model.ckpt";
    a.metadata = a.dir / "metadata.editmeta";
    a.sft_rms = a.dir / "sft_rms.csv";
    return a;
}

void cmd_train(const ExperimentConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    write_text(cfg.out_dir / "config.resolved", render_config(cfg));
    for (std::uint64_t seed : cfg.seeds) {
        const SeedArtifacts art = seed_artifacts(cfg, seed);
        fs::create_directories(art.dir);
        ToyModel model(seeded_model(cfg, seed));
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        tc.tap = cfg.gen.tap;
        const std::vector<double> pre = pretrain(model, cfg.task, tc);
        const std::uint32_t before = model.base_checksum();
        SftResult sft = sft_train(model, cfg.task, tc);
        if (model.base_checksum() != before) fail(ErrorCode::TrainingDiverged, "base parameters changed during SFT");

        std::vector<EvolutionVector> vectors = sft.energy_vectors;
        vectors.insert(vectors.end(), sft.mean_vectors.begin(), sft.mean_vectors.end());
        persist_metadata(vectors, sft.bases, art.metadata);
        model.save(art.checkpoint);
        write_text(art.sft_rms, series_csv("rms", sft.grad_rms_trace));
        write_text(art.dir / "sft_loss.csv", series_csv("loss", sft.loss_trace));
        write_text(art.dir / "pretrain_loss.csv", series_csv("loss", pre));
        const SftBand band = sft_band(sft.grad_rms_trace);
        json b;
        b["mu_sft"] = j12(band.mu_sft);
        b["sigma_sft"] = j12(band.sigma_sft);
        b["n_steps"] = band.n_steps;
        write_text(art.dir / "sft_band.json", b.dump(2) + "\n");
    }
}

LoadedSeed load_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    const SeedArtifacts art = seed_artifacts(cfg, seed);
    if (!fs::exists(art.checkpoint)) fail(ErrorCode::ArtifactMismatch, "missing checkpoint " + art.checkpoint.string());
    ToyModel model = ToyModel::load(art.checkpoint);
    if (!(model.config() == seeded_model(cfg, seed)))
        fail(ErrorCode::ArtifactMismatch, "checkpoint architecture differs from the config");
    MetadataBundle meta = load_metadata(art.metadata);
    std::vector<double> rms_trace = read_series(art.sft_rms);
    return {std::move(model), std::move(meta), std::move(rms_trace)};
}

GenerateOptions options_for(const ExperimentConfig& cfg, const LoadedSeed& s) {
    GenerateOptions o = cfg.gen;
    o.freeze = cfg.freeze;
    const ModelConfig& mc = s.model.config();
    const std::string id = o.tap.module_id(mc);
    const auto width = static_cast<std::uint32_t>(o.tap.width(mc));
    if (o.mode.variant == SimilarityVariant::vector_cosine) {
        const EvolutionVector* v = s.metadata.find_vector(cfg.reduction == "mean" ? id + ":mean" : id);
        if (!v) fail(ErrorCode::ArtifactMismatch, "metadata has no vector for " + id);
        if (v->d_out != width)
            fail(ErrorCode::DimMismatch, "metadata d_out " + std::to_string(v->d_out) + " vs tap width " +
                                             std::to_string(width));
        o.map = *v;
    } else {
        const SubspaceBasis* b = s.metadata.find_basis(id);
        if (!b) fail(ErrorCode::ArtifactMismatch, "metadata has no basis for " + id);
        if (b->columns.rows() != width) fail(ErrorCode::DimMismatch, "basis rows differ from tap width");
        o.map = *b;
    }
    if (const SubspaceBasis* b = s.metadata.find_basis(id)) {
        if (b->columns.rows() == width) o.freeze_basis = *b;
    }
    if (o.policy == StopPolicy::edit_freeze && !o.freeze_basis)
        fail(ErrorCode::ArtifactMismatch, "edit-freeze needs a persisted basis for " + id);
    if (o.policy == StopPolicy::edit_freeze && static_cast<int>(o.freeze_basis->k) < o.freeze.k)
        fail(ErrorCode::ConfigError, "freeze_k exceeds the persisted basis rank");
    return o;
}

// ---- infer ------------------------------------------------------------------

namespace {

std::optional<double> stored_alpha(const ExperimentConfig& cfg) {
    const fs::path p = cfg.out_dir / "calibration.json";
    if (!fs::exists(p)) return std::nullopt;
    const json j = json::parse(read_text(p));
    return std::stod(j.at("alpha_hat").get<std::string>());
}

json prob_json(const ProbVector& p) {
    json j;
    j["support"] = p.support;
    std::vector<std::string> probs;
    for (double x : p.probs) probs.push_back(format_real(x, 17));
    j["probs"] = probs;
    return j;
}

ProbVector prob_from_json(const json& j) {
    ProbVector p;
    p.support = j.at("support").get<std::vector<int>>();
    for (const auto& s : j.at("probs")) p.probs.push_back(std::stod(s.get<std::string>()));
    return p;
}

CouplingEstimate pooled_probe(const ExperimentConfig& cfg, const LoadedSeed& s, const GenerateOptions& opts) {
    const TaskSample v = cfg.task.sample(validation_instance(0));
    GenerateOptions fixed = opts;
    fixed.policy = StopPolicy::fixed_steps;
    fixed.keep_steps = true;
    const DenoiseTrajectory traj = denoise_block(s.model, v.prompt, 0, fixed);
    const StepRecord& last = traj.steps.back();
    const int offset = static_cast<int>(v.prompt.size());
    const CouplingProbe probe = make_model_probe(s.model, last.input, offset, last.visible, opts.tap, *opts.map,
                                                 opts.mode, opts.stop.tau_blk);
    std::vector<CouplingEstimate> est;
    for (int i = 0; i < cfg.probe_tokens && i < static_cast<int>(last.visible.size()); ++i)
        est.push_back(probe_coupling(probe, last.visible[i], cfg.probe_magnitude, cfg.probe_trials,
                                     static_cast<unsigned>(i)));
    return pooled_coupling(est);
}

}  // namespace

json to_json(const RunReport& r) {
    json j;
    j["policy"] = r.policy;
    j["mean_accuracy"] = j12(r.mean_accuracy);
    j["mean_baseline_accuracy"] = j12(r.mean_baseline_accuracy);
    j["mean_avg_steps"] = j12(r.mean_avg_steps);
    j["mean_reduction_pct"] = j12(r.mean_reduction_pct);
    json seeds = json::array();
    for (const SeedReport& s : r.seeds) {
        json e;
        e["seed"] = s.seed;
        e["accuracy"] = j12(s.accuracy);
        e["baseline_accuracy"] = j12(s.baseline_accuracy);
        e["avg_steps"] = j12(s.avg_steps);
        e["baseline_steps"] = j12(s.baseline_steps);
        e["reduction_pct"] = j12(s.reduction_pct);
        e["certified_fraction"] = s.certified_fraction ? json(j12(*s.certified_fraction)) : json(nullptr);
        e["instances"] = s.instances;
        e["freeze_events"] = s.freeze_events;
        e["trace_files"] = s.trace_files;
        seeds.push_back(e);
    }
    j["seeds"] = seeds;
    return j;
}

RunReport cmd_infer(const ExperimentConfig& cfg) {
    cfg.validate();
    RunReport report;
    report.policy = to_string(cfg.gen.policy);
    const std::optional<double> alpha = stored_alpha(cfg);
    for (std::uint64_t seed : cfg.seeds) {
        const LoadedSeed s = load_seed(cfg, seed);
        GenerateOptions opts = options_for(cfg, s);
        opts.alpha_hat = alpha;
        if (opts.policy == StopPolicy::edit_freeze && alpha) opts.coupling = pooled_probe(cfg, s, opts);
        GenerateOptions base = opts;
        base.policy = StopPolicy::fixed_steps;
        base.keep_steps = false;

        const fs::path dir = seed_artifacts(cfg, seed).dir / ("infer_" + report.policy);
        fs::create_directories(dir / "traces");
        SeedReport sr;
        sr.seed = seed;
        std::ostringstream gens, stops, freezes;
        freezes << "instance,block,step,token,epsilon,component_pass,global_margin,safe\n";
        std::vector<Certificate> certs;
        double steps_sum = 0.0, base_steps_sum = 0.0;
        int correct = 0, base_correct = 0;
        const SftBand band = sft_band(s.sft_rms);
        const int n = cfg.test_count();
        for (int i = 0; i < n; ++i) {
            const TaskSample sample = cfg.task.sample(test_instance(i));
            const bool traced = i < cfg.trace_instances;
            opts.keep_steps = traced && i == 0;
            const GenerationResult g = generate(s.model, sample.prompt, cfg.task.seq_len, opts);
            const GenerationResult b = opts.policy == StopPolicy::fixed_steps
                                           ? g
                                           : generate(s.model, sample.prompt, cfg.task.seq_len, base);
            correct += g.output == sample.target;
            base_correct += b.output == sample.target;
            steps_sum += g.average_steps();
            base_steps_sum += b.average_steps();
            write_generation_jsonl(gens, sample, g);
            for (const DenoiseTrajectory& t : g.blocks) {
                if (traced && opts.policy != StopPolicy::fixed_steps) {
                    const std::string name = "traces/inst" + std::to_string(i) + "_block" +
                                             std::to_string(t.block_index) + ".csv";
                    std::ostringstream csv;
                    write_trace_csv(csv, t.stability);
                    write_text(dir / name, csv.str());
                    sr.trace_files.push_back(name);
                }
                if (t.certificate) {
                    certs.push_back(*t.certificate);
                    const auto& hist = t.distributions;
                    const MatchedSupport ms = matched_renormalize(hist[t.steps_used - 1], hist[t.steps_used - 2]);
                    json st;
                    st["instance"] = i;
                    st["block"] = t.block_index;
                    st["stop_step"] = t.steps_used;
                    st["delta"] = format_real(t.certificate->delta, 17);
                    st["omega"] = t.certificate->omega;
                    st["p_tilde"] = prob_json(ms.p_tilde);
                    stops << st.dump() << '\n';
                }
                for (const FreezeEvent& ev : t.freezes) {
                    ++sr.freeze_events;
                    freezes << i << ',' << t.block_index << ',' << ev.step << ',' << ev.token << ','
                            << format_real(ev.epsilon) << ',' << (ev.component.pass ? 1 : 0) << ','
                            << format_real(ev.global_margin) << ','
                            << (ev.safety ? (ev.safety->safe ? "1" : "0") : "") << '\n';
                }
            }
            if (i == 0 && !g.blocks.empty() && g.blocks[0].steps.size() >= 2) {
                PseudoGradOptions po;
                po.module = opts.tap;
                const PseudoGradTrace pg = analyze_trajectory(s.model, g.blocks[0], band, po);
                std::ostringstream csv;
                write_pseudo_grad_csv(csv, pg);
                write_text(dir / "pseudo_grad.csv", csv.str());
            }
        }
        sr.instances = n;
        sr.accuracy = static_cast<double>(correct) / n;
        sr.baseline_accuracy = static_cast<double>(base_correct) / n;
        sr.avg_steps = steps_sum / n;
        sr.baseline_steps = base_steps_sum / n;
        sr.reduction_pct = 100.0 * (1.0 - sr.avg_steps / sr.baseline_steps);
        if (!certs.empty() && alpha) sr.certified_fraction = certified_stop_fraction(certs);
        write_text(dir / "generations.jsonl", gens.str());
        write_text(dir / "stops.jsonl", stops.str());
        if (opts.policy == StopPolicy::edit_freeze) write_text(dir / "freeze_events.csv", freezes.str());
        report.seeds.push_back(sr);
    }
    const double k = static_cast<double>(report.seeds.size());
    for (const SeedReport& sr : report.seeds) {
        report.mean_accuracy += sr.accuracy / k;
        report.mean_baseline_accuracy += sr.baseline_accuracy / k;
        report.mean_avg_steps += sr.avg_steps / k;
        report.mean_reduction_pct += sr.reduction_pct / k;
    }
    write_text(cfg.out_dir / ("report_" + report.policy + ".json"), to_json(report).dump(2) + "\n");
    return report;
}

// ---- calibrate ----------------------------------------------------------------

namespace {

struct PairRun {
    std::vector<double> margins;
    double avg_steps = 0.0;
    double accuracy = 0.0;
};

PairRun run_pair(const ExperimentConfig& cfg, const LoadedSeed& s, GenerateOptions opts, Thresholds th) {
    opts.policy = StopPolicy::edit;
    opts.stop.delta = th.delta;
    opts.stop.omega = th.omega;
    opts.stop.first_block_overrides.reset();
    opts.keep_steps = false;
    PairRun r;
    const int n = cfg.validation_count();
    for (int i = 0; i < n; ++i) {
        const TaskSample v = cfg.task.sample(validation_instance(i));
        const GenerationResult g = generate(s.model, v.prompt, cfg.task.seq_len, opts);
        r.accuracy += (g.output == v.target) / static_cast<double>(n);
        r.avg_steps += g.average_steps() / n;
        for (const DenoiseTrajectory& t : g.blocks)
            if (t.certificate) r.margins.push_back(t.certificate->margin_report.margin);
    }
    return r;
}

}  // namespace

CalibrateOutcome cmd_calibrate(const ExperimentConfig& cfg) {
    cfg.validate();
    const LoadedSeed s = load_seed(cfg, cfg.seeds.front());
    GenerateOptions opts = options_for(cfg, s);
    CalibrateOutcome out;

    // contraction from the post-unmasking part of full-length runs
    GenerateOptions full = opts;
    full.policy = StopPolicy::edit;
    full.stop.delta = StopConfig::never_stable();
    full.stop.first_block_overrides.reset();
    full.keep_steps = false;
    std::vector<std::vector<ProbVector>> traces;
    bool all_static = true;
    for (int i = 0; i < cfg.validation_count(); ++i) {
        const TaskSample v = cfg.task.sample(validation_instance(i));
        const GenerationResult g = generate(s.model, v.prompt, cfg.task.seq_len, full);
        for (const DenoiseTrajectory& t : g.blocks) {
            std::vector<ProbVector> post;
            for (const AlignmentDistribution& d : t.distributions)
                if (static_cast<int>(d.dist.size()) == cfg.model.block_length) post.push_back(d.dist);
            if (post.size() < 3) continue;
            for (std::size_t r = 1; r < post.size(); ++r)
                if (total_variation(post[r], post[r - 1]) != 0.0) all_static = false;
            traces.push_back(std::move(post));
        }
    }
    try {
        if (traces.empty()) fail(ErrorCode::NoValidSamples, "no post-unmasking traces of length >= 3");
        out.alpha_hat = estimate_contraction(traces).alpha_hat;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::NoValidSamples || !all_static || traces.empty()) throw;
        out.alpha_hat = 0.0;
        out.note = "post-unmasking distributions are stationary; alpha_hat = 0";
    }

    std::map<std::pair<double, int>, PairRun> runs;
    auto run_for = [&](Thresholds th) -> const PairRun& {
        auto key = std::make_pair(th.delta, th.omega);
        auto it = runs.find(key);
        if (it == runs.end()) it = runs.emplace(key, run_pair(cfg, s, opts, th)).first;
        return it->second;
    };

    json j;
    j["alpha_hat"] = format_real(out.alpha_hat, 17);
    j["note"] = out.note;
    j["objective"] = cfg.calibrate_objective;
    std::optional<Error> pac_error;
    if (out.alpha_hat < 1.0) {
        try {
            out.pac = calibrate_pac(
                [&](Thresholds th) {
                    const PairRun& r = run_for(th);
                    return r.margins.empty() ? std::vector<double>{0.0} : r.margins;
                },
                cfg.beta, out.alpha_hat, cfg.delta_grid, cfg.omega_grid,
                [&](Thresholds th) { return run_for(th).avg_steps; });
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NoAdmissiblePair) throw;
            pac_error = e;
        }
    } else {
        out.note += (out.note.empty() ? "" : "; ") + std::string("alpha_hat >= 1, PAC calibration skipped");
        pac_error = Error(ErrorCode::NoAdmissiblePair, "alpha_hat is not contractive");
    }
    j["pac"] = out.pac ? to_json(*out.pac) : json(nullptr);

    if (cfg.calibrate_objective == "utility") {
        json table = json::array();
        double best = -1.0;
        for (double d : cfg.delta_grid) {
            for (int w : cfg.omega_grid) {
                const PairRun& r = run_for({d, w});
                const double u = r.avg_steps > 0 ? r.accuracy / r.avg_steps : 0.0;
                table.push_back({{"delta", j12(d)}, {"omega", w}, {"accuracy", j12(r.accuracy)},
                                 {"avg_steps", j12(r.avg_steps)}, {"utility", j12(u)}});
                const bool better = u > best || (u == best && (d > out.chosen.delta ||
                                                               (d == out.chosen.delta && w < out.chosen.omega)));
                if (better) {
                    best = u;
                    out.chosen = {d, w};
                }
            }
        }
        j["utility"] = table;
    } else if (out.pac) {
        out.chosen = out.pac->chosen;
    } else {
        out.fallback = true;
        out.chosen = {cfg.gen.stop.delta, cfg.gen.stop.omega};
    }
    j["fallback"] = out.fallback;
    j["chosen_delta"] = j12(out.chosen.delta);
    j["chosen_omega"] = out.chosen.omega;
    if (pac_error) j["pac_error"] = pac_error->what();
    write_text(cfg.out_dir / "calibration.json", j.dump(2) + "\n");
    if (pac_error && cfg.calibrate_objective == "pac") throw *pac_error;
    return out;
}

// ---- certify ------------------------------------------------------------------

CertifyOutcome cmd_certify(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::optional<double> alpha = stored_alpha(cfg);
    CertifyOutcome out;
    json list = json::array();
    for (std::uint64_t seed : cfg.seeds) {
        const LoadedSeed s = load_seed(cfg, seed);
        (void)options_for(cfg, s);  // dimension check against the metadata
        const fs::path stops = seed_artifacts(cfg, seed).dir / ("infer_" + std::string(to_string(cfg.gen.policy))) /
                               "stops.jsonl";
        std::istringstream in(read_text(stops));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json st = json::parse(line);
            const Thresholds th{std::stod(st.at("delta").get<std::string>()), st.at("omega").get<int>()};
            Certificate c = certify_stop(st.at("stop_step").get<int>(), th, prob_from_json(st.at("p_tilde")), alpha);
            json cj = to_json(c);
            cj["seed"] = seed;
            cj["instance"] = st.at("instance");
            cj["block"] = st.at("block");
            list.push_back(cj);
            out.certificates.push_back(c);
        }
    }
    json j;
    j["alpha_hat"] = alpha ? json(format_real(*alpha, 17)) : json(nullptr);
    j["certificates"] = list;
    if (!out.certificates.empty()) {
        std::size_t local = 0;
        for (const Certificate& c : out.certificates) local += c.local_pass;
        out.certified_fraction = certified_stop_fraction(out.certificates);
        j["certified_stop_fraction"] = j12(out.certified_fraction);
        j["local_pass_fraction"] = j12(static_cast<double>(local) / out.certificates.size());
    } else {
        j["certified_stop_fraction"] = nullptr;
        j["local_pass_fraction"] = nullptr;
    }
    write_text(cfg.out_dir / "certificates.json", j.dump(2) + "\n");
    return out;
}

// ---- ablate -------------------------------------------------------------------

std::vector<AblationCell> cmd_ablate(const ExperimentConfig& cfg, int instances) {
    cfg.validate();
    const LoadedSeed s = load_seed(cfg, cfg.seeds.front());
    const ModelConfig& mc = s.model.config();
    struct Cell {
        AblationCell out;
        TapSpec tap;
        EvolutionVector map;
        std::vector<double> divergences;
    };
    std::vector<Cell> cells;
    for (Projection p : {Projection::q, Projection::k, Projection::v}) {
        for (LoraSide side : {LoraSide::a, LoraSide::b}) {
            for (const char* red : {"energy", "mean"}) {
                Cell c;
                c.tap = TapSpec{-1, p, side, TapKind::branch};
                const std::string id = c.tap.module_id(mc) + (std::string(red) == "mean" ? ":mean" : "");
                const EvolutionVector* v = s.metadata.find_vector(id);
                if (!v) fail(ErrorCode::ArtifactMismatch, "metadata has no vector " + id);
                c.map = *v;
                c.out.proj = p;
                c.out.side = side;
                c.out.reduction = red;
                cells.push_back(std::move(c));
            }
        }
    }
    GenerateOptions fixed = cfg.gen;
    fixed.policy = StopPolicy::fixed_steps;
    fixed.keep_steps = true;
    StopConfig never = cfg.gen.stop;
    never.delta = StopConfig::never_stable();
    never.first_block_overrides.reset();
    for (int i = 0; i < instances; ++i) {
        const TaskSample sample = cfg.task.sample(test_instance(i));
        const GenerationResult g = generate(s.model, sample.prompt, cfg.task.seq_len, fixed);
        for (const DenoiseTrajectory& t : g.blocks) {
            const int offset = static_cast<int>(t.steps.front().input.size()) - mc.block_length;
            std::vector<StabilityMonitor> monitors;
            for (const Cell& c : cells)
                monitors.emplace_back(c.map, SimilarityMode::vector(), never, t.block_index, fixed.steps_per_block);
            ForwardResult fr;
            const std::vector<int>* last_input = nullptr;
            for (const StepRecord& rec : t.steps) {
                if (!last_input || *last_input != rec.input) fr = s.model.forward(rec.input, false);
                last_input = &rec.input;
                std::vector<int> positions;
                for (int v : rec.visible) positions.push_back(offset + v);
                for (std::size_t c = 0; c < cells.size(); ++c) {
                    ActivationFrame frame{rec.step, VisibleSet{rec.visible}, s.model.tap(fr, cells[c].tap, positions)};
                    monitors[c].observe(frame);
                }
            }
            for (std::size_t c = 0; c < cells.size(); ++c)
                for (const TraceRow& row : monitors[c].state().divergence_trace)
                    cells[c].divergences.push_back(row.divergence);
        }
    }
    std::vector<AblationCell> out;
    std::ostringstream csv;
    csv << "module,side,reduction,mean_divergence,samples\n";
    for (Cell& c : cells) {
        c.out.samples = c.divergences.size();
        c.out.mean_divergence =
            c.divergences.empty() ? 0.0 : pairwise_sum(c.divergences) / static_cast<double>(c.divergences.size());
        csv << to_string(c.out.proj) << ',' << to_string(c.out.side) << ',' << c.out.reduction << ','
            << format_real(c.out.mean_divergence) << ',' << c.out.samples << '\n';
        out.push_back(c.out);
    }
    write_text(cfg.out_dir / "ablation.csv", csv.str());
    return out;
}

// ---- report -------------------------------------------------------------------

void cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
    if (run_dirs.empty()) fail(ErrorCode::ConfigError, "report needs at least one run directory");
    json merged = json::array();
    json plot = json::object();
    std::ostringstream csv;
    csv << "run,policy,seed,accuracy,baseline_accuracy,avg_steps,baseline_steps,reduction_pct,certified_fraction\n";
    for (const fs::path& dir : run_dirs) {
        if (!fs::is_directory(dir)) fail(ErrorCode::ArtifactMismatch, "not a run directory: " + dir.string());
        std::vector<fs::path> reports;
        for (const auto& e : fs::directory_iterator(dir)) {
            const std::string name = e.path().filename().string();
            if (name.rfind("report_", 0) == 0 && e.path().extension() == ".json") reports.push_back(e.path());
        }
        std::sort(reports.begin(), reports.end());
        for (const fs::path& p : reports) {
            json r = json::parse(read_text(p));
            r["run"] = dir.string();
            for (const json& s : r.at("seeds")) {
                csv << dir.string() << ',' << r.at("policy").get<std::string>() << ',' << s.at("seed") << ','
                    << s.at("accuracy").get<std::string>() << ',' << s.at("baseline_accuracy").get<std::string>()
                    << ',' << s.at("avg_steps").get<std::string>() << ','
                    << s.at("baseline_steps").get<std::string>() << ','
                    << s.at("reduction_pct").get<std::string>() << ','
                    << (s.at("certified_fraction").is_null() ? "" : s.at("certified_fraction").get<std::string>())
                    << '\n';
                const fs::path seed_dir = dir / ("seed_" + std::to_string(s.at("seed").get<std::uint64_t>())) /
                                          ("infer_" + r.at("policy").get<std::string>());
                const std::string key = dir.string() + "/" + r.at("policy").get<std::string>() + "/seed_" +
                                        std::to_string(s.at("seed").get<std::uint64_t>());
                json series;
                if (fs::exists(seed_dir / "pseudo_grad.csv")) series["pseudo_grad_csv"] = (seed_dir / "pseudo_grad.csv").string();
                json traces = json::array();
                for (const auto& t : s.at("trace_files")) traces.push_back((seed_dir / t.get<std::string>()).string());
                series["divergence_traces"] = traces;
                plot[key] = series;
            }
            merged.push_back(r);
        }
    }
    fs::create_directories(out_dir);
    write_text(out_dir / "summary.json", merged.dump(2) + "\n");
    write_text(out_dir / "summary.csv", csv.str());
    write_text(out_dir / "plot_data.json", plot.dump(2) + "\n");
}

int exit_code_for(const Error& e) {
    switch (e.code()) {
        case ErrorCode::ConfigError:
        case ErrorCode::InvalidArgument:
            return 2;
        case ErrorCode::ArtifactMismatch:
        case ErrorCode::DimMismatch:
        case ErrorCode::BadMagic:
        case ErrorCode::ChecksumMismatch:
        case ErrorCode::VersionUnsupported:
        case ErrorCode::TruncatedFile:
        case ErrorCode::IoFailure:
            return 3;
        case ErrorCode::NoAdmissiblePair:
            return 4;
        default:
            return 1;
    }
}

}  // namespace edit
