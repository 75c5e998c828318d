#include "edit/toy_model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <string>

#include "edit/metadata.hpp"

namespace edit {

namespace {

constexpr double kNormEps = 1e-6;

void rmsnorm_forward(const Mat& x, const Vec& g, Mat& y, Vec& inv) {
    const auto n = x.rows();
    const double d = static_cast<double>(x.cols());
    inv.resize(n);
    y.resize(n, x.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        inv(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / d + kNormEps);
        y.row(i) = (x.row(i) * inv(i)).cwiseProduct(g);
    }
}

// dy -> dx (accumulated into dx), dg accumulated.
void rmsnorm_backward(const Mat& x, const Vec& g, const Vec& inv, const Mat& dy, Mat& dx, Vec* dg) {
    const double d = static_cast<double>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Vec xhat = x.row(i) * inv(i);
        const Vec dxhat = dy.row(i).cwiseProduct(g);
        if (dg) *dg += dy.row(i).cwiseProduct(xhat);
        const double proj = dxhat.dot(xhat) / d;
        dx.row(i) += inv(i) * (dxhat - xhat * proj);
    }
}

void softmax_rows(Mat& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
    }
}

Mat gaussian(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double sd) {
    std::normal_distribution<double> nd(0.0, sd);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 4) fail(ErrorCode::ConfigError, "vocab_size must be >= 4");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
        fail(ErrorCode::ConfigError, "d_model must be divisible by n_heads");
    if (n_layers < 1 || d_ff < 1) fail(ErrorCode::ConfigError, "n_layers and d_ff must be positive");
    if (lora_rank < 1) fail(ErrorCode::ConfigError, "lora_rank must be >= 1");
    if (block_length < 2) fail(ErrorCode::ConfigError, "block_length must be >= 2");
    if (max_blocks < 1 || max_positions < block_length)
        fail(ErrorCode::ConfigError, "max_blocks >= 1 and max_positions >= block_length required");
}

const char* to_string(Projection p) noexcept {
    switch (p) {
        case Projection::q: return "q";
        case Projection::k: return "k";
        case Projection::v: return "v";
    }
    return "?";
}

const char* to_string(LoraSide s) noexcept { return s == LoraSide::a ? "A" : "B"; }

int TapSpec::resolved_layer(const ModelConfig& cfg) const {
    const int l = layer < 0 ? cfg.n_layers + layer : layer;
    if (l < 0 || l >= cfg.n_layers) fail(ErrorCode::ConfigError, "tap layer out of range");
    return l;
}

std::string TapSpec::module_id(const ModelConfig& cfg) const {
    return "L" + std::to_string(resolved_layer(cfg)) + "." + to_string(proj) + "." + to_string(side);
}

int TapSpec::width(const ModelConfig& cfg) const {
    return side == LoraSide::a && kind == TapKind::branch ? cfg.lora_rank : cfg.d_model;
}

std::vector<ParamRef> base_tensors(ModelParams& p) {
    std::vector<ParamRef> out;
    auto add = [&](std::string name, double* data, Eigen::Index r, Eigen::Index c) {
        out.push_back({std::move(name), Eigen::Map<Mat>(data, r, c)});
    };
    add("tok_emb", p.tok_emb.data(), p.tok_emb.rows(), p.tok_emb.cols());
    add("pos_emb", p.pos_emb.data(), p.pos_emb.rows(), p.pos_emb.cols());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        LayerParams& L = p.layers[l];
        const std::string pre = "L" + std::to_string(l) + ".";
        add(pre + "g1", L.g1.data(), 1, L.g1.size());
        add(pre + "g2", L.g2.data(), 1, L.g2.size());
        for (int j = 0; j < 3; ++j)
            add(pre + "w" + to_string(static_cast<Projection>(j)), L.w[j].data(), L.w[j].rows(), L.w[j].cols());
        add(pre + "wo", L.wo.data(), L.wo.rows(), L.wo.cols());
        add(pre + "w1", L.w1.data(), L.w1.rows(), L.w1.cols());
        add(pre + "b1", L.b1.data(), 1, L.b1.size());
        add(pre + "w2", L.w2.data(), L.w2.rows(), L.w2.cols());
        add(pre + "b2", L.b2.data(), 1, L.b2.size());
    }
    add("gf", p.gf.data(), 1, p.gf.size());
    add("w_out", p.w_out.data(), p.w_out.rows(), p.w_out.cols());
    add("b_out", p.b_out.data(), 1, p.b_out.size());
    return out;
}

std::vector<ParamRef> lora_tensors(ModelParams& p) {
    std::vector<ParamRef> out;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        for (int j = 0; j < 3; ++j) {
            LoraPair& lp = p.layers[l].lora[j];
            const std::string pre = "L" + std::to_string(l) + "." + to_string(static_cast<Projection>(j)) + ".";
            out.push_back({pre + "A", Eigen::Map<Mat>(lp.a.data(), lp.a.rows(), lp.a.cols())});
            out.push_back({pre + "B", Eigen::Map<Mat>(lp.b.data(), lp.b.rows(), lp.b.cols())});
        }
    }
    return out;
}

ToyModel::ToyModel(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const int d = cfg_.d_model;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sd_res = sd / std::sqrt(2.0 * cfg_.n_layers);
    params_.tok_emb = gaussian(rng, cfg_.vocab_size, d, 1.0);
    params_.pos_emb = gaussian(rng, cfg_.max_positions, d, 1.0);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        LayerParams L;
        L.g1 = Vec::Ones(d);
        L.g2 = Vec::Ones(d);
        for (int j = 0; j < 3; ++j) L.w[j] = gaussian(rng, d, d, sd);
        L.wo = gaussian(rng, d, d, sd_res);
        L.w1 = gaussian(rng, d, cfg_.d_ff, sd);
        L.b1 = Vec::Zero(cfg_.d_ff);
        L.w2 = gaussian(rng, cfg_.d_ff, d, sd_res * std::sqrt(static_cast<double>(d) / cfg_.d_ff));
        L.b2 = Vec::Zero(d);
        for (int j = 0; j < 3; ++j) {
            L.lora[j].a = gaussian(rng, cfg_.lora_rank, d, sd);
            L.lora[j].b = Mat::Zero(d, cfg_.lora_rank);
        }
        params_.layers.push_back(std::move(L));
    }
    params_.gf = Vec::Ones(d);
    params_.w_out = gaussian(rng, d, cfg_.vocab_size, sd);
    params_.b_out = Vec::Zero(cfg_.vocab_size);
}

ModelParams ToyModel::zero_like() const {
    ModelParams g = params_;
    for (ParamRef& r : base_tensors(g)) r.value.setZero();
    for (ParamRef& r : lora_tensors(g)) r.value.setZero();
    return g;
}

void ToyModel::reset_lora() {
    for (LayerParams& L : params_.layers)
        for (LoraPair& lp : L.lora) lp.b.setZero();
}

std::uint32_t ToyModel::base_checksum() const {
    ModelParams copy = params_;
    std::vector<std::uint8_t> bytes;
    for (const ParamRef& r : base_tensors(copy)) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(r.value.data());
        bytes.insert(bytes.end(), p, p + r.value.size() * sizeof(double));
    }
    return crc32_of(bytes.data(), bytes.size());
}

ForwardResult ToyModel::forward(const std::vector<int>& tokens, bool record, const TapSpec* pin_tap,
                                const TapPins* pins) const {
    const auto n = static_cast<Eigen::Index>(tokens.size());
    if (n == 0) fail(ErrorCode::EmptyInput, "empty token sequence");
    if (n > cfg_.max_positions) fail(ErrorCode::InvalidArgument, "sequence longer than max_positions");
    const int d = cfg_.d_model;
    const int nh = cfg_.n_heads;
    const int dh = d / nh;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardResult fr;
    fr.tokens = tokens;
    fr.recorded = record;
    Mat x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int t = tokens[i];
        if (t < 0 || t >= cfg_.vocab_size)
            fail(ErrorCode::VocabOverflow, "token id " + std::to_string(t) + " outside vocabulary");
        x.row(i) = params_.tok_emb.row(t) + params_.pos_emb.row(i);
    }

    const bool pinning = pin_tap && pins && !pins->empty();
    const int pin_layer = pinning ? pin_tap->resolved_layer(cfg_) : -1;

    fr.cache.resize(cfg_.n_layers);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const LayerParams& L = params_.layers[l];
        LayerCache& c = fr.cache[l];
        c.x_in = x;
        rmsnorm_forward(x, L.g1, c.h, c.inv1);
        for (int j = 0; j < 3; ++j) {
            c.ha[j].noalias() = c.h * L.lora[j].a.transpose();
            const bool pin_here = pinning && l == pin_layer && static_cast<int>(pin_tap->proj) == j;
            if (pin_here && pin_tap->side == LoraSide::a && pin_tap->kind == TapKind::branch)
                for (const auto& [pos, val] : *pins) c.ha[j].row(pos) = Eigen::Map<const Vec>(val.data(), val.size());
            c.out[j].noalias() = c.h * L.w[j];
            Mat branch = cfg_.lora_scale * (c.ha[j] * L.lora[j].b.transpose());
            if (pin_here && pin_tap->side == LoraSide::b && pin_tap->kind == TapKind::branch)
                for (const auto& [pos, val] : *pins) branch.row(pos) = Eigen::Map<const Vec>(val.data(), val.size());
            c.out[j] += branch;
            c.branch[j] = std::move(branch);
            if (pin_here && pin_tap->kind == TapKind::full)
                for (const auto& [pos, val] : *pins) c.out[j].row(pos) = Eigen::Map<const Vec>(val.data(), val.size());
        }
        c.attn.resize(nh);
        c.o.resize(n, d);
        for (int h = 0; h < nh; ++h) {
            Mat s = (c.out[0].middleCols(h * dh, dh) * c.out[1].middleCols(h * dh, dh).transpose()) * att_scale;
            softmax_rows(s);
            c.o.middleCols(h * dh, dh).noalias() = s * c.out[2].middleCols(h * dh, dh);
            c.attn[h] = std::move(s);
        }
        c.x2 = x;
        c.x2.noalias() += c.o * L.wo;
        rmsnorm_forward(c.x2, L.g2, c.h2, c.inv2);
        c.z.noalias() = c.h2 * L.w1;
        c.z.rowwise() += L.b1;
        Mat r = c.z.cwiseMax(0.0);
        x = c.x2;
        x.noalias() += r * L.w2;
        x.rowwise() += L.b2;
    }
    fr.x_final = x;
    rmsnorm_forward(x, params_.gf, fr.h_final, fr.inv_f);
    fr.logits.noalias() = fr.h_final * params_.w_out;
    fr.logits.rowwise() += params_.b_out;
    if (!record) {
        // keep only what tap() needs
        for (LayerCache& c : fr.cache) {
            c.attn.clear();
            c.x_in.resize(0, 0);
            c.h2.resize(0, 0);
            c.z.resize(0, 0);
        }
    }
    return fr;
}

void ToyModel::backward(const ForwardResult& fwd, const Mat& dlogits, ModelParams& g, GradScope scope) const {
    if (!fwd.recorded) fail(ErrorCode::NoRecordedGraph, "forward ran without recording");
    if (scope == GradScope::none) return;
    const bool base = scope == GradScope::all;
    const auto n = fwd.logits.rows();
    const int d = cfg_.d_model;
    const int nh = cfg_.n_heads;
    const int dh = d / nh;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double s = cfg_.lora_scale;

    if (base) {
        g.b_out += dlogits.colwise().sum();
        g.w_out.noalias() += fwd.h_final.transpose() * dlogits;
    }
    Mat dh_f = dlogits * params_.w_out.transpose();
    Mat dx = Mat::Zero(n, d);
    rmsnorm_backward(fwd.x_final, params_.gf, fwd.inv_f, dh_f, dx, base ? &g.gf : nullptr);

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
        const LayerParams& L = params_.layers[l];
        LayerParams& G = g.layers[l];
        const LayerCache& c = fwd.cache[l];

        // MLP
        const Mat r = c.z.cwiseMax(0.0);
        Mat dr = dx * L.w2.transpose();
        if (base) {
            G.w2.noalias() += r.transpose() * dx;
            G.b2 += dx.colwise().sum();
        }
        Mat dz = dr.cwiseProduct((c.z.array() > 0.0).cast<double>().matrix());
        if (base) {
            G.w1.noalias() += c.h2.transpose() * dz;
            G.b1 += dz.colwise().sum();
        }
        Mat dh2 = dz * L.w1.transpose();
        Mat dx2 = dx;
        rmsnorm_backward(c.x2, L.g2, c.inv2, dh2, dx2, base ? &G.g2 : nullptr);

        // attention
        if (base) G.wo.noalias() += c.o.transpose() * dx2;
        Mat d_o = dx2 * L.wo.transpose();
        std::array<Mat, 3> dout;
        for (int j = 0; j < 3; ++j) dout[j] = Mat::Zero(n, d);
        for (int h = 0; h < nh; ++h) {
            const Mat& p = c.attn[h];
            const auto doh = d_o.middleCols(h * dh, dh);
            Mat dp = doh * c.out[2].middleCols(h * dh, dh).transpose();
            dout[2].middleCols(h * dh, dh).noalias() += p.transpose() * doh;
            Mat ds(n, n);
            for (Eigen::Index i = 0; i < n; ++i) {
                const double dot_row = dp.row(i).dot(p.row(i));
                ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot_row).matrix());
            }
            ds *= att_scale;
            dout[0].middleCols(h * dh, dh).noalias() += ds * c.out[1].middleCols(h * dh, dh);
            dout[1].middleCols(h * dh, dh).noalias() += ds.transpose() * c.out[0].middleCols(h * dh, dh);
        }
        Mat dhh = Mat::Zero(n, d);
        for (int j = 0; j < 3; ++j) {
            if (base) G.w[j].noalias() += c.h.transpose() * dout[j];
            dhh.noalias() += dout[j] * L.w[j].transpose();
            G.lora[j].b.noalias() += s * (dout[j].transpose() * c.ha[j]);
            Mat dha = s * (dout[j] * L.lora[j].b);
            G.lora[j].a.noalias() += dha.transpose() * c.h;
            dhh.noalias() += dha * L.lora[j].a;
        }
        dx = dx2;
        rmsnorm_backward(c.x_in, L.g1, c.inv1, dhh, dx, base ? &G.g1 : nullptr);
    }
    if (base) {
        for (Eigen::Index i = 0; i < n; ++i) {
            g.tok_emb.row(fwd.tokens[i]) += dx.row(i);
            g.pos_emb.row(i) += dx.row(i);
        }
    }
}

std::vector<DenseVector> ToyModel::tap(const ForwardResult& fwd, const TapSpec& spec,
                                       const std::vector<int>& positions) const {
    const int l = spec.resolved_layer(cfg_);
    const LayerCache& c = fwd.cache[l];
    const int j = static_cast<int>(spec.proj);
    std::vector<DenseVector> out;
    out.reserve(positions.size());
    for (int pos : positions) {
        Vec row;
        if (spec.kind == TapKind::full)
            row = c.out[j].row(pos);
        else if (spec.side == LoraSide::a)
            row = c.ha[j].row(pos);
        else
            row = c.branch[j].row(pos);
        out.emplace_back(row.data(), row.data() + row.size());
    }
    return out;
}

DenseVector softmax_row(const Mat& logits, int row) {
    const double mx = logits.row(row).maxCoeff();
    DenseVector p(logits.cols());
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += p[j] = std::exp(logits(row, j) - mx);
    for (double& v : p) v /= z;
    return p;
}

double masked_cross_entropy(const Mat& logits, const std::vector<std::pair<int, int>>& targets, Mat& dlogits) {
    dlogits = Mat::Zero(logits.rows(), logits.cols());
    if (targets.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(targets.size());
    double loss = 0.0;
    for (const auto& [pos, tok] : targets) {
        const DenseVector p = softmax_row(logits, pos);
        loss -= std::log(std::max(p[tok], 1e-300));
        for (std::size_t j = 0; j < p.size(); ++j) dlogits(pos, j) = p[j] * inv;
        dlogits(pos, tok) -= inv;
    }
    return loss * inv;
}

// ---- checkpoint -------------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'E', 'D', 'I', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint16_t kCkptVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.insert(out.end(), b, b + sizeof(T));
}

template <typename T>
T take(const std::vector<std::uint8_t>& in, std::size_t& off) {
    if (off + sizeof(T) > in.size()) fail(ErrorCode::TruncatedFile, "checkpoint truncated");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}
}  // namespace

void ToyModel::save(const std::filesystem::path& path) const {
    static_assert(std::endian::native == std::endian::little, "little-endian host expected");
    std::vector<std::uint8_t> out(kCkptMagic, kCkptMagic + 8);
    put<std::uint16_t>(out, kCkptVersion);
    for (int v : {cfg_.vocab_size, cfg_.d_model, cfg_.n_heads, cfg_.n_layers, cfg_.d_ff, cfg_.lora_rank,
                  cfg_.block_length, cfg_.max_blocks, cfg_.max_positions})
        put<std::int32_t>(out, v);
    put<double>(out, cfg_.lora_scale);
    put<std::uint64_t>(out, cfg_.seed);
    ModelParams copy = params_;
    auto dump = [&](std::vector<ParamRef> refs) {
        for (const ParamRef& r : refs)
            for (Eigen::Index i = 0; i < r.value.size(); ++i) put<double>(out, r.value.data()[i]);
    };
    dump(base_tensors(copy));
    dump(lora_tensors(copy));
    put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

ToyModel ToyModel::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoFailure, "cannot read " + path.string());
    std::vector<std::uint8_t> in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (in.size() < 14 || std::memcmp(in.data(), kCkptMagic, 8) != 0)
        fail(ErrorCode::BadMagic, "not a checkpoint: " + path.string());
    std::uint32_t stored;
    std::memcpy(&stored, in.data() + in.size() - 4, 4);
    if (crc32_of(in.data(), in.size() - 4) != stored) fail(ErrorCode::ChecksumMismatch, "checkpoint CRC mismatch");
    std::size_t off = 8;
    if (take<std::uint16_t>(in, off) != kCkptVersion) fail(ErrorCode::VersionUnsupported, "checkpoint version");
    ModelConfig cfg;
    for (int* v : {&cfg.vocab_size, &cfg.d_model, &cfg.n_heads, &cfg.n_layers, &cfg.d_ff, &cfg.lora_rank,
                   &cfg.block_length, &cfg.max_blocks, &cfg.max_positions})
        *v = take<std::int32_t>(in, off);
    cfg.lora_scale = take<double>(in, off);
    cfg.seed = take<std::uint64_t>(in, off);
    ToyModel m(cfg);
    auto fill = [&](std::vector<ParamRef> refs) {
        for (ParamRef& r : refs)
            for (Eigen::Index i = 0; i < r.value.size(); ++i) r.value.data()[i] = take<double>(in, off);
    };
    fill(base_tensors(m.params_));
    fill(lora_tensors(m.params_));
    if (off != in.size() - 4) fail(ErrorCode::ArtifactMismatch, "checkpoint has trailing bytes");
    return m;
}

}  // namespace edit
