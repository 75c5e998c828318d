#include "edit/metadata.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace edit {

static_assert(std::endian::native == std::endian::little,
              "EDITMETA writer assumes a little-endian host");

void AdamWConfig::validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail(ErrorCode::ConfigError, "beta1 must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail(ErrorCode::ConfigError, "beta2 must be in [0,1)");
    if (!(epsilon > 0.0)) fail(ErrorCode::ConfigError, "epsilon must be positive");
    if (!(learning_rate > 0.0)) fail(ErrorCode::ConfigError, "learning_rate must be positive");
    if (!(weight_decay >= 0.0)) fail(ErrorCode::ConfigError, "weight_decay must be >= 0");
    if (bias_correction) fail(ErrorCode::ConfigError, "bias_correction=true is not supported");
}

DenseMatrix& adamw_step_inplace(MomentState& state, const DenseMatrix& grad,
                                const AdamWConfig& cfg, DenseMatrix& update) {
    if (!state.m.same_shape(grad) || !state.v.same_shape(grad))
        fail(ErrorCode::ShapeMismatch, "adamw_step: gradient shape differs from moment shape");
    if (!update.same_shape(grad)) update = DenseMatrix(grad.rows(), grad.cols());
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    auto& m = state.m.data();
    auto& v = state.v.data();
    auto& u = update.data();
    const auto& g = grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        u[i] = m[i] / (std::sqrt(v[i]) + cfg.epsilon);
    }
    ++state.step;
    return update;
}

AdamWStep adamw_step(const MomentState& state, const DenseMatrix& grad, const AdamWConfig& cfg) {
    AdamWStep out{state, DenseMatrix(grad.rows(), grad.cols())};
    adamw_step_inplace(out.state, grad, cfg, out.update);
    return out;
}

EvolutionAccumulator::EvolutionAccumulator(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), sum_u_(rows, cols) {}

void EvolutionAccumulator::accumulate(const DenseMatrix& update) {
    if (count_ == 0 && rows_ == 0 && cols_ == 0) {
        rows_ = update.rows();
        cols_ = update.cols();
        sum_u_ = DenseMatrix(rows_, cols_);
    }
    if (update.rows() != rows_ || update.cols() != cols_)
        fail(ErrorCode::ShapeMismatch, "accumulate_evolution: update shape differs");
    if (!all_finite(update.data())) fail(ErrorCode::NonFinite, "accumulate_evolution: non-finite");
    for (std::size_t i = 0; i < update.size(); ++i) sum_u_.data()[i] += update.data()[i];
    history_.push_back(update);
    ++count_;
}

DenseMatrix EvolutionAccumulator::finalize() const {
    DenseMatrix mean(rows_, cols_);
    if (count_ == 0) return mean;
    std::vector<double> column(count_);
    for (std::size_t i = 0; i < rows_ * cols_; ++i) {
        for (std::size_t k = 0; k < count_; ++k) column[k] = history_[k].data()[i];
        std::sort(column.begin(), column.end());
        mean.data()[i] = pairwise_sum(column) / static_cast<double>(count_);
    }
    return mean;
}

EvolutionAccumulator accumulate_evolution(EvolutionAccumulator acc, const DenseMatrix& update) {
    acc.accumulate(update);
    return acc;
}

namespace {
EvolutionVector make_vector(const DenseMatrix& t, std::string id) {
    if (!all_finite(t.data())) fail(ErrorCode::NonFinite, "evolution tensor has non-finite entries");
    EvolutionVector ev;
    ev.module_id = std::move(id);
    ev.d_out = static_cast<std::uint32_t>(t.rows());
    ev.rank = static_cast<std::uint32_t>(t.cols());
    ev.u.resize(t.rows());
    return ev;
}
}  // namespace

EvolutionVector reduce_row_energy(const DenseMatrix& evolution, std::string module_id) {
    EvolutionVector ev = make_vector(evolution, std::move(module_id));
    for (std::size_t p = 0; p < evolution.rows(); ++p) {
        double s = 0.0;
        for (double x : evolution.row(p)) s += x * x;
        ev.u[p] = std::sqrt(s);
    }
    return ev;
}

EvolutionVector reduce_row_mean(const DenseMatrix& evolution, std::string module_id) {
    EvolutionVector ev = make_vector(evolution, std::move(module_id));
    for (std::size_t p = 0; p < evolution.rows(); ++p) {
        double s = 0.0;
        for (double x : evolution.row(p)) s += std::abs(x);
        ev.u[p] = evolution.cols() ? s / static_cast<double>(evolution.cols()) : 0.0;
    }
    return ev;
}

SubspaceBasis build_subspace(const DenseMatrix& evolution, std::size_t k, std::string source_module) {
    TruncatedSvd svd = truncated_svd(evolution, k);
    return {std::move(svd.left), static_cast<std::uint32_t>(k), std::move(source_module)};
}

const EvolutionVector* MetadataBundle::find_vector(const std::string& module_id) const {
    for (const auto& v : vectors)
        if (v.module_id == module_id) return &v;
    return nullptr;
}

const SubspaceBasis* MetadataBundle::find_basis(const std::string& module_id) const {
    for (const auto& b : bases)
        if (b.source_module == module_id) return &b;
    return nullptr;
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, data, static_cast<uInt>(len));
    return static_cast<std::uint32_t>(crc);
}

// ---- EDITMETA -------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'E', 'D', 'I', 'T', 'M', 'E', 'T', 'A'};
constexpr std::uint16_t kVersion = 1;

class Writer {
public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes.insert(bytes.end(), p, p + n);
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b, std::size_t limit) : bytes_(b), limit_(limit) {}
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        need(n);
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > limit_) fail(ErrorCode::TruncatedFile, "EDITMETA ends mid-record");
    }
    const std::vector<std::uint8_t>& bytes_;
    std::size_t limit_;
    std::size_t pos_ = 0;
};

void put_entry(Writer& w, const std::string& id, std::uint8_t kind, std::uint32_t d_out,
               std::uint32_t rank, const std::vector<float>& payload) {
    if (id.size() > 0xFFFF) fail(ErrorCode::InvalidArgument, "module id too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(id.size()));
    w.put_bytes(id.data(), id.size());
    w.put<std::uint8_t>(kind);
    w.put<std::uint32_t>(d_out);
    w.put<std::uint32_t>(rank);
    const std::size_t nbytes = payload.size() * sizeof(float);
    w.put_bytes(payload.data(), nbytes);
    w.put<std::uint32_t>(crc32_of(reinterpret_cast<const std::uint8_t*>(payload.data()), nbytes));
}

}  // namespace

std::vector<std::uint8_t> encode_metadata(const std::vector<EvolutionVector>& vectors,
                                          const std::vector<SubspaceBasis>& bases) {
    if (vectors.empty()) fail(ErrorCode::InvalidArgument, "persist_metadata: no evolution vectors");
    if (vectors.size() + bases.size() > 0xFFFF)
        fail(ErrorCode::InvalidArgument, "persist_metadata: too many entries");

    std::set<std::string> seen_vec, seen_basis;
    for (const auto& v : vectors) {
        if (!seen_vec.insert(v.module_id).second)
            fail(ErrorCode::DuplicateModuleId, v.module_id);
        if (v.u.size() != v.d_out) fail(ErrorCode::ShapeMismatch, v.module_id + ": u length != d_out");
        if (!all_finite(v.u)) fail(ErrorCode::NonFinite, v.module_id);
        if (norm2(v.u) == 0.0) fail(ErrorCode::DegenerateVector, v.module_id + " has zero norm");
    }
    for (const auto& b : bases) {
        if (!seen_basis.insert(b.source_module).second)
            fail(ErrorCode::DuplicateModuleId, b.source_module);
        if (b.columns.cols() != b.k) fail(ErrorCode::ShapeMismatch, b.source_module + ": k mismatch");
    }

    Writer w;
    w.put_bytes(kMagic, sizeof(kMagic));
    w.put<std::uint16_t>(kVersion);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(vectors.size() + bases.size()));

    std::vector<float> payload;
    for (const auto& v : vectors) {
        payload.assign(v.u.begin(), v.u.end());
        put_entry(w, v.module_id, 0, v.d_out, v.rank, payload);
    }
    for (const auto& b : bases) {
        payload.assign(b.columns.data().begin(), b.columns.data().end());
        put_entry(w, b.source_module, 1, static_cast<std::uint32_t>(b.columns.rows()), b.k, payload);
    }
    const std::uint32_t file_crc = crc32_of(w.bytes.data(), w.bytes.size());
    w.put<std::uint32_t>(file_crc);
    return std::move(w.bytes);
}

MetadataBundle decode_metadata(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < sizeof(kMagic)) fail(ErrorCode::TruncatedFile, "EDITMETA shorter than magic");
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        fail(ErrorCode::BadMagic, "not an EDITMETA file");
    if (bytes.size() < sizeof(kMagic) + 4 + 4) fail(ErrorCode::TruncatedFile, "EDITMETA header");

    const std::size_t body = bytes.size() - 4;
    std::uint32_t file_crc;
    std::memcpy(&file_crc, bytes.data() + body, 4);
    if (file_crc != crc32_of(bytes.data(), body))
        fail(ErrorCode::ChecksumMismatch, "file checksum");

    Reader r(bytes, body);
    r.take(sizeof(kMagic));
    const auto version = r.get<std::uint16_t>();
    if (version != kVersion)
        fail(ErrorCode::VersionUnsupported, "EDITMETA version " + std::to_string(version));
    const auto count = r.get<std::uint16_t>();

    MetadataBundle out;
    for (std::uint16_t e = 0; e < count; ++e) {
        const auto id_len = r.get<std::uint16_t>();
        const std::uint8_t* id_ptr = r.take(id_len);
        std::string id(reinterpret_cast<const char*>(id_ptr), id_len);
        const auto kind = r.get<std::uint8_t>();
        const auto d_out = r.get<std::uint32_t>();
        const auto rank = r.get<std::uint32_t>();
        if (kind > 1) fail(ErrorCode::BadMagic, "unknown entry kind " + std::to_string(kind));
        const std::size_t n = static_cast<std::size_t>(d_out) * (kind == 0 ? 1 : std::max<std::uint32_t>(rank, 1));
        if (n * sizeof(float) > body) fail(ErrorCode::TruncatedFile, "payload exceeds file");
        const std::uint8_t* payload = r.take(n * sizeof(float));
        const auto crc = r.get<std::uint32_t>();
        if (crc != crc32_of(payload, n * sizeof(float)))
            fail(ErrorCode::ChecksumMismatch, "payload checksum of " + id);
        std::vector<float> values(n);
        std::memcpy(values.data(), payload, n * sizeof(float));
        if (kind == 0) {
            out.vectors.push_back({DenseVector(values.begin(), values.end()), id, d_out, rank});
        } else {
            out.bases.push_back(
                {DenseMatrix(d_out, rank, std::vector<double>(values.begin(), values.end())), rank, id});
        }
    }
    if (r.pos() != body) fail(ErrorCode::TruncatedFile, "trailing bytes before file checksum");
    return out;
}

std::size_t persist_metadata(const std::vector<EvolutionVector>& vectors,
                             const std::vector<SubspaceBasis>& bases,
                             const std::filesystem::path& path) {
    const auto bytes = encode_metadata(vectors, bases);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorCode::IoFailure, "cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail(ErrorCode::IoFailure, "short write to " + path.string());
    return bytes.size();
}

MetadataBundle load_metadata(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::IoFailure, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_metadata(bytes);
}

}  // namespace edit
