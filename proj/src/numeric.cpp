#include "edit/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace edit {

const char* to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::ZeroNorm: return "ZeroNorm";
        case ErrorCode::DimMismatch: return "DimMismatch";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::NonPositiveTemperature: return "NonPositiveTemperature";
        case ErrorCode::SupportMismatch: return "SupportMismatch";
        case ErrorCode::RankTooLarge: return "RankTooLarge";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::DegenerateVector: return "DegenerateVector";
        case ErrorCode::DuplicateModuleId: return "DuplicateModuleId";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::VersionUnsupported: return "VersionUnsupported";
        case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
        case ErrorCode::TruncatedFile: return "TruncatedFile";
        case ErrorCode::EmptyVisibleSet: return "EmptyVisibleSet";
        case ErrorCode::ZeroNormActivation: return "ZeroNormActivation";
        case ErrorCode::EmptyIntersection: return "EmptyIntersection";
        case ErrorCode::NonMonotoneVisibleSet: return "NonMonotoneVisibleSet";
        case ErrorCode::StepOrder: return "StepOrder";
        case ErrorCode::WindowTooShort: return "WindowTooShort";
        case ErrorCode::NoValidSamples: return "NoValidSamples";
        case ErrorCode::AlphaNotContractive: return "AlphaNotContractive";
        case ErrorCode::NoAdmissiblePair: return "NoAdmissiblePair";
        case ErrorCode::ProbeUnsupported: return "ProbeUnsupported";
        case ErrorCode::VocabOverflow: return "VocabOverflow";
        case ErrorCode::NoRecordedGraph: return "NoRecordedGraph";
        case ErrorCode::ScheduleExhausted: return "ScheduleExhausted";
        case ErrorCode::MissingStep: return "MissingStep";
        case ErrorCode::TooFewSamples: return "TooFewSamples";
        case ErrorCode::TrainingDiverged: return "TrainingDiverged";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::ArtifactMismatch: return "ArtifactMismatch";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        fail(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                           " != " + std::to_string(rows_) + "x" +
                                           std::to_string(cols_));
    }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

DenseVector DenseMatrix::column(std::size_t c) const {
    DenseVector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
}

DenseMatrix DenseMatrix::transposed() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) fail(ErrorCode::ShapeMismatch, "matmul inner dimensions differ");
    DenseMatrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void validate_prob(const ProbVector& p, double tol) {
    if (p.probs.size() != p.support.size())
        fail(ErrorCode::InvalidArgument, "probs and support lengths differ");
    if (p.probs.empty()) fail(ErrorCode::EmptyInput, "empty distribution");
    double total = 0.0;
    for (double v : p.probs) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0 + tol)
            fail(ErrorCode::InvalidArgument, "probability outside [0,1]");
        total += v;
    }
    if (std::abs(total - 1.0) > tol)
        fail(ErrorCode::InvalidArgument, "mass " + std::to_string(total) + " is not 1");
}

ProbVector normalized(std::span<const double> weights) {
    if (weights.empty()) fail(ErrorCode::EmptyInput, "normalized: no weights");
    const double total = pairwise_sum(weights);
    if (!(total > 0.0)) fail(ErrorCode::InvalidArgument, "normalized: nonpositive mass");
    ProbVector p;
    p.probs.reserve(weights.size());
    for (double w : weights) p.probs.push_back(w / total);
    p.support.resize(weights.size());
    std::iota(p.support.begin(), p.support.end(), 0);
    return p;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) fail(ErrorCode::DimMismatch, "dot: lengths differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) {
    // scaled accumulation keeps tiny and huge vectors representable
    double scale = 0.0;
    for (double v : a) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) return 0.0;
    double s = 0.0;
    for (double v : a) {
        const double x = v / scale;
        s += x * x;
    }
    return scale * std::sqrt(s);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        fail(ErrorCode::DimMismatch,
             "cosine_similarity: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na < 1e-30 || nb < 1e-30) fail(ErrorCode::ZeroNorm, "cosine_similarity: zero-norm input");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] / na) * (b[i] / nb);
    return std::clamp(s, -1.0, 1.0);
}

ProbVector softmax(std::span<const double> scores, double temperature,
                   std::span<const int> support) {
    if (scores.empty()) fail(ErrorCode::EmptyInput, "softmax: no scores");
    if (!(temperature > 0.0)) fail(ErrorCode::NonPositiveTemperature, "softmax: temperature <= 0");
    if (!support.empty() && support.size() != scores.size())
        fail(ErrorCode::DimMismatch, "softmax: support length differs from scores");
    const double top = *std::max_element(scores.begin(), scores.end());
    std::vector<double> w(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) w[i] = std::exp((scores[i] - top) / temperature);
    ProbVector p = normalized(w);
    if (!support.empty()) p.support.assign(support.begin(), support.end());
    return p;
}

namespace {
void require_same_support(const ProbVector& p, const ProbVector& q, const char* who) {
    if (p.support != q.support || p.probs.size() != q.probs.size())
        fail(ErrorCode::SupportMismatch, std::string(who) + ": supports differ");
}
}  // namespace

double kl_divergence(const ProbVector& p, const ProbVector& q) {
    require_same_support(p, q, "kl_divergence");
    double s = 0.0;
    for (std::size_t i = 0; i < p.probs.size(); ++i) {
        const double pi = p.probs[i];
        if (pi <= 0.0) continue;
        const double a = std::max(pi, kProbFloor);
        const double b = std::max(q.probs[i], kProbFloor);
        s += pi * std::log(a / b);
    }
    return std::max(s, 0.0);
}

double total_variation(const ProbVector& p, const ProbVector& q) {
    require_same_support(p, q, "total_variation");
    double s = 0.0;
    for (std::size_t i = 0; i < p.probs.size(); ++i) s += std::abs(p.probs[i] - q.probs[i]);
    return std::min(0.5 * s, 1.0);
}

std::size_t argmax_position(const ProbVector& p) {
    if (p.probs.empty()) fail(ErrorCode::EmptyInput, "argmax of empty distribution");
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.probs.size(); ++i) {
        if (p.probs[i] > p.probs[best] ||
            (p.probs[i] == p.probs[best] && p.support[i] < p.support[best]))
            best = i;
    }
    return best;
}

double pairwise_sum(std::span<const double> values) {
    if (values.size() <= 8) {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

SymmetricEigen symmetric_eigen(const DenseMatrix& s) {
    if (s.rows() != s.cols()) fail(ErrorCode::ShapeMismatch, "symmetric_eigen: not square");
    const std::size_t n = s.rows();
    DenseMatrix a = s;
    DenseMatrix v = DenseMatrix::identity(n);

    double total = 0.0;
    for (double x : a.data()) total += x * x;
    const double tol = 1e-30 * std::max(total, 1e-300);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off <= tol) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - sn * akq;
                    a(k, q) = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - sn * aqk;
                    a(q, k) = sn * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - sn * vkq;
                    v(k, q) = sn * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
    SymmetricEigen out;
    out.values.resize(n);
    out.vectors = DenseMatrix(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        out.values[c] = a(order[c], order[c]);
        for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
    }
    return out;
}

namespace {

// Modified Gram-Schmidt over the first `k` columns of `u`, in place. Columns
// that collapse are replaced by the next standard basis vector that survives.
void orthonormalize_columns(DenseMatrix& u, std::size_t k) {
    const std::size_t d = u.rows();
    std::size_t next_basis = 0;
    for (std::size_t c = 0; c < k; ++c) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t prev = 0; prev < c; ++prev) {
                double proj = 0.0;
                for (std::size_t r = 0; r < d; ++r) proj += u(r, prev) * u(r, c);
                for (std::size_t r = 0; r < d; ++r) u(r, c) -= proj * u(r, prev);
            }
        }
        double n = 0.0;
        for (std::size_t r = 0; r < d; ++r) n += u(r, c) * u(r, c);
        n = std::sqrt(n);
        if (n < 1e-10) {
            // deficient direction: try standard basis vectors in order
            bool placed = false;
            while (!placed && next_basis < d) {
                for (std::size_t r = 0; r < d; ++r) u(r, c) = (r == next_basis) ? 1.0 : 0.0;
                ++next_basis;
                for (int pass = 0; pass < 2; ++pass) {
                    for (std::size_t prev = 0; prev < c; ++prev) {
                        double proj = 0.0;
                        for (std::size_t r = 0; r < d; ++r) proj += u(r, prev) * u(r, c);
                        for (std::size_t r = 0; r < d; ++r) u(r, c) -= proj * u(r, prev);
                    }
                }
                n = 0.0;
                for (std::size_t r = 0; r < d; ++r) n += u(r, c) * u(r, c);
                n = std::sqrt(n);
                placed = n > 1e-6;
            }
        }
        for (std::size_t r = 0; r < d; ++r) u(r, c) /= n;
    }
}

void canonical_signs(DenseMatrix& u) {
    for (std::size_t c = 0; c < u.cols(); ++c) {
        std::size_t best = 0;
        for (std::size_t r = 1; r < u.rows(); ++r)
            if (std::abs(u(r, c)) > std::abs(u(best, c)) + 1e-12) best = r;
        if (u(best, c) < 0.0)
            for (std::size_t r = 0; r < u.rows(); ++r) u(r, c) = -u(r, c);
    }
}

}  // namespace

TruncatedSvd truncated_svd(const DenseMatrix& m, std::size_t k) {
    const std::size_t d = m.rows();
    const std::size_t n = m.cols();
    if (k < 1 || k > std::min(d, n))
        fail(ErrorCode::RankTooLarge, "truncated_svd: k=" + std::to_string(k) + " outside [1, " +
                                          std::to_string(std::min(d, n)) + "]");
    if (!all_finite(m.data())) fail(ErrorCode::NonFinite, "truncated_svd: non-finite input");

    TruncatedSvd out;
    out.left = DenseMatrix(d, k);
    out.singular.resize(k);

    if (d <= n) {
        const SymmetricEigen eig = symmetric_eigen(matmul(m, m.transposed()));
        for (std::size_t c = 0; c < k; ++c) {
            out.singular[c] = std::sqrt(std::max(eig.values[c], 0.0));
            for (std::size_t r = 0; r < d; ++r) out.left(r, c) = eig.vectors(r, c);
        }
    } else {
        const SymmetricEigen eig = symmetric_eigen(matmul(m.transposed(), m));
        const double top = std::sqrt(std::max(eig.values[0], 0.0));
        for (std::size_t c = 0; c < k; ++c) {
            const double sigma = std::sqrt(std::max(eig.values[c], 0.0));
            out.singular[c] = sigma;
            if (sigma > 1e-10 * top && sigma > 0.0) {
                for (std::size_t r = 0; r < d; ++r) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += m(r, j) * eig.vectors(j, c);
                    out.left(r, c) = s / sigma;
                }
            }
            // otherwise left as zeros; orthonormalize_columns completes it
        }
    }
    orthonormalize_columns(out.left, k);
    canonical_signs(out.left);
    return out;
}

}  // namespace edit
