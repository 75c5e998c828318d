#include "edit/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace edit {

bool VisibleSet::contains(int token) const {
    return std::binary_search(members.begin(), members.end(), token);
}

void VisibleSet::validate(int block_length) const {
    for (std::size_t i = 0; i < members.size(); ++i) {
        if (members[i] < 0 || (block_length >= 0 && members[i] >= block_length))
            fail(ErrorCode::InvalidArgument, "visible token " + std::to_string(members[i]) +
                                                 " outside the block");
        if (i > 0 && members[i] <= members[i - 1])
            fail(ErrorCode::InvalidArgument, "visible set not strictly increasing");
    }
}

bool VisibleSet::is_superset_of(const VisibleSet& prev) const {
    return std::includes(members.begin(), members.end(), prev.members.begin(), prev.members.end());
}

VisibleSet intersect(const VisibleSet& a, const VisibleSet& b) {
    VisibleSet out;
    std::set_intersection(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(),
                          std::back_inserter(out.members));
    return out;
}

const DenseVector& ActivationFrame::activation_of(int token) const {
    auto it = std::lower_bound(visible.members.begin(), visible.members.end(), token);
    if (it == visible.members.end() || *it != token)
        fail(ErrorCode::InvalidArgument, "token " + std::to_string(token) + " not visible");
    return activations[static_cast<std::size_t>(it - visible.members.begin())];
}

void SimilarityMode::validate() const {
    const bool subspace = variant != SimilarityVariant::vector_cosine;
    if (subspace != basis_k.has_value())
        fail(ErrorCode::ConfigError, "basis_k must be set exactly for subspace modes");
    if (basis_k && (*basis_k < 1 || *basis_k > 8))
        fail(ErrorCode::ConfigError, "basis_k must be in [1, 8]");
}

double mode_minimum(SimilarityVariant variant) {
    switch (variant) {
        case SimilarityVariant::vector_cosine: return -1.0;
        case SimilarityVariant::subspace_cosine: return 0.0;
        case SimilarityVariant::subspace_norm: return 0.0;
    }
    return 0.0;
}

namespace {

std::size_t map_dimension(const ReasoningMap& map) {
    if (const auto* v = std::get_if<EvolutionVector>(&map)) return v->u.size();
    return std::get<SubspaceBasis>(map).columns.rows();
}

double projected_norm(const SubspaceBasis& basis, std::span<const double> f) {
    const DenseMatrix& u = basis.columns;
    double s = 0.0;
    for (std::size_t c = 0; c < u.cols(); ++c) {
        double g = 0.0;
        for (std::size_t r = 0; r < u.rows(); ++r) g += u(r, c) * f[r];
        s += g * g;
    }
    return std::sqrt(s);
}

}  // namespace

AlignmentScores score_alignment(const ActivationFrame& frame, const ReasoningMap& map,
                                const SimilarityMode& mode) {
    mode.validate();
    if (frame.visible.empty()) fail(ErrorCode::EmptyVisibleSet, "no visible tokens to score");
    if (frame.activations.size() != frame.visible.size())
        fail(ErrorCode::DimMismatch, "activation count differs from visible set");

    const std::size_t dim = map_dimension(map);
    const bool is_vector = std::holds_alternative<EvolutionVector>(map);
    if (is_vector != (mode.variant == SimilarityVariant::vector_cosine))
        fail(ErrorCode::ConfigError, "similarity mode does not match the reasoning map kind");
    if (!is_vector && static_cast<int>(std::get<SubspaceBasis>(map).k) != *mode.basis_k)
        fail(ErrorCode::ConfigError, "basis_k differs from the loaded subspace");

    AlignmentScores out;
    out.scores.reserve(frame.visible.size());
    for (std::size_t i = 0; i < frame.visible.size(); ++i) {
        const DenseVector& f = frame.activations[i];
        if (f.size() != dim)
            fail(ErrorCode::DimMismatch, "activation length " + std::to_string(f.size()) +
                                             " vs map dimension " + std::to_string(dim));
        const double fn = norm2(f);
        if (fn < 1e-30) {
            out.degenerate_tokens.push_back(frame.visible.members[i]);
            out.scores.push_back(mode_minimum(mode.variant));
            continue;
        }
        switch (mode.variant) {
            case SimilarityVariant::vector_cosine:
                out.scores.push_back(cosine_similarity(f, std::get<EvolutionVector>(map).u));
                break;
            case SimilarityVariant::subspace_norm:
                out.scores.push_back(projected_norm(std::get<SubspaceBasis>(map), f));
                break;
            case SimilarityVariant::subspace_cosine:
                out.scores.push_back(
                    std::clamp(projected_norm(std::get<SubspaceBasis>(map), f) / fn, 0.0, 1.0));
                break;
        }
    }
    return out;
}

AlignmentDistribution alignment_distribution(const std::vector<double>& scores,
                                             const VisibleSet& visible, double tau_blk, int step) {
    if (visible.empty()) fail(ErrorCode::EmptyVisibleSet, "alignment distribution needs visible tokens");
    if (scores.size() != visible.size())
        fail(ErrorCode::DimMismatch, "one score per visible token required");
    AlignmentDistribution out;
    out.dist = softmax(scores, tau_blk, visible.members);
    out.step = step;
    out.temperature_used = tau_blk;
    out.scores = scores;
    return out;
}

AlignmentDistribution align_frame(const ActivationFrame& frame, const ReasoningMap& map,
                                  const SimilarityMode& mode, double tau_blk) {
    const AlignmentScores s = score_alignment(frame, map, mode);
    return alignment_distribution(s.scores, frame.visible, tau_blk, frame.step);
}

}  // namespace edit
