#pragma once

// Per-step alignment scores between visible-token activations and the
// preserved reasoning map, and the softmax distribution built from them.

#include <optional>
#include <variant>
#include <vector>

#include "edit/metadata.hpp"
#include "edit/numeric.hpp"

namespace edit {

/// Unmasked positions of a block, strictly increasing.
struct VisibleSet {
    std::vector<int> members;

    std::size_t size() const noexcept { return members.size(); }
    bool empty() const noexcept { return members.empty(); }
    bool contains(int token) const;

    /// Throws InvalidArgument unless strictly increasing and inside [0, block_length).
    void validate(int block_length = -1) const;
    /// True when every member of `prev` is also a member of *this.
    bool is_superset_of(const VisibleSet& prev) const;

    friend bool operator==(const VisibleSet&, const VisibleSet&) = default;
};

VisibleSet intersect(const VisibleSet& a, const VisibleSet& b);

/// Activations f_s^(t) for every visible token, in visible-set order.
struct ActivationFrame {
    int step = 0;
    VisibleSet visible;
    std::vector<DenseVector> activations;

    const DenseVector& activation_of(int token) const;
};

enum class SimilarityVariant { vector_cosine, subspace_norm, subspace_cosine };

struct SimilarityMode {
    SimilarityVariant variant = SimilarityVariant::vector_cosine;
    std::optional<int> basis_k;

    static SimilarityMode vector() { return {}; }
    static SimilarityMode subspace(SimilarityVariant v, int k) { return {v, k}; }
    void validate() const;
};

using ReasoningMap = std::variant<EvolutionVector, SubspaceBasis>;

struct AlignmentScores {
    std::vector<double> scores;          ///< one per visible token
    std::vector<int> degenerate_tokens;  ///< zero-norm activations, scored at the mode minimum
};

/// Lowest score a mode can produce; zero-norm activations receive it.
double mode_minimum(SimilarityVariant variant);

AlignmentScores score_alignment(const ActivationFrame& frame, const ReasoningMap& map,
                                const SimilarityMode& mode);

struct AlignmentDistribution {
    ProbVector dist;
    int step = 0;
    double temperature_used = 1.0;
    std::vector<double> scores;
};

inline constexpr double kDefaultBlockTemperature = 1.0;

AlignmentDistribution alignment_distribution(const std::vector<double>& scores,
                                             const VisibleSet& visible, double tau_blk, int step = 0);

/// score_alignment followed by alignment_distribution.
AlignmentDistribution align_frame(const ActivationFrame& frame, const ReasoningMap& map,
                                  const SimilarityMode& mode, double tau_blk);

}  // namespace edit
