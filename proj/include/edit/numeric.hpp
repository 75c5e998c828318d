#pragma once

// Dense linear algebra and information-theoretic primitives shared by the
// rest of the library. Everything here is a pure function over its inputs.

#include <cstddef>
#include <span>
#include <vector>

#include "edit/error.hpp"

namespace edit {

using DenseVector = std::vector<double>;

/// Row-major dense matrix of 64-bit reals.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static DenseMatrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    DenseVector column(std::size_t c) const;

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool same_shape(const DenseMatrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    DenseMatrix transposed() const;

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);

/// Probability mass over an explicit ordered support of token indices.
struct ProbVector {
    std::vector<double> probs;
    std::vector<int> support;

    std::size_t size() const noexcept { return probs.size(); }
    friend bool operator==(const ProbVector&, const ProbVector&) = default;
};

/// Floor applied to probabilities before any log ratio.
inline constexpr double kProbFloor = 1e-12;

/// Checks the ProbVector invariants: equal lengths, entries in [0,1],
/// total mass 1 within `tol`. Throws InvalidArgument otherwise.
void validate_prob(const ProbVector& p, double tol = 1e-9);

/// Builds a ProbVector on support 0..n-1 after normalizing `weights`.
ProbVector normalized(std::span<const double> weights);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Softmax at temperature `temperature` with max subtraction. The support
/// defaults to 0..n-1 when `support` is empty.
ProbVector softmax(std::span<const double> scores, double temperature,
                   std::span<const int> support = {});

/// KL(p || q) in nats; entries are floored at kProbFloor before the ratio.
double kl_divergence(const ProbVector& p, const ProbVector& q);

double total_variation(const ProbVector& p, const ProbVector& q);

/// Index into `p.probs` of the largest entry; ties resolve to the lowest
/// support index.
std::size_t argmax_position(const ProbVector& p);

struct TruncatedSvd {
    DenseMatrix left;             ///< rows x k, orthonormal columns
    std::vector<double> singular;  ///< descending, length k
};

/// Top-k left singular vectors via a Jacobi eigendecomposition of the smaller
/// Gram matrix. Columns past the numerical rank are completed to an
/// orthonormal set.
TruncatedSvd truncated_svd(const DenseMatrix& m, std::size_t k);

/// Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues come back descending, eigenvectors as matching columns.
struct SymmetricEigen {
    std::vector<double> values;
    DenseMatrix vectors;
};
SymmetricEigen symmetric_eigen(const DenseMatrix& s);

/// Deterministic pairwise summation.
double pairwise_sum(std::span<const double> values);

bool all_finite(std::span<const double> values);

}  // namespace edit
