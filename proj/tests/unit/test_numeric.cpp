#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "doctest.h"
#include "edit/numeric.hpp"

using namespace edit;

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    DenseMatrix m(r, c);
    for (double& x : m.data()) x = n(rng);
    return m;
}

ProbVector pv(std::vector<double> p) {
    ProbVector out;
    out.probs = std::move(p);
    for (std::size_t i = 0; i < out.probs.size(); ++i) out.support.push_back(static_cast<int>(i));
    return out;
}

}  // namespace

TEST_CASE("cosine similarity") {
    std::vector<double> a{1, 0}, b{1, 0}, c{0, 1}, d{3, 4}, e{4, 3};
    CHECK(cosine_similarity(a, b) == doctest::Approx(1.0));
    CHECK(cosine_similarity(a, c) == doctest::Approx(0.0));
    CHECK(cosine_similarity(d, e) == doctest::Approx(0.96).epsilon(1e-15));
    std::vector<double> z{0, 0};
    CHECK_THROWS_AS(cosine_similarity(a, z), Error);
    std::vector<double> three{1, 2, 3};
    CHECK_THROWS_AS(cosine_similarity(a, three), Error);
}

TEST_CASE("softmax") {
    std::vector<double> s0{0, 0};
    const ProbVector p0 = softmax(s0, 1.0);
    CHECK(p0.probs[0] == doctest::Approx(0.5));
    CHECK(p0.probs[1] == doctest::Approx(0.5));

    std::vector<double> single{42.0};
    CHECK(softmax(single, 0.3).probs[0] == 1.0);

    // oracle: long double summation
    std::vector<double> s{1, 2, 3};
    const ProbVector p = softmax(s, 1.0);
    long double z = 0;
    for (double x : s) z += std::exp(static_cast<long double>(x));
    for (int i = 0; i < 3; ++i)
        CHECK(p.probs[i] == doctest::Approx(static_cast<double>(std::exp(static_cast<long double>(s[i])) / z)).epsilon(1e-14));
    CHECK(p.probs[0] == doctest::Approx(0.09003057).epsilon(1e-7));

    CHECK_THROWS_AS(softmax(s, 0.0), Error);
    std::vector<double> big{1000, 1001};
    CHECK(std::isfinite(softmax(big, 1.0).probs[0]));
}

TEST_CASE("kl and tv") {
    const ProbVector p = pv({0.5, 0.5}), q = pv({0.9, 0.1});
    CHECK(kl_divergence(p, p) == 0.0);
    CHECK(kl_divergence(p, q) == doctest::Approx(0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1)));
    CHECK(kl_divergence(pv({1.0}), pv({1.0})) == 0.0);
    CHECK(total_variation(p, p) == 0.0);
    CHECK(total_variation(pv({1, 0}), pv({0, 1})) == doctest::Approx(1.0));
    CHECK(total_variation(p, q) == doctest::Approx(0.4));

    ProbVector shifted = q;
    shifted.support = {3, 4};
    CHECK_THROWS_AS(kl_divergence(p, shifted), Error);
}

TEST_CASE("pinsker holds on random pairs") {
    std::mt19937_64 rng(7);
    std::gamma_distribution<double> g(0.5, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 2 + trial % 6;
        std::vector<double> a(n), b(n);
        for (int i = 0; i < n; ++i) {
            a[i] = g(rng) + 1e-6;
            b[i] = g(rng) + 1e-6;
        }
        const ProbVector p = normalized(a), q = normalized(b);
        CHECK(total_variation(p, q) <= std::sqrt(kl_divergence(p, q) / 2.0) + 1e-9);
    }
}

TEST_CASE("argmax ties go to the lowest index") {
    CHECK(argmax_position(pv({0.25, 0.5, 0.25})) == 1);
    CHECK(argmax_position(pv({0.4, 0.2, 0.4})) == 0);
}

TEST_CASE("truncated svd") {
    SUBCASE("identity") {
        const TruncatedSvd s = truncated_svd(DenseMatrix::identity(3), 2);
        CHECK(s.singular[0] == doctest::Approx(1.0));
        CHECK(s.singular[1] == doctest::Approx(1.0));
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j) {
                double d = 0;
                for (std::size_t r = 0; r < 3; ++r) d += s.left(r, i) * s.left(r, j);
                CHECK(d == doctest::Approx(i == j ? 1.0 : 0.0));
            }
    }
    SUBCASE("rank one") {
        const std::vector<double> u{1, 2, 2}, v{3, -1};
        DenseMatrix m(3, 2);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 2; ++j) m(i, j) = u[i] * v[j];
        const TruncatedSvd s = truncated_svd(m, 1);
        const double sign = s.left(0, 0) > 0 ? 1.0 : -1.0;
        for (int i = 0; i < 3; ++i) CHECK(sign * s.left(i, 0) == doctest::Approx(u[i] / 3.0));
    }
    SUBCASE("random against an Eigen eigensolver on m m^T") {
        std::mt19937_64 rng(3);
        const DenseMatrix m = random_matrix(6, 4, rng);
        Eigen::MatrixXd e(6, 4);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 4; ++j) e(i, j) = m(i, j);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(e * e.transpose());
        const TruncatedSvd s = truncated_svd(m, 2);
        for (int c = 0; c < 2; ++c) {
            const int idx = 5 - c;  // ascending order from Eigen
            CHECK(s.singular[c] == doctest::Approx(std::sqrt(es.eigenvalues()(idx))).epsilon(1e-10));
            double d = 0;
            for (int r = 0; r < 6; ++r) d += s.left(r, c) * es.eigenvectors()(r, idx);
            CHECK(std::abs(d) == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
    CHECK_THROWS_AS(truncated_svd(DenseMatrix::identity(3), 4), Error);
}

TEST_CASE("pairwise sum") {
    std::vector<double> plain{1, 2, 3, 4, 5};
    CHECK(pairwise_sum(plain) == 15.0);
    std::vector<double> empty;
    CHECK(pairwise_sum(empty) == 0.0);
    // many small terms: pairwise keeps the error near one ulp of the total
    std::vector<double> tenths(1 << 16, 0.1);
    CHECK(std::abs(pairwise_sum(tenths) - 6553.6) < 1e-9);
}
