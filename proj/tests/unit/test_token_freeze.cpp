#include <cmath>

#include "doctest.h"
#include "edit/token_freeze.hpp"

using namespace edit;

namespace {

SubspaceBasis identity_basis(int d, int k) {
    SubspaceBasis b;
    b.columns = DenseMatrix(d, k);
    for (int j = 0; j < k; ++j) b.columns(j, j) = 1.0;
    b.k = k;
    return b;
}

}  // namespace

TEST_CASE("local distribution") {
    const SubspaceBasis b = identity_basis(3, 3);
    const ProbVector q = local_distribution({1, -2, 3}, b, 1.0);
    CHECK(q.probs[0] == doctest::Approx(0.09003057).epsilon(1e-7));
    CHECK(q.probs[1] == doctest::Approx(0.24472847).epsilon(1e-7));
    CHECK(q.probs[2] == doctest::Approx(0.66524096).epsilon(1e-7));
    const ProbVector u = local_distribution({0, 0, 0}, b, 1.0);
    for (double p : u.probs) CHECK(p == doctest::Approx(1.0 / 3));
    const ProbVector cold = local_distribution({2, 0, 0}, b, 0.01);
    CHECK(cold.probs[0] > 1.0 - 1e-12);
    CHECK_THROWS_AS(local_distribution({1, 2}, b, 1.0), Error);
    CHECK_THROWS_AS(local_distribution({1, 2, 3}, b, 0.0), Error);
}

TEST_CASE("constant token freezes with zero epsilon") {
    FreezeConfig cfg;
    TokenFreezeState st;
    const SubspaceBasis b = identity_basis(4, 3);
    bool frozen = false;
    int step = 0;
    while (!frozen) frozen = token_stability_step(st, 2, ++step, {0.3, 0.1, -0.2, 5.0}, b, cfg);
    CHECK(step == cfg.omega_tok + 1);
    CHECK(st.is_frozen(2));
    CHECK(st.tokens.at(2).epsilon == 0.0);
    CHECK(st.frozen_tokens() == std::vector<int>{2});
    CHECK_THROWS_AS(token_stability_step(st, 2, ++step, {0, 0, 0, 0}, b, cfg), Error);
    const DenseVector live{9, 9, 9, 9};
    CHECK(st.deliver(2, live) == DenseVector{0.3, 0.1, -0.2, 5.0});
    CHECK(st.deliver(3, live) == live);
}

TEST_CASE("oscillating token never freezes") {
    FreezeConfig cfg;
    TokenFreezeState st;
    const SubspaceBasis b = identity_basis(2, 2);
    for (int t = 1; t <= 50; ++t)
        CHECK_FALSE(token_stability_step(st, 0, t, t % 2 ? DenseVector{4, 0} : DenseVector{0, 4}, b, cfg));
}

TEST_CASE("divergence exactly at delta_tok counts as stable") {
    // swapped components give bitwise-equal KL in both directions
    const SubspaceBasis b = identity_basis(2, 2);
    const DenseVector fa{0.3, 0.2}, fb{0.2, 0.3};
    FreezeConfig cfg;
    cfg.omega_tok = 4;
    cfg.delta_tok = kl_divergence(local_distribution(fb, b, 1.0), local_distribution(fa, b, 1.0));
    REQUIRE(cfg.delta_tok > 0.0);
    TokenFreezeState st;
    bool frozen = false;
    int t = 0;
    while (!frozen && t < 20) {
        ++t;
        frozen = token_stability_step(st, 0, t, t % 2 ? fa : fb, b, cfg);
    }
    CHECK(frozen);
    CHECK(t == cfg.omega_tok + 1);
    CHECK(st.tokens.at(0).epsilon == doctest::Approx(std::sqrt(0.02)));
}

TEST_CASE("component certificate") {
    TokenTrack one;
    one.last_q = ProbVector{{1.0}, {0}};
    one.q_window.push_back(*one.last_q);
    CHECK(local_component_certificate(one, FreezeConfig{0.05, 6, 1.0, 1}).pass);

    FreezeConfig tight{1e-4, 4, 1.0, 3};
    const ComponentCertificate c = local_component_certificate(TokenTrack{}, 0.2, tight);
    CHECK(c.budget == doctest::Approx(4 * std::sqrt(5e-5)));
    CHECK(c.pass);
    CHECK_FALSE(local_component_certificate(TokenTrack{}, 1.0, FreezeConfig{}).pass);
}

TEST_CASE("coupling probes") {
    CouplingProbe deaf;
    deaf.activation_dim = 3;
    deaf.next_step = [](int, const DenseVector&) { return ProbVector{{0.25, 0.75}, {0, 1}}; };
    CHECK(probe_coupling(deaf, 0, 1e-3, 16).beta == 0.0);
    CHECK_THROWS_AS(probe_coupling(deaf, 0, 0.0, 16), Error);
    CHECK_THROWS_AS(probe_coupling(CouplingProbe{}, 0, 1e-3, 16), Error);

    // linear response: P = base + M delta, M with zero column sums
    const double m[3][2] = {{0.4, -0.1}, {-0.3, 0.3}, {-0.1, -0.2}};
    CouplingProbe lin;
    lin.activation_dim = 2;
    lin.next_step = [&](int, const DenseVector& d) {
        ProbVector p{{0.3, 0.3, 0.4}, {0, 1, 2}};
        for (int i = 0; i < 3; ++i) p.probs[i] += m[i][0] * d[0] + m[i][1] * d[1];
        return p;
    };
    double sup = 0.0;
    for (int i = 0; i < 200000; ++i) {
        const double th = 2 * M_PI * i / 200000.0;
        double tv = 0;
        for (int r = 0; r < 3; ++r) tv += std::abs(m[r][0] * std::cos(th) + m[r][1] * std::sin(th));
        sup = std::max(sup, tv / 2);
    }
    const CouplingEstimate est = probe_coupling(lin, 0, 1e-3, 4000, 5);
    CHECK(est.beta <= sup + 1e-9);
    CHECK(est.beta >= sup * 0.999);

    const CouplingEstimate pooled = pooled_coupling({est, CouplingEstimate{0.01, 1e-3, 4}});
    CHECK(pooled.beta == est.beta);
}

TEST_CASE("freeze safety") {
    TokenTrack tr;
    tr.epsilon = 0.05;
    const FreezeSafetyReport r = freeze_safety(1, tr, CouplingEstimate{0.1, 1e-3, 8}, 0.5, {1e-4, 4}, 0.3);
    CHECK(r.bound == doctest::Approx(0.01));
    CHECK(r.combined == doctest::Approx(tv_budget(1e-4, 4) + 0.01));
    CHECK(r.safe);

    TokenTrack still;
    const FreezeSafetyReport z = freeze_safety(1, still, CouplingEstimate{5.0, 1e-3, 8}, 0.5, {1e-4, 4}, 0.3);
    CHECK(z.bound == 0.0);
    CHECK(z.safe == local_certificate_holds(0.3, {1e-4, 4}));
    CHECK_THROWS_AS(freeze_safety(1, tr, CouplingEstimate{}, 1.0, {1e-4, 4}, 0.3), Error);
}
