#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "edit/certificates.hpp"

using namespace edit;

namespace {

ProbVector pv(std::vector<double> p, std::vector<int> support = {}) {
    ProbVector out;
    out.probs = std::move(p);
    if (support.empty())
        for (std::size_t i = 0; i < out.probs.size(); ++i) support.push_back(static_cast<int>(i));
    out.support = std::move(support);
    return out;
}

// p(r) = pi + a^r d on a fixed support
std::vector<ProbVector> geometric(const std::vector<double>& pi, const std::vector<double>& d, double a, int n) {
    std::vector<ProbVector> out;
    for (int r = 0; r < n; ++r) {
        std::vector<double> p(pi.size());
        for (std::size_t i = 0; i < pi.size(); ++i) p[i] = pi[i] + std::pow(a, r) * d[i];
        out.push_back(pv(p));
    }
    return out;
}

}  // namespace

TEST_CASE("margin report") {
    const MarginReport m = margin_report(pv({0.2, 0.5, 0.3}, {4, 6, 9}), 3);
    CHECK(m.argmax_index == 6);
    CHECK(m.margin == doctest::Approx(0.2));
    CHECK(margin_report(pv({1.0}, {7})).margin == 1.0);
    CHECK(margin_report(pv({0.5, 0.5})).margin == 0.0);
}

TEST_CASE("tv budget") {
    CHECK(tv_budget(0.02, 1) == doctest::Approx(0.1));
    CHECK(tv_budget(0.05, 6) == doctest::Approx(6 * std::sqrt(0.025)));
    CHECK(tv_budget(0.05, 6) == doctest::Approx(0.9486832).epsilon(1e-7));
    CHECK(tv_budget(0.0, 6) == 0.0);
}

TEST_CASE("run-length bound") {
    StabilityState st;
    std::vector<ProbVector> ds;
    for (int t = 1; t <= 7; ++t) {
        ds.push_back(pv({0.3, 0.7}));
        if (t > 1) st.divergence_trace.push_back({t, 0.0, 2, t - 1, false});
    }
    const RunLengthCheck c = verify_runlength_bound(st, ds, {0.05, 6});
    CHECK(c.pass);
    CHECK(c.actual_tv == 0.0);
    CHECK_THROWS_AS(verify_runlength_bound(st, ds, {0.05, 8}), Error);

    // omega = 1 is Pinsker
    StabilityState one;
    const ProbVector p = pv({0.4, 0.6}), q = pv({0.45, 0.55});
    const double kl = kl_divergence(q, p);
    one.divergence_trace.push_back({2, kl, 2, 1, true});
    const RunLengthCheck c1 = verify_runlength_bound(one, {p, q}, {kl * 1.01, 1});
    CHECK(c1.pass);
    CHECK(c1.actual_tv <= std::sqrt(kl / 2) + 1e-12);
    CHECK_THROWS_AS(verify_runlength_bound(one, {p, q}, {kl, 1}), Error);
}

TEST_CASE("local certificate arithmetic") {
    CHECK(local_certificate_holds(1.0, {0.05, 6}) == false);  // needs margin > 1.897
    CHECK(local_certificate_holds(1.0, {0.001, 6}));
    CHECK(local_certificate_holds(0.1, {1e-4, 6}));
    CHECK_FALSE(local_certificate_holds(0.0, {1e-12, 1}));

    std::vector<ProbVector> window(4, pv({0.2, 0.8}));
    const LocalCertificate lc = local_argmax_certificate(window, margin_report(window.back()), {1e-4, 3});
    CHECK(lc.pass);
    CHECK(lc.replay_consistent);
}

TEST_CASE("contraction estimate") {
    const auto chain = geometric({0.5, 0.3, 0.2}, {0.1, -0.05, -0.05}, 0.5, 12);
    CHECK(estimate_contraction({chain}).alpha_hat == doctest::Approx(0.5).epsilon(1e-9));

    std::vector<ProbVector> flat(5, pv({0.5, 0.5}));
    CHECK_THROWS_AS(estimate_contraction({flat}), Error);

    // mixed traces: brute-force max ratio
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<std::vector<ProbVector>> traces;
    double oracle = 0.0;
    for (int k = 0; k < 6; ++k) {
        std::vector<ProbVector> tr;
        for (int r = 0; r < 6; ++r) {
            const double a = u(rng), b = u(rng), c = u(rng);
            tr.push_back(pv({a / (a + b + c), b / (a + b + c), c / (a + b + c)}));
        }
        for (int r = 1; r + 1 < 6; ++r)
            oracle = std::max(oracle, total_variation(tr[r + 1], tr[r]) / total_variation(tr[r], tr[r - 1]));
        traces.push_back(tr);
    }
    CHECK(estimate_contraction(traces).alpha_hat == oracle);
}

TEST_CASE("tail budget") {
    CHECK(tail_budget(0.0, 0.02) == doctest::Approx(0.1));
    CHECK(tail_budget(0.5, 0.02) == doctest::Approx(0.2));
    CHECK(tail_budget(0.99, 0.02) == doctest::Approx(10.0));
    CHECK(tail_budget(0.5, 0.02, 2) == doctest::Approx(0.05));
    CHECK_THROWS_AS(tail_budget(1.0, 0.02), Error);
    CHECK_THROWS_AS(tail_budget(-0.1, 0.02), Error);
}

TEST_CASE("global certificate") {
    CHECK(global_argmax_certificate(1.0, {1e-4, 2}, 0.0));
    CHECK_FALSE(global_argmax_certificate(0.0, {1e-8, 1}, 0.0));
    CHECK_FALSE(global_argmax_certificate(0.5, {1e-4, 6}, 0.99));
}

TEST_CASE("lipschitz observables") {
    LipschitzObservable indicator{"p0", [](const ProbVector& p) { return p.probs[0]; }, 1.0};
    CHECK(lipschitz_violation(indicator, 4, 2000, 3) <= 1e-9);
    LipschitzObservable payoff{"payoff",
                               [](const ProbVector& p) {
                                   double s = 0;
                                   for (std::size_t i = 0; i < p.size(); ++i) s += p.probs[i] * (10.0 * i / (p.size() - 1));
                                   return s;
                               },
                               10.0};
    CHECK(lipschitz_violation(payoff, 5, 2000, 4) <= 1e-9);
    LipschitzObservable cheat = payoff;
    cheat.lipschitz_constant = 1.0;
    CHECK(lipschitz_violation(cheat, 5, 2000, 4) > 0.0);

    const LipschitzBounds b1 = lipschitz_stability_bound(indicator, {0.02, 3}, 0.5);
    CHECK(b1.window_bound == doctest::Approx(tv_budget(0.02, 3)));
    CHECK(*b1.tail_bound == doctest::Approx(tail_budget(0.5, 0.02)));
    CHECK(lipschitz_stability_bound(payoff, {0.02, 3}).window_bound == doctest::Approx(10 * tv_budget(0.02, 3)));
    LipschitzObservable constant{"c", [](const ProbVector&) { return 2.0; }, 0.0};
    CHECK(lipschitz_stability_bound(constant, {0.02, 3}, 0.5).window_bound == 0.0);
}

TEST_CASE("margin quantile and admissibility") {
    CHECK(margin_quantile({0.1, 0.9}, 0.5) == 0.9);
    CHECK(margin_quantile(std::vector<double>(10, 1.0), 0.1) == 1.0);
    std::vector<double> ramp;
    for (int i = 1; i <= 100; ++i) ramp.push_back(i / 100.0);
    CHECK(margin_quantile(ramp, 0.1) == doctest::Approx(0.11));  // 90 of 100 are >= 0.11
    CHECK_THROWS_AS(margin_quantile({}, 0.1), Error);
    CHECK(pac_admissible({0.02, 4}, 0.0, 1.0));  // 0.4 + 0.1 <= 0.5, equality allowed
    CHECK_FALSE(pac_admissible({0.02, 5}, 0.0, 1.0));
}

TEST_CASE("pac calibration") {
    const std::vector<double> ones(50, 1.0);
    const CalibrationResult r = calibrate_pac(ones, 0.1, 0.0, {0.001, 0.005, 0.02}, {2, 4, 6});
    for (const Thresholds& t : r.admissible_pairs) CHECK((t.omega + 1) * std::sqrt(t.delta / 2) <= 0.5 + 1e-15);
    CHECK(r.admissible_pairs.size() == 8);  // all of 0.001 and 0.005, omega 2 and 4 at 0.02
    CHECK(r.chosen.omega == 2);
    CHECK(r.chosen.delta == 0.02);

    CHECK_THROWS_AS(calibrate_pac(std::vector<double>(50, 0.1), 0.1, 0.0, default_delta_grid(), default_omega_grid()),
                    Error);
    CHECK_THROWS_AS(calibrate_pac(ones, 0.1, 1.0, {0.001}, {2}), Error);

    const CalibrationResult back = calibration_from_json(to_json(r));
    CHECK(back.chosen.delta == r.chosen.delta);
    CHECK(back.admissible_pairs.size() == r.admissible_pairs.size());
}

TEST_CASE("certify stop and fraction") {
    const Certificate c = certify_stop(9, {1e-4, 2}, pv({0.1, 0.9}), 0.0);
    CHECK(c.local_pass);
    CHECK(*c.global_pass);
    CHECK(*c.pac_pass);
    const Certificate none = certify_stop(9, {0.05, 6}, pv({0.1, 0.9}), std::nullopt);
    CHECK_FALSE(none.local_pass);
    CHECK_FALSE(none.global_pass.has_value());
    const Certificate weak = certify_stop(9, {1e-4, 2}, pv({0.1, 0.9}), 1.5);
    CHECK_FALSE(*weak.global_pass);

    std::vector<Certificate> all(1000, c);
    CHECK(certified_stop_fraction(all) == 1.0);
    for (int i = 0; i < 277; ++i) all[i].pac_pass = false;
    CHECK(certified_stop_fraction(all) == doctest::Approx(0.723));
    for (Certificate& x : all) x.pac_pass = false;
    CHECK(certified_stop_fraction(all) == 0.0);

    const Certificate rt = certificate_from_json(to_json(c));
    CHECK(rt.stop_step == 9);
    CHECK(rt.margin_report.margin == doctest::Approx(c.margin_report.margin));
    CHECK(rt.global_pass == c.global_pass);
}

TEST_CASE("singleton supports always certify") {
    const ProbVector one = pv({1.0}, {3});
    const Certificate c = certify_stop(7, {0.05, 6}, one, 0.9);
    CHECK(c.margin_report.margin == 1.0);
    CHECK(c.local_pass);
    CHECK(*c.global_pass);
    std::vector<ProbVector> window(7, one);
    CHECK(local_argmax_certificate(window, margin_report(one), {0.05, 6}).pass);
}
