#include <limits>
#include <sstream>

#include "doctest.h"
#include "edit/pseudo_grad.hpp"
#include "support.hpp"

using namespace edit;
using namespace edit::testing;

namespace {

struct Setup {
    ToyModel model{tiny_config(7)};
    SyntheticTask task;
    GenerateOptions opts;

    Setup() {
        randomize_lora(model, 5, 0.2);
        task.seq_len = 8;
        task.alphabet = 6;
        std::mt19937_64 rng(3);
        std::normal_distribution<double> n(0.0, 1.0);
        EvolutionVector u;
        u.module_id = "L1.q.B";
        u.d_out = 16;
        u.rank = 2;
        for (int i = 0; i < 16; ++i) u.u.push_back(std::abs(n(rng)));
        opts.map = u;
        opts.steps_per_block = 8;
        opts.stop.omega = 2;
        DenseMatrix cols(16, 2);
        for (double& x : cols.data()) x = n(rng);
        opts.freeze_basis = build_subspace(cols, 2, "L1.q.B");
        opts.freeze.k = 2;
    }
};

}  // namespace

TEST_CASE("fixed schedule grows the visible set and uses the whole budget") {
    Setup s;
    const TaskSample x = s.task.sample(1);
    GenerateOptions o = s.opts;
    o.steps_per_block = 4;  // L = 4, one token per step
    const DenoiseTrajectory t = denoise_block(s.model, x.prompt, 0, o);
    REQUIRE(t.steps.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(t.steps[i].visible.size() == static_cast<std::size_t>(i + 1));
    CHECK(t.steps_used == 4);
    CHECK_FALSE(t.final_pass);
    for (int tok : t.final_block) CHECK(tok >= kFirstContentToken);

    const GenerationResult g = generate(s.model, x.prompt, 8, s.opts);
    CHECK(g.steps_per_block == std::vector<int>{8, 8});
    CHECK(g.output.size() == 8);
    const GenerationResult again = generate(s.model, x.prompt, 8, s.opts);
    CHECK(again.output == g.output);
}

TEST_CASE("limit thresholds") {
    Setup s;
    const TaskSample x = s.task.sample(2);
    GenerateOptions fixed = s.opts;
    GenerateOptions never = s.opts;
    never.policy = StopPolicy::edit;
    never.stop.delta = StopConfig::never_stable();
    const GenerationResult a = generate(s.model, x.prompt, 8, fixed);
    const GenerationResult b = generate(s.model, x.prompt, 8, never);
    CHECK(a.steps_per_block == b.steps_per_block);
    CHECK(a.output == b.output);

    GenerateOptions always = s.opts;
    always.policy = StopPolicy::edit;
    always.stop.delta = StopConfig::always_stable();
    const GenerationResult c = generate(s.model, x.prompt, 8, always);
    CHECK(c.steps_per_block == std::vector<int>{3, 3});
    CHECK(c.blocks[0].final_pass);
    CHECK(c.blocks[0].steps.size() == 3);
    REQUIRE(c.blocks[0].certificate.has_value());
    CHECK(c.blocks[0].certificate->stop_step == 3);
}

TEST_CASE("edit policy needs a map") {
    Setup s;
    GenerateOptions o = s.opts;
    o.policy = StopPolicy::edit;
    o.map.reset();
    CHECK_THROWS_AS(generate(s.model, s.task.sample(1).prompt, 8, o), Error);
}

TEST_CASE("freeze events pin activations") {
    Setup s;
    GenerateOptions o = s.opts;
    o.policy = StopPolicy::edit_freeze;
    o.stop.delta = StopConfig::never_stable();
    o.freeze.delta_tok = 1e9;  // every comparable step counts
    o.freeze.omega_tok = 1;
    o.steps_per_block = 8;
    const DenoiseTrajectory t = denoise_block(s.model, s.task.sample(4).prompt, 0, o);
    CHECK_FALSE(t.freezes.empty());
    for (const FreezeEvent& ev : t.freezes) {
        // frozen tokens report the pinned activation on every later frame
        for (const StepRecord& r : t.steps) {
            if (r.step <= ev.step) continue;
            const DenseVector& later = r.frame.activation_of(ev.token);
            const StepRecord& at = t.steps[ev.step - 1];
            CHECK(later == at.frame.activation_of(ev.token));
        }
    }
}

TEST_CASE("pseudo-gradient matches finite differences") {
    Setup s;
    GenerateOptions o = s.opts;
    o.steps_per_block = 4;
    const DenoiseTrajectory t = denoise_block(s.model, s.task.sample(5).prompt, 0, o);
    for (bool both : {false, true}) {
        PseudoGradOptions po;
        po.differentiate_both = both;
        for (int step = 1; step <= 3; ++step) {
            const DenseMatrix g = pseudo_gradient(s.model, t, step, po);
            ToyModel& m = s.model;
            Mat& b = m.params().layers[1].lora[0].b;
            for (Eigen::Index i = 0; i < b.size(); i += 5) {
                const double x0 = b.data()[i];
                b.data()[i] = x0 + 1e-5;
                const double fp = pseudo_objective(m, t, step, po);
                b.data()[i] = x0 - 1e-5;
                const double fm = pseudo_objective(m, t, step, po);
                b.data()[i] = x0;
                const double fd = (fp - fm) / 2e-5;
                const double an = g.data()[i];
                if (std::max(std::abs(fd), std::abs(an)) < 1e-7) continue;
                CHECK(std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)) < 1e-4);
            }
        }
    }
    CHECK_THROWS_AS(pseudo_gradient(s.model, t, 4), Error);
    DenoiseTrajectory empty;
    CHECK_THROWS_AS(pseudo_gradient(s.model, empty, 1), Error);
}

TEST_CASE("identical consecutive steps give a zero pseudo-gradient") {
    Setup s;
    GenerateOptions o = s.opts;
    o.steps_per_block = 8;  // after step 4 the block is full and the input repeats
    const DenoiseTrajectory t = denoise_block(s.model, s.task.sample(6).prompt, 0, o);
    PseudoGradOptions po;
    CHECK(pseudo_objective(s.model, t, 5, po) == doctest::Approx(0.0).scale(1.0));
    CHECK(rms(pseudo_gradient(s.model, t, 5, po)) < 1e-15);
}

TEST_CASE("rms, band and convergence") {
    CHECK(rms(DenseMatrix(2, 2)) == 0.0);
    CHECK(rms(DenseMatrix(2, 3, 3.0)) == doctest::Approx(3.0));
    CHECK(rms(DenseMatrix(2, 2, std::vector<double>{3, 4, 0, 0})) == doctest::Approx(2.5));
    CHECK_THROWS_AS(rms(DenseMatrix()), Error);

    const SftBand c = sft_band({2.5, 2.5, 2.5});
    CHECK(c.mu_sft == 2.5);
    CHECK(c.sigma_sft == 0.0);
    CHECK(c.contains(2.5));
    const SftBand b = sft_band({1, 3});
    CHECK(b.mu_sft == 2.0);
    CHECK(b.sigma_sft == doctest::Approx(std::sqrt(2.0)));
    CHECK_THROWS_AS(sft_band({1.0}), Error);

    CHECK(detect_convergence({2, 2, 2, 2}, b, 3) == 0);
    CHECK_FALSE(detect_convergence({9, 9, 9}, b, 3).has_value());
    std::vector<double> trace(19, 50.0);
    trace.resize(30, 2.0);
    CHECK(detect_convergence(trace, b, 3) == 19);

    std::ostringstream out;
    PseudoGradTrace pg{{1, 2}, {0.5, 2.0}, {false, true}, 2};
    write_pseudo_grad_csv(out, pg);
    CHECK(out.str() == "step,rms,in_band,t_conv\n1,0.5,0,2\n2,2,1,2\n");
}
