#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "edit/diffusion.hpp"

namespace edit::testing {

/// Small enough for finite differences and sub-second generation.
inline ModelConfig tiny_config(std::uint64_t seed = 1) {
    ModelConfig c;
    c.vocab_size = 24;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ff = 24;
    c.lora_rank = 2;
    c.block_length = 4;
    c.max_blocks = 2;
    c.max_positions = 24;
    c.seed = seed;
    return c;
}

inline void randomize_lora(ToyModel& m, std::uint64_t seed, double sd = 0.3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    for (ParamRef& r : lora_tensors(m.params()))
        for (Eigen::Index i = 0; i < r.value.size(); ++i) r.value.data()[i] = n(rng);
}

inline std::vector<int> random_tokens(const ModelConfig& c, int n, std::uint64_t seed, double mask_rate = 0.3) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> tok(kFirstContentToken, c.vocab_size - 1);
    std::bernoulli_distribution masked(mask_rate);
    std::vector<int> out(n);
    for (int& t : out) t = masked(rng) ? kMaskToken : tok(rng);
    return out;
}

struct FdReport {
    int checked = 0;
    int skipped_tiny = 0;
    double worst_rel = 0.0;
    std::string worst_where;
};

/// Central differences on random coordinates of `params`, compared with the
/// analytic `grads` (same names, same order). Coordinates whose gradient is
/// below `tiny` in magnitude are skipped and counted: the relative error is
/// meaningless there.
inline FdReport fd_check(std::vector<ParamRef> params, std::vector<ParamRef> grads, const std::function<double()>& f,
                         int wanted, std::uint64_t seed, double h = 1e-5, double tiny = 1e-6) {
    FdReport rep;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick_tensor(0, params.size() - 1);
    int attempts = 0;
    while (rep.checked < wanted && attempts < wanted * 50) {
        ++attempts;
        const std::size_t t = pick_tensor(rng);
        std::uniform_int_distribution<Eigen::Index> pick(0, params[t].value.size() - 1);
        const Eigen::Index i = pick(rng);
        const double g = grads[t].value.data()[i];
        if (std::abs(g) < tiny) {
            ++rep.skipped_tiny;
            continue;
        }
        double& x = params[t].value.data()[i];
        const double x0 = x;
        x = x0 + h;
        const double fp = f();
        x = x0 - h;
        const double fm = f();
        x = x0;
        const double fd = (fp - fm) / (2 * h);
        const double rel = std::abs(fd - g) / std::max(std::abs(fd), std::abs(g));
        if (rel > rep.worst_rel) {
            rep.worst_rel = rel;
            rep.worst_where = params[t].name + "[" + std::to_string(i) + "]";
        }
        ++rep.checked;
    }
    return rep;
}

/// p(r) = pi + a^r d for r = 0..n-1 on support 0..k-1.
inline std::vector<ProbVector> geometric_chain(const std::vector<double>& pi, const std::vector<double>& d, double a,
                                               int n) {
    std::vector<ProbVector> out;
    double ar = 1.0;
    for (int r = 0; r < n; ++r) {
        ProbVector p;
        for (std::size_t i = 0; i < pi.size(); ++i) {
            p.probs.push_back(pi[i] + ar * d[i]);
            p.support.push_back(static_cast<int>(i));
        }
        out.push_back(std::move(p));
        ar *= a;
    }
    return out;
}

/// Uniform draw from the simplex of dimension k.
inline std::vector<double> random_simplex(std::mt19937_64& rng, int k) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> x(k);
    double s = 0;
    for (double& v : x) s += (v = e(rng));
    for (double& v : x) v /= s;
    return x;
}

/// Zero-sum direction with unit l1 norm.
inline std::vector<double> random_zero_sum(std::mt19937_64& rng, int k) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> d(k);
    double mean = 0;
    for (double& v : d) mean += (v = n(rng)) / k;
    double l1 = 0;
    for (double& v : d) l1 += std::abs(v -= mean);
    for (double& v : d) v /= l1;
    return d;
}

}  // namespace edit::testing
