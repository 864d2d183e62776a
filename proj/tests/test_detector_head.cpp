#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <unistd.h>

#include "docklab/detector_head.hpp"
#include "docklab/errors.hpp"
#include "docklab/rng.hpp"

using namespace docklab;

namespace {

// Straightforward re-evaluation of the softmax chain, written without the
// max-subtraction trick or any shared code with the implementation.
std::vector<double> probs_oracle(const Matrix& features, const HeadParameters& params,
                                 const Matrix& prior) {
    const std::size_t p = features.rows();
    const std::size_t c = params.class_count();
    const std::size_t d = features.cols();
    Matrix lr(p, c), ld(p, c);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            double zr = params.b_r[j], zd = params.b_d[j];
            for (std::size_t k = 0; k < d; ++k) {
                zr += features(i, k) * params.w_r(k, j);
                zd += features(i, k) * params.w_d(k, j);
            }
            lr(i, j) = zr;
            ld(i, j) = zd;
        }
    }
    std::vector<double> probs(c, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) row_sum += std::exp(lr(i, j));
        for (std::size_t j = 0; j < c; ++j) {
            double col_sum = 0.0;
            for (std::size_t m = 0; m < p; ++m) col_sum += std::exp(ld(m, j));
            const double xr = std::exp(lr(i, j)) / row_sum;
            const double xd = std::exp(ld(i, j)) / col_sum;
            probs[j] += prior(i, j) * xr * xd;
        }
    }
    return probs;
}

HeadParameters random_params(Rng& rng, std::size_t d, std::size_t c) {
    HeadParameters params = init_head_parameters(d, c, rng.next_u64());
    for (auto& v : params.b_r) v = rng.gaussian(0, 0.1);
    for (auto& v : params.b_d) v = rng.gaussian(0, 0.1);
    return params;
}

struct Instance {
    Matrix features, prior;
    std::vector<double> labels;
};

Instance random_instance(Rng& rng, std::size_t p, std::size_t c, std::size_t d) {
    Instance in;
    in.features = Matrix(p, d);
    for (auto& v : in.features.data()) v = rng.gaussian();
    in.prior = Matrix(p, c);
    for (auto& v : in.prior.data()) v = rng.uniform(0.01, 1.0);
    in.labels.resize(c);
    for (auto& v : in.labels) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return in;
}

double loss_of(const Matrix& features, const HeadParameters& params, const Matrix& prior,
               const std::vector<double>& labels, double eps) {
    return bce_loss(forward(features, params, prior).probs, labels, eps);
}

}  // namespace

TEST_CASE("forward with a single proposal reduces to the recognition stream") {
    Rng rng(51);
    HeadParameters params = random_params(rng, 3, 4);
    Matrix f(1, 3);
    for (auto& v : f.data()) v = rng.gaussian();
    Matrix prior(1, 4);
    for (auto& v : prior.data()) v = rng.uniform(0.01, 1.0);
    ForwardTrace t = forward(f, params, prior);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(t.x_d(0, j) == doctest::Approx(1.0));
        CHECK(t.x(0, j) == doctest::Approx(t.x_r(0, j)));
        CHECK(t.probs[j] == doctest::Approx(prior(0, j) * t.x_r(0, j)));
    }
}

TEST_CASE("forward with zero parameters is fully symmetric") {
    HeadParameters params;
    params.w_r = Matrix(3, 2);
    params.w_d = Matrix(3, 2);
    params.b_r = {0, 0};
    params.b_d = {0, 0};
    Matrix f(4, 3);
    for (auto& v : f.data()) v = 1.0;
    ForwardTrace t = forward(f, params, Matrix(4, 2, 1.0));
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            CHECK(t.x_r(i, j) == doctest::Approx(0.5));
            CHECK(t.x_d(i, j) == doctest::Approx(0.25));
            CHECK(t.x(i, j) == doctest::Approx(0.125));
        }
    }
    CHECK(t.probs[0] == doctest::Approx(0.5));
    CHECK(t.probs[1] == doctest::Approx(0.5));
}

TEST_CASE("forward matches an independent re-evaluation to 1e-12") {
    Rng rng(52);
    for (int i = 0; i < 20; ++i) {
        const std::size_t p = 1 + rng.index(6);
        const std::size_t c = 1 + rng.index(4);
        const std::size_t d = 2 + rng.index(5);
        HeadParameters params = random_params(rng, d, c);
        Instance in = random_instance(rng, p, c, d);
        ForwardTrace t = forward(in.features, params, in.prior);
        auto oracle = probs_oracle(in.features, params, in.prior);
        for (std::size_t j = 0; j < c; ++j) {
            CHECK(t.probs[j] == doctest::Approx(oracle[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("forward normalization invariants hold under fuzz") {
    Rng rng(53);
    for (int i = 0; i < 300; ++i) {
        const std::size_t p = 1 + rng.index(8);
        const std::size_t c = 1 + rng.index(6);
        const std::size_t d = 2 + rng.index(8);
        HeadParameters params = random_params(rng, d, c);
        Instance in = random_instance(rng, p, c, d);
        // Include large-magnitude features to stress softmax stability.
        if (i % 3 == 0) {
            for (auto& v : in.features.data()) v *= 50.0;
        }
        ForwardTrace t = forward(in.features, params, in.prior);
        for (std::size_t r = 0; r < p; ++r) {
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) sum += t.x_r(r, j);
            CHECK(std::abs(sum - 1.0) <= 1e-9);
        }
        for (std::size_t j = 0; j < c; ++j) {
            double sum = 0.0;
            for (std::size_t r = 0; r < p; ++r) sum += t.x_d(r, j);
            CHECK(std::abs(sum - 1.0) <= 1e-9);
            CHECK(t.probs[j] >= 0.0);
            CHECK(t.probs[j] <= 1.0);
        }
    }
}

TEST_CASE("forward rejects non-finite features") {
    HeadParameters params = init_head_parameters(2, 2, 1);
    Matrix f(1, 2);
    f(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(forward(f, params, Matrix(1, 2, 1.0)), NumericError);
}

TEST_CASE("bce_loss closed forms and domain checks") {
    CHECK(bce_loss({0.5}, {1.0}, 1e-8) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // Perfect agreement costs only the clamp epsilon.
    CHECK(bce_loss({1.0}, {1.0}, 1e-8) == doctest::Approx(1e-8).epsilon(1e-3));
    CHECK(bce_loss({0.9, 0.2}, {1.0, 0.0}, 1e-8) ==
          doctest::Approx(-std::log(0.9) - std::log(0.8)).epsilon(1e-6));
    CHECK(bce_loss({0.9, 0.2}, {1.0, 0.0}, 1e-8) == doctest::Approx(0.328504).epsilon(1e-5));
    CHECK_THROWS_AS(bce_loss({0.5}, {0.5}, 1e-8), std::invalid_argument);
    CHECK_THROWS_AS(bce_loss({0.5}, {1.0}, 0.7), std::invalid_argument);
}

TEST_CASE("backward with an all-zero prior is exactly zero") {
    Rng rng(54);
    HeadParameters params = random_params(rng, 4, 3);
    Instance in = random_instance(rng, 5, 3, 4);
    Matrix zero_prior(5, 3, 0.0);
    ForwardTrace t = forward(in.features, params, zero_prior);
    HeadGradients g = backward(t, in.labels, zero_prior, 1e-8);
    for (double v : g.w_r.data()) CHECK(v == 0.0);
    for (double v : g.w_d.data()) CHECK(v == 0.0);
    for (double v : g.b_r) CHECK(v == 0.0);
    for (double v : g.b_d) CHECK(v == 0.0);
}

TEST_CASE("backward matches central finite differences") {
    Rng rng(55);
    const double h = 1e-6;
    const double eps = 1e-8;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t p = 1 + rng.index(6);
        const std::size_t c = 1 + rng.index(4);
        const std::size_t d = 2 + rng.index(6);
        HeadParameters params = random_params(rng, d, c);
        Instance in = random_instance(rng, p, c, d);

        ForwardTrace t = forward(in.features, params, in.prior);
        HeadGradients g = backward(t, in.labels, in.prior, eps);

        auto check_param = [&](double* slot, double analytic) {
            const double save = *slot;
            *slot = save + h;
            const double up = loss_of(in.features, params, in.prior, in.labels, eps);
            *slot = save - h;
            const double down = loss_of(in.features, params, in.prior, in.labels, eps);
            *slot = save;
            const double fd = (up - down) / (2.0 * h);
            const double rel =
                std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-5});
            CHECK(rel < 1e-4);
        };
        for (std::size_t i = 0; i < d * c; ++i) {
            check_param(&params.w_r.data()[i], g.w_r.data()[i]);
            check_param(&params.w_d.data()[i], g.w_d.data()[i]);
        }
        for (std::size_t j = 0; j < c; ++j) {
            check_param(&params.b_r[j], g.b_r[j]);
            check_param(&params.b_d[j], g.b_d[j]);
        }
    }
}

TEST_CASE("loss and gradients are invariant under proposal permutation") {
    Rng rng(56);
    const std::size_t p = 6, c = 3, d = 4;
    HeadParameters params = random_params(rng, d, c);
    Instance in = random_instance(rng, p, c, d);

    const double base_loss = loss_of(in.features, params, in.prior, in.labels, 1e-8);
    ForwardTrace t = forward(in.features, params, in.prior);
    HeadGradients g = backward(t, in.labels, in.prior, 1e-8);

    std::vector<std::size_t> perm(p);
    for (std::size_t i = 0; i < p; ++i) perm[i] = i;
    rng.shuffle(perm);
    Instance permuted = in;
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            permuted.features(i, k) = in.features(perm[i], k);
        }
        for (std::size_t j = 0; j < c; ++j) permuted.prior(i, j) = in.prior(perm[i], j);
    }
    const double perm_loss =
        loss_of(permuted.features, params, permuted.prior, in.labels, 1e-8);
    CHECK(perm_loss == doctest::Approx(base_loss).epsilon(1e-12));

    ForwardTrace t2 = forward(permuted.features, params, permuted.prior);
    HeadGradients g2 = backward(t2, in.labels, permuted.prior, 1e-8);
    for (std::size_t i = 0; i < d * c; ++i) {
        CHECK(g2.w_r.data()[i] == doctest::Approx(g.w_r.data()[i]).epsilon(1e-10));
        CHECK(g2.w_d.data()[i] == doctest::Approx(g.w_d.data()[i]).epsilon(1e-10));
    }
}

TEST_CASE("all-ones prior is bit-identical to omitting the prior entirely") {
    // Independent base-network forward: no prior anywhere in the chain.
    Rng rng(57);
    const std::size_t p = 5, c = 3, d = 4;
    HeadParameters params = random_params(rng, d, c);
    Instance in = random_instance(rng, p, c, d);
    Matrix ones(p, c, 1.0);

    ForwardTrace t = forward(in.features, params, ones);
    auto oracle = probs_oracle(in.features, params, ones);
    for (std::size_t j = 0; j < c; ++j) {
        // x_r * x_d summed without any prior multiplication.
        double sum = 0.0;
        for (std::size_t i = 0; i < p; ++i) sum += t.x_r(i, j) * t.x_d(i, j);
        CHECK(t.probs[j] == std::clamp(sum, 0.0, 1.0));  // bitwise
        CHECK(t.probs[j] == doctest::Approx(oracle[j]).epsilon(1e-12));
    }
}

TEST_CASE("sgd_step arithmetic") {
    HeadParameters params;
    params.w_r = Matrix(1, 1, 1.0);
    params.w_d = Matrix(1, 1, 1.0);
    params.b_r = {1.0};
    params.b_d = {1.0};
    HeadGradients g;
    g.w_r = Matrix(1, 1, 2.0);
    g.w_d = Matrix(1, 1, 2.0);
    g.b_r = {2.0};
    g.b_d = {2.0};
    HeadParameters before = params;
    sgd_step(params, g, 0.0);
    CHECK(params == before);
    sgd_step(params, g, 0.1);
    CHECK(params.w_r(0, 0) == doctest::Approx(0.8));
    CHECK(params.b_d[0] == doctest::Approx(0.8));
}

TEST_CASE("concat_prior_features appends detector then attribute scores") {
    SourceModelBank bank;
    bank.source_order = {"a", "b"};
    bank.attribute_order = {"white"};
    for (const auto& n : bank.source_order) {
        StubScorer s;
        s.weights = {1.0, 0.0};
        s.bias = n == "a" ? 0.5 : -0.5;
        bank.detectors[n] = s;
    }
    StubScorer attr;
    attr.weights = {0.0, 1.0};
    attr.bias = 0.0;
    bank.attributes["white"] = attr;

    Matrix f(1, 2);
    f(0, 0) = 0.3;
    f(0, 1) = -0.2;
    Matrix out = concat_prior_features(f, bank);
    REQUIRE(out.cols() == 5);
    CHECK(out(0, 0) == 0.3);
    CHECK(out(0, 1) == -0.2);
    CHECK(out(0, 2) == score_proposals(bank.detectors["a"], f)[0]);
    CHECK(out(0, 3) == score_proposals(bank.detectors["b"], f)[0]);
    CHECK(out(0, 4) == score_proposals(bank.attributes["white"], f)[0]);
}

TEST_CASE("concat dimensionality for a 20-detector 25-attribute bank is 45 extra") {
    SourceModelBank bank;
    for (int i = 0; i < 20; ++i) {
        StubScorer s;
        s.weights = {0.1};
        bank.source_order.push_back("d" + std::to_string(i));
        bank.detectors[bank.source_order.back()] = s;
    }
    for (int i = 0; i < 25; ++i) {
        StubScorer s;
        s.weights = {0.2};
        bank.attribute_order.push_back("a" + std::to_string(i));
        bank.attributes[bank.attribute_order.back()] = s;
    }
    Matrix f(2, 1, 0.5);
    CHECK(concat_prior_features(f, bank).cols() == 1 + 45);

    SourceModelBank detectors_only = bank;
    detectors_only.attribute_order.clear();
    detectors_only.attributes.clear();
    CHECK(concat_prior_features(f, detectors_only).cols() == 1 + 20);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    Rng rng(58);
    Checkpoint ckpt;
    ckpt.params = random_params(rng, 7, 3);
    ckpt.seed = 123456789ULL;
    ckpt.epoch = 30;

    const std::string path =
        (std::filesystem::temp_directory_path() /
         ("docklab_ckpt_" + std::to_string(::getpid()) + ".bin"))
            .string();
    save_checkpoint(path, ckpt);
    Checkpoint back = load_checkpoint(path);
    CHECK(back.params == ckpt.params);
    CHECK(back.seed == ckpt.seed);
    CHECK(back.epoch == ckpt.epoch);
    std::filesystem::remove(path);
}
