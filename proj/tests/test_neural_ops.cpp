#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "coved/adam.hpp"
#include "coved/gradcheck.hpp"
#include "coved/ops.hpp"
#include "coved/rng.hpp"

#include "support/helpers.hpp"

using namespace coved;
using coved::testing::all_finite;

namespace {

// independent closed-form KL for the Monte-Carlo cross-check
double mc_gaussian_kl(double mu_q, double logvar_q, double mu_p, double logvar_p,
                      std::size_t n, Rng& rng) {
    const double sq = std::exp(0.5 * logvar_q);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = mu_q + sq * rng.normal();
        const double lq = -0.5 * (logvar_q + (x - mu_q) * (x - mu_q) / std::exp(logvar_q));
        const double lp = -0.5 * (logvar_p + (x - mu_p) * (x - mu_p) / std::exp(logvar_p));
        acc += lq - lp;
    }
    return acc / static_cast<double>(n);
}

}  // namespace

TEST_CASE("gru cell with zero weights and zero state returns zero") {
    ParameterStore store;
    Rng rng(1);
    GruParams p = make_gru_params(store, "gru", 3, 4, rng);
    for (auto& param : store.list())
        std::fill(param->value.begin(), param->value.end(), 0.0);

    Graph g;
    GruRef w = use_gru(g, p, false);
    Tensor x = g.input({3}, std::vector<double>{0.3, -0.2, 0.9});
    Tensor h = g.zeros({4});
    Tensor out = gru_cell(g, w, x, h);
    for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("gru cell gradients match finite differences on a 3x4 cell") {
    ParameterStore store;
    Rng rng(2);
    GruParams p = make_gru_params(store, "gru", 3, 4, rng);
    std::vector<ParamPtr> params;
    collect_params(p, params);

    auto build = [&](Graph& g) {
        GruRef w = use_gru(g, p, true);
        Tensor x = g.input({3}, std::vector<double>{0.5, -1.0, 0.25});
        Tensor h = g.input({4}, std::vector<double>{0.1, -0.3, 0.8, 0.0});
        Tensor h1 = gru_cell(g, w, x, h);
        Tensor h2 = gru_cell(g, w, x, h1);  // two steps to exercise the recurrence
        return sum(g, mul(g, h2, h2));
    };
    GradCheckReport rep = grad_check(build, params, 1e-5, 1e-5);
    INFO("max rel error " << rep.max_rel_error);
    CHECK(rep.passed());
}

TEST_CASE("repeated gru application keeps the state bounded") {
    ParameterStore store;
    Rng rng(3);
    GruParams p = make_gru_params(store, "gru", 2, 5, rng);
    Graph g;
    GruRef w = use_gru(g, p, false);
    Tensor h = g.zeros({5});
    Rng inputs(17);
    for (int t = 0; t < 200; ++t) {
        Tensor x = g.input({2}, std::vector<double>{inputs.uniform(-1, 1), inputs.uniform(-1, 1)});
        h = gru_cell(g, w, x, h);
        for (double v : h.data()) CHECK(std::fabs(v) < 1.0 + 1e-9);
    }
}

TEST_CASE("softmax cross entropy on uniform logits equals log V") {
    Graph g;
    Tensor logits = g.zeros({4});
    Tensor loss = softmax_cross_entropy(g, logits, 2);
    CHECK_THAT(loss.item(), Catch::Matchers::WithinAbs(std::log(4.0), 1e-12));
}

TEST_CASE("softmax cross entropy is stable under extreme logits") {
    Graph g;
    Tensor logits = g.input({2}, std::vector<double>{1000.0, 0.0});
    Tensor loss = softmax_cross_entropy(g, logits, 0);
    CHECK(std::isfinite(loss.item()));
    CHECK(loss.item() < 1e-12);
}

TEST_CASE("softmax cross entropy rejects out-of-range targets") {
    Graph g;
    Tensor logits = g.zeros({4});
    CHECK_THROWS_AS(softmax_cross_entropy(g, logits, 4), DimensionError);
    CHECK_THROWS_AS(softmax_cross_entropy(g, logits, -1), DimensionError);
}

TEST_CASE("softmax cross entropy gradient matches finite differences, V=7") {
    ParameterStore store;
    Rng rng(4);
    ParamPtr logits = store.create_uniform("logits", {7}, rng, 2.0);
    auto build = [&](Graph& g) { return softmax_cross_entropy(g, g.use(logits), 3); };
    GradCheckReport rep = grad_check(build, std::vector<ParamPtr>{logits}, 1e-5, 1e-6);
    CHECK(rep.passed());

    // gradient is softmax - onehot
    Graph g;
    Tensor l = g.use(logits);
    Tensor loss = softmax_cross_entropy(g, l, 3);
    g.backward(loss);
    double lse = 0.0;
    for (double v : logits->value) lse += std::exp(v);
    for (std::size_t i = 0; i < 7; ++i) {
        double expect = std::exp(logits->value[i]) / lse - (i == 3 ? 1.0 : 0.0);
        CHECK_THAT(logits->grad[i], Catch::Matchers::WithinAbs(expect, 1e-10));
    }
}

TEST_CASE("multi-target cross entropy equals the sum of singles") {
    Graph g;
    Tensor logits = g.input({6}, std::vector<double>{0.5, -1, 2, 0, 1, -0.5});
    std::vector<int> bag = {2, 2, 5};
    Tensor multi = softmax_cross_entropy_multi(g, logits, bag);
    double expect = 0.0;
    for (int t : bag) expect += softmax_cross_entropy(g, logits, t).item();
    CHECK_THAT(multi.item(), Catch::Matchers::WithinAbs(expect, 1e-12));
    CHECK(softmax_cross_entropy_multi(g, logits, std::vector<int>{}).item() == 0.0);
}

TEST_CASE("reparameterize reproduces noise for a standard gaussian") {
    Graph g;
    GaussianParams q{g.zeros({3}), g.zeros({3})};
    Tensor noise = g.input({3}, std::vector<double>{0.7, -1.3, 0.1});
    Tensor z = reparameterize(g, q, noise);
    CHECK(coved::testing::all_close(z.data(), noise.data()));
}

TEST_CASE("reparameterize at the clamped logvar floor returns approximately mu") {
    Graph g;
    GaussianParams q{g.input({2}, std::vector<double>{1.5, -2.0}), g.full({2}, -10.0)};
    Tensor noise = g.input({2}, std::vector<double>{3.0, -3.0});
    Tensor z = reparameterize(g, q, noise);
    CHECK_THAT(z.at(0), Catch::Matchers::WithinAbs(1.5, 0.05));
    CHECK_THAT(z.at(1), Catch::Matchers::WithinAbs(-2.0, 0.05));
}

TEST_CASE("reparameterize sample mean approaches mu") {
    const std::size_t n = 100000;
    const double mu = 0.8, logvar = std::log(2.25);
    Rng rng(21);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        Graph g;
        GaussianParams q{g.full({1}, mu), g.full({1}, logvar)};
        Tensor noise = g.full({1}, rng.normal());
        acc += reparameterize(g, q, noise).item();
    }
    const double sigma = std::sqrt(2.25);
    CHECK(std::fabs(acc / n - mu) < 3.0 * sigma / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("reparameterize gradients match finite differences") {
    ParameterStore store;
    Rng rng(5);
    ParamPtr mu = store.create_uniform("mu", {4}, rng, 1.0);
    ParamPtr lv = store.create_uniform("lv", {4}, rng, 1.0);
    auto build = [&](Graph& g) {
        Rng noise_rng(99);
        std::vector<double> noise(4);
        for (double& v : noise) v = noise_rng.normal();
        GaussianParams q{g.use(mu), g.use(lv)};
        Tensor z = reparameterize(g, q, g.input({4}, noise));
        return sum(g, mul(g, z, z));
    };
    GradCheckReport rep = grad_check(build, std::vector<ParamPtr>{mu, lv});
    CHECK(rep.passed());
}

TEST_CASE("gaussian_kl of identical distributions is zero") {
    Graph g;
    GaussianParams q{g.input({2}, std::vector<double>{0.3, -1.0}),
                     g.input({2}, std::vector<double>{0.5, -0.2})};
    GaussianParams p{g.input({2}, std::vector<double>{0.3, -1.0}),
                     g.input({2}, std::vector<double>{0.5, -0.2})};
    Tensor kl = gaussian_kl(g, q, p);
    for (double v : kl.data()) CHECK(std::fabs(v) < 1e-12);
}

TEST_CASE("gaussian_kl N(3,1) vs N(0,1) equals 4.5") {
    Graph g;
    GaussianParams q{g.full({1}, 3.0), g.zeros({1})};
    GaussianParams p{g.zeros({1}), g.zeros({1})};
    CHECK_THAT(gaussian_kl(g, q, p).item(), Catch::Matchers::WithinAbs(4.5, 1e-12));
}

TEST_CASE("gaussian_kl agrees with a 1e5-sample Monte-Carlo estimate") {
    Rng rng(31);
    const double mq = 3.0, lq = 0.0, mp = 0.0, lp = 0.0;
    Graph g;
    GaussianParams q{g.full({1}, mq), g.full({1}, lq)};
    GaussianParams p{g.full({1}, mp), g.full({1}, lp)};
    const double closed = gaussian_kl(g, q, p).item();
    const double mc = mc_gaussian_kl(mq, lq, mp, lp, 100000, rng);
    CHECK(std::fabs(closed - mc) < 0.05);
}

TEST_CASE("gaussian_kl is nonnegative for random parameter pairs and zero iff equal") {
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        Graph g;
        auto rand_vec = [&](double range) {
            return std::vector<double>{rng.uniform(-range, range), rng.uniform(-range, range),
                                       rng.uniform(-range, range)};
        };
        GaussianParams q{g.input({3}, rand_vec(3.0)), g.input({3}, rand_vec(2.0))};
        GaussianParams p{g.input({3}, rand_vec(3.0)), g.input({3}, rand_vec(2.0))};
        Tensor kl = gaussian_kl(g, q, p);
        for (double v : kl.data()) CHECK(v >= 0.0);
    }
}

TEST_CASE("gaussian_kl gradients match finite differences") {
    ParameterStore store;
    Rng rng(6);
    ParamPtr mq = store.create_uniform("mq", {3}, rng, 1.0);
    ParamPtr lq = store.create_uniform("lq", {3}, rng, 1.0);
    ParamPtr mp = store.create_uniform("mp", {3}, rng, 1.0);
    ParamPtr lp = store.create_uniform("lp", {3}, rng, 1.0);
    auto build = [&](Graph& g) {
        GaussianParams q{g.use(mq), g.use(lq)};
        GaussianParams p{g.use(mp), g.use(lp)};
        return sum(g, gaussian_kl(g, q, p));
    };
    GradCheckReport rep = grad_check(build, std::vector<ParamPtr>{mq, lq, mp, lp});
    CHECK(rep.passed());
}

TEST_CASE("embedding_row gathers and scatters") {
    ParameterStore store;
    ParamPtr table = store.create("emb", {3, 2});
    table->value = {1, 2, 3, 4, 5, 6};
    Graph g;
    Tensor row = embedding_row(g, table, 1, true);
    CHECK(coved::testing::all_close(row.data(), std::vector<double>{3, 4}));
    Tensor loss = sum(g, mul(g, row, row));
    g.backward(loss);
    CHECK(table->grad == std::vector<double>{0, 0, 6, 8, 0, 0});
    CHECK_THROWS_AS(embedding_row(g, table, 3, true), DimensionError);
}

TEST_CASE("adam leaves parameters unchanged on zero gradient") {
    ParameterStore store;
    ParamPtr p = store.create("p", {3});
    p->value = {1.0, -2.0, 0.5};
    const std::vector<double> before = p->value;
    Adam opt(AdamConfig{.lr = 0.1});
    opt.step(std::vector<ParamPtr>{p});
    CHECK(p->value == before);
}

TEST_CASE("adam first step moves by about lr in the negative gradient direction") {
    ParameterStore store;
    ParamPtr p = store.create("p", {2});
    p->value = {0.0, 0.0};
    p->grad = {0.3, -2.0};
    Adam opt(AdamConfig{.lr = 0.05});
    opt.step(std::vector<ParamPtr>{p});
    CHECK_THAT(p->value[0], Catch::Matchers::WithinAbs(-0.05, 1e-6));
    CHECK_THAT(p->value[1], Catch::Matchers::WithinAbs(0.05, 1e-6));
    // gradient cleared by the step
    CHECK(p->grad == std::vector<double>{0.0, 0.0});
}

TEST_CASE("adam minimizes x^2 from x=5") {
    ParameterStore store;
    ParamPtr x = store.create("x", {1});
    x->value = {5.0};
    Adam opt(AdamConfig{.lr = 0.01});
    for (int i = 0; i < 2000; ++i) {
        Graph g;
        Tensor xt = g.use(x);
        Tensor loss = mul(g, xt, xt);
        g.backward(loss);
        opt.step(std::vector<ParamPtr>{x});
    }
    CHECK(std::fabs(x->value[0]) < 1e-2);
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
    ParameterStore store;
    ParamPtr p = store.create("embedding.table", {1});
    p->grad = {std::numeric_limits<double>::quiet_NaN()};
    Adam opt;
    try {
        opt.step(std::vector<ParamPtr>{p});
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("embedding.table") != std::string::npos);
    }
}

TEST_CASE("forward passes stay finite for large-magnitude inputs") {
    ParameterStore store;
    Rng rng(8);
    GruParams p = make_gru_params(store, "gru", 3, 4, rng);
    Graph g;
    GruRef w = use_gru(g, p, false);
    Tensor x = g.full({3}, 1e3);
    Tensor h = g.zeros({4});
    Tensor out = gru_cell(g, w, x, h);
    CHECK(all_finite(out.data()));
}
