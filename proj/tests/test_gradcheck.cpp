#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "coved/gradcheck.hpp"
#include "coved/ops.hpp"
#include "coved/rng.hpp"

using namespace coved;

TEST_CASE("linear loss agrees with finite differences almost exactly") {
    ParameterStore store;
    Rng rng(1);
    ParamPtr x = store.create_uniform("x", {6}, rng, 2.0);
    auto build = [&](Graph& g) {
        Tensor coeffs = g.input({6}, std::vector<double>{1, -2, 3, 0.5, -0.25, 2});
        return sum(g, mul(g, g.use(x), coeffs));
    };
    GradCheckReport rep = grad_check(build, std::vector<ParamPtr>{x});
    CHECK(rep.passed());
    CHECK(rep.max_rel_error < 1e-8);
    CHECK(rep.checked == 6);
}

TEST_CASE("an intentionally corrupted gradient is flagged") {
    ParameterStore store;
    ParamPtr x = store.create("x", {2});
    x->value = {1.0, 2.0};

    // identity op whose backward scales the gradient by 1.5
    auto bad_identity = [](Graph& g, const Tensor& t) {
        return g.make_node(t.shape(), std::vector<double>(t.data().begin(), t.data().end()),
                           {t.node()}, [](detail::TensorNode& n) {
                               auto& p = n.parents[0];
                               if (!p->requires_grad) return;
                               p->ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   p->grad[i] += 1.5 * n.grad[i];
                           });
    };

    auto build = [&](Graph& g) { return sum(g, bad_identity(g, mul(g, g.use(x), g.use(x)))); };
    GradCheckReport rep = grad_check(build, std::vector<ParamPtr>{x});
    CHECK_FALSE(rep.passed());
    CHECK(rep.failures.size() == 2);
    CHECK(rep.failures.front().param == "x");
}

TEST_CASE("sampling inside the loss is fine when reseeded per call") {
    ParameterStore store;
    Rng rng(2);
    ParamPtr mu = store.create_uniform("mu", {3}, rng, 1.0);
    ParamPtr lv = store.create_uniform("lv", {3}, rng, 1.0);
    auto build = [&](Graph& g) {
        Rng noise_rng(777);  // fresh stream every call keeps the builder deterministic
        std::vector<double> noise(3);
        for (double& v : noise) v = noise_rng.normal();
        GaussianParams q{g.use(mu), g.use(lv)};
        Tensor z = reparameterize(g, q, g.input({3}, noise));
        return mean(g, mul(g, z, z));
    };
    GradCheckReport rep = grad_check(build, std::vector<ParamPtr>{mu, lv});
    CHECK(rep.passed());
}

TEST_CASE("report carries max relative error across parameters") {
    ParameterStore store;
    ParamPtr a = store.create("a", {1});
    ParamPtr b = store.create("b", {1});
    a->value = {2.0};
    b->value = {3.0};
    auto build = [&](Graph& g) { return mul(g, g.use(a), g.use(b)); };
    GradCheckReport rep = grad_check(build, std::vector<ParamPtr>{a, b});
    CHECK(rep.checked == 2);
    CHECK(rep.max_rel_error < 1e-8);
}
