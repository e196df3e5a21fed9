#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "wg/autograd.hpp"
#include "wg/nn.hpp"
#include "wg/rng.hpp"

using namespace wg;
using ag::Graph;
using ag::Param;
using ag::VarPtr;

namespace {

// Central-difference oracle: numerically differentiate a scalar-valued
// builder with respect to every entry of every parameter.
void check_grad(std::vector<Param*> params,
                const std::function<VarPtr(Graph&)>& build_scalar, double eps = 1e-6,
                double tol = 1e-6) {
    {
        Graph g;
        auto loss = build_scalar(g);
        for (auto* p : params) p->zero_grad();
        g.backward(loss);
    }
    for (auto* p : params) {
        for (std::int64_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + eps;
            Graph gp;
            const double fp = build_scalar(gp)->val[0];
            p->value[i] = orig - eps;
            Graph gm;
            const double fm = build_scalar(gm)->val[0];
            p->value[i] = orig;
            const double want = (fp - fm) / (2 * eps);
            const double got = p->grad[i];
            INFO("param entry " << i << ": analytic " << got << " numeric " << want);
            CHECK(std::abs(got - want) <= tol * std::max(1.0, std::abs(want)));
        }
    }
}

} // namespace

TEST_CASE("linear chain gradients match finite differences", "[autograd]") {
    Rng rng(1);
    Param W(Tensor::randn({3, 4}, rng));
    Param b(Tensor::randn({3}, rng));
    Tensor x = Tensor::randn({5, 4}, rng);
    Tensor target = Tensor::randn({5, 3}, rng);

    check_grad({&W, &b}, [&](Graph& g) {
        auto h = ag::add_row(g, ag::matmul(g, g.input(x), ag::transpose(g, g.leaf(W))), g.leaf(b));
        return ag::mse(g, ag::silu(g, h), target);
    });
}

TEST_CASE("elementwise op gradients match finite differences", "[autograd]") {
    Rng rng(2);
    Param a(Tensor::randn({2, 6}, rng));
    Param b(Tensor::randn({2, 6}, rng));
    Tensor t = Tensor::randn({2, 6}, rng);

    check_grad({&a, &b}, [&](Graph& g) {
        auto x = ag::mul(g, ag::leaky_relu(g, g.leaf(a), 0.1), ag::sigmoid(g, g.leaf(b)));
        auto y = ag::add(g, x, ag::square(g, ag::tanh_op(g, g.leaf(b))));
        return ag::mse(g, y, t);
    });
    check_grad({&a}, [&](Graph& g) {
        return ag::mean(g, ag::exp_op(g, ag::scale(g, g.leaf(a), 0.3)));
    });
}

TEST_CASE("softmax cross entropy gradient matches finite differences", "[autograd]") {
    Rng rng(3);
    Param logits(Tensor::randn({4, 5}, rng));
    std::vector<std::int64_t> labels{1, 0, 4, 2};
    check_grad({&logits}, [&](Graph& g) {
        return ag::softmax_xent(g, g.leaf(logits), labels);
    });
}

TEST_CASE("softmax rows and row normalize gradients", "[autograd]") {
    Rng rng(4);
    Param a(Tensor::randn({3, 4}, rng));
    Tensor t = Tensor::randn({3, 4}, rng);
    check_grad({&a}, [&](Graph& g) { return ag::mse(g, ag::softmax_rows(g, g.leaf(a)), t); });
    check_grad({&a}, [&](Graph& g) {
        return ag::mse(g, ag::l2_normalize_rows(g, g.leaf(a)), t);
    });
}

TEST_CASE("infonce loss gradient and unit values", "[autograd]") {
    Rng rng(5);
    Param sim(Tensor::randn({3, 3}, rng));
    check_grad({&sim}, [&](Graph& g) { return ag::infonce_rows(g, g.leaf(sim)); });

    // N=1: numerator equals denominator, loss exactly 0
    Graph g1;
    auto l1 = ag::infonce_rows(g1, g1.input(Tensor({1, 1}, std::vector<double>{3.7})));
    CHECK(l1->val[0] == 0.0);

    // N=2 with all similarities equal: uniform softmax, loss log 2
    Graph g2;
    auto l2 = ag::infonce_rows(g2, g2.input(Tensor({2, 2}, std::vector<double>{1, 1, 1, 1})));
    CHECK(std::abs(l2->val[0] - std::log(2.0)) < 1e-12);
}

TEST_CASE("conv2d gradients match finite differences", "[autograd]") {
    Rng rng(6);
    Param W(Tensor::randn({3, 2, 3, 3}, rng, 0.5));
    Param b(Tensor::randn({3}, rng, 0.5));
    Param x(Tensor::randn({2, 2, 5, 5}, rng));
    Tensor t = Tensor::randn({2, 3, 5, 5}, rng);

    check_grad({&W, &b, &x}, [&](Graph& g) {
        return ag::mse(g, ag::conv2d(g, g.leaf(x), g.leaf(W), g.leaf(b), 1, 1), t);
    }, 1e-6, 2e-5);

    SECTION("stride 2") {
        Tensor t2 = Tensor::randn({2, 3, 3, 3}, rng);
        check_grad({&W, &x}, [&](Graph& g) {
            return ag::mse(g, ag::conv2d(g, g.leaf(x), g.leaf(W), g.leaf(b), 2, 1), t2);
        }, 1e-6, 2e-5);
    }
}

TEST_CASE("pooling, upsampling and channel ops gradients", "[autograd]") {
    Rng rng(7);
    Param x(Tensor::randn({2, 3, 4, 4}, rng));
    Param y(Tensor::randn({2, 2, 4, 4}, rng));
    Param s(Tensor::randn({2, 3}, rng));
    Tensor tp = Tensor::randn({2, 3, 2, 2}, rng);
    Tensor tu = Tensor::randn({2, 3, 8, 8}, rng);
    Tensor tc = Tensor::randn({2, 5, 4, 4}, rng);
    Tensor tb = Tensor::randn({2, 3, 4, 4}, rng);

    check_grad({&x}, [&](Graph& g) { return ag::mse(g, ag::avg_pool2(g, g.leaf(x)), tp); });
    check_grad({&x}, [&](Graph& g) { return ag::mse(g, ag::upsample2(g, g.leaf(x)), tu); });
    check_grad({&x, &y}, [&](Graph& g) {
        return ag::mse(g, ag::concat_channels(g, g.leaf(x), g.leaf(y)), tc);
    });
    check_grad({&x, &s}, [&](Graph& g) {
        return ag::mse(g, ag::add_channel_bias(g, g.leaf(x), g.leaf(s)), tb);
    });
}

TEST_CASE("group norm gradient matches finite differences", "[autograd]") {
    Rng rng(8);
    Param x(Tensor::randn({2, 4, 3, 3}, rng));
    Param gamma(Tensor::randn({4}, rng, 0.5));
    Param beta(Tensor::randn({4}, rng, 0.5));
    Tensor t = Tensor::randn({2, 4, 3, 3}, rng);
    check_grad({&x, &gamma, &beta}, [&](Graph& g) {
        return ag::mse(g, ag::group_norm(g, g.leaf(x), g.leaf(gamma), g.leaf(beta), 2), t);
    }, 1e-6, 2e-5);
}

TEST_CASE("gather rows accumulates into repeated indices", "[autograd]") {
    Rng rng(9);
    Param table(Tensor::randn({5, 3}, rng));
    Tensor t = Tensor::randn({4, 3}, rng);
    check_grad({&table}, [&](Graph& g) {
        return ag::mse(g, ag::gather_rows(g, g.leaf(table), {1, 1, 4, 0}), t);
    });
    Graph g;
    CHECK_THROWS_AS(ag::gather_rows(g, g.leaf(table), {5}), std::out_of_range);
}

TEST_CASE("shared leaves accumulate gradients once per use", "[autograd]") {
    Rng rng(10);
    Param a(Tensor::randn({2, 2}, rng));
    Tensor t = Tensor::zeros({2, 2});
    // f(a) = mse(a + a); leaf memoization must produce d/da = 2 * d(mse)/dx
    check_grad({&a}, [&](Graph& g) {
        auto la = g.leaf(a);
        return ag::mse(g, ag::add(g, la, la), t);
    });
}

TEST_CASE("mean rows and concat cols gradients", "[autograd]") {
    Rng rng(11);
    Param a(Tensor::randn({4, 3}, rng));
    Param b(Tensor::randn({4, 2}, rng));
    Tensor tm = Tensor::randn({1, 3}, rng);
    Tensor tc = Tensor::randn({4, 5}, rng);
    check_grad({&a}, [&](Graph& g) { return ag::mse(g, ag::mean_rows(g, g.leaf(a)), tm); });
    check_grad({&a, &b}, [&](Graph& g) {
        return ag::mse(g, ag::concat_cols(g, g.leaf(a), g.leaf(b)), tc);
    });
}

TEST_CASE("adam converges on a quadratic", "[autograd][nn]") {
    Param w(Tensor({2}, std::vector<double>{5.0, -3.0}));
    nn::Adam opt({&w}, {.lr = 0.1});
    Tensor target({2}, std::vector<double>{1.0, 2.0});
    for (int i = 0; i < 500; ++i) {
        opt.zero_grad();
        Graph g;
        auto loss = ag::mse(g, g.leaf(w), target);
        g.backward(loss);
        opt.step();
    }
    CHECK(std::abs(w.value[0] - 1.0) < 1e-3);
    CHECK(std::abs(w.value[1] - 2.0) < 1e-3);
}
