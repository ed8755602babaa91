#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fewshot/ad/optim.hpp"
#include "fewshot/ad/param_set.hpp"
#include "fewshot/error.hpp"

using namespace fewshot;
using namespace fewshot::ad;

namespace {

ParamSet single(double value)
{
    ParamSet p;
    p.add("theta", parameter(Tensor::scalar(value)));
    return p;
}

std::vector<Var> grads_of(double g) { return {constant(Tensor::scalar(g))}; }

} // namespace

TEST_CASE("SGD step moves against the gradient")
{
    ParamSet p = single(0.0);
    Optimizer opt({.kind = OptimizerKind::sgd, .learning_rate = 0.1});
    opt.step(p, grads_of(-2.0));
    CHECK(p[0].item() == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("SGD without weight decay is a fixed point at zero gradient")
{
    ParamSet p = single(1.25);
    Optimizer opt({.kind = OptimizerKind::sgd, .learning_rate = 0.5});
    opt.step(p, grads_of(0.0));
    CHECK(p[0].item() == 1.25);
}

TEST_CASE("Adam at exact zero moments leaves parameters unchanged")
{
    ParamSet p = single(-0.75);
    Optimizer opt({.kind = OptimizerKind::adam, .learning_rate = 0.01});
    opt.step(p, grads_of(0.0));
    CHECK(p[0].item() == -0.75);
}

TEST_CASE("AdamW applies the decoupled decay term")
{
    const double lr = 0.01, wd = 0.1, theta = 2.0, g = 0.5;
    ParamSet p = single(theta);
    Optimizer opt({.kind = OptimizerKind::adamw, .learning_rate = lr, .weight_decay = wd});
    opt.step(p, grads_of(g));
    // First step: m_hat = g, v_hat = g^2.
    const double expected = theta - lr * wd * theta - lr * g / (std::sqrt(g * g) + 1e-8);
    CHECK(p[0].item() == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("Adam moments persist across steps")
{
    ParamSet p = single(0.0);
    Optimizer opt({.kind = OptimizerKind::adam, .learning_rate = 0.1});
    opt.step(p, grads_of(1.0));
    opt.step(p, grads_of(-1.0));
    // m2 = 0.9*0.1 - 0.1 = -0.01; v2 = 0.999*0.001 + 0.001
    const double m = (0.9 * 0.1 - 0.1) / (1 - 0.81);
    const double v = (0.999 * 0.001 + 0.001) / (1 - 0.999 * 0.999);
    const double expected = -0.1 * 1.0 / (1.0 + 1e-8) - 0.1 * m / (std::sqrt(v) + 1e-8);
    CHECK(p[0].item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(opt.steps_taken() == 2);
}

TEST_CASE("RMSprop step")
{
    ParamSet p = single(1.0);
    Optimizer opt({.kind = OptimizerKind::rmsprop, .learning_rate = 0.01});
    opt.step(p, grads_of(2.0));
    const double v = 0.01 * 4.0;
    CHECK(p[0].item() == doctest::Approx(1.0 - 0.01 * 2.0 / (std::sqrt(v) + 1e-8)).epsilon(1e-14));
}

TEST_CASE("optimizer names parse and unknown names are config errors")
{
    CHECK(parse_optimizer("Adam") == OptimizerKind::adam);
    CHECK(parse_optimizer("adamw") == OptimizerKind::adamw);
    CHECK(parse_optimizer("SGD") == OptimizerKind::sgd);
    CHECK(parse_optimizer("RMSprop") == OptimizerKind::rmsprop);
    CHECK_THROWS_WITH_AS(parse_optimizer("Adagrad"), doctest::Contains("Adam, SGD, AdamW, RMSprop"), ConfigError);
}

TEST_CASE("clone is independent of the original")
{
    ParamSet p;
    p.add("w", parameter(Tensor({2, 2}, 1.0)));
    ParamSet q = p.clone();
    q[0].mutable_value()[0] = 5.0;
    CHECK(p[0].value()[0] == 1.0);
    CHECK(q.names() == p.names());
    CHECK(q[0].shape() == p[0].shape());
}

TEST_CASE("serialization round trip is bitwise")
{
    ParamSet p;
    p.add("conv.weight", parameter(Tensor({2, 1, 3}, {0.1, -0.2, 0.3, 1e-300, -7.5, 3.14159})));
    p.add("head.bias", parameter(Tensor({2}, {0.0, -0.0})));
    const auto path = std::filesystem::temp_directory_path() / "fewshot_params_test.bin";
    p.save(path);
    ParamSet q = ParamSet::load(path);
    std::filesystem::remove(path);
    CHECK(q.same_values(p));

    auto bytes = p.serialize();
    bytes[0] = 'X';
    CHECK_THROWS_AS(ParamSet::deserialize(bytes), FormatError);
}
