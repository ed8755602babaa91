#include <doctest.h>

#include <bit>
#include <cmath>
#include <map>

#include "fewshot/ad/grad.hpp"
#include "fewshot/episodes.hpp"
#include "fewshot/error.hpp"
#include "fewshot/fsl.hpp"
#include "fewshot/synth.hpp"
#include "support/gradcheck.hpp"

using namespace fewshot;
using ad::Tensor;
using ad::Var;

namespace {

Var matrix(std::size_t rows, std::size_t cols, std::vector<double> v)
{
    return ad::constant(Tensor({rows, cols}, std::move(v)));
}

LabelMask mask(std::initializer_list<std::size_t> atoms)
{
    LabelMask m = 0;
    for (std::size_t a : atoms) m |= 1u << (a - 1);
    return m;
}

CnnSpec tiny_spec()
{
    CnnSpec s;
    s.conv_blocks = {{.channels = 4, .kernel_size = 3, .pool_kernel = 2}, {.channels = 4, .kernel_size = 3, .pool_kernel = 2}};
    s.dense_blocks = {{.features = 8}};
    s.repr_dim = 4;
    return s;
}

const Dataset& small_synthetic()
{
    static const Dataset ds = [] {
        SynthConfig cfg;
        cfg.seed = 3;
        cfg.length = 32;
        cfg.samples_per_class = {{class_id(1), 30}, {class_id(32), 30}, {class_id(33), 30}, {class_id(2), 30}};
        return generate(cfg);
    }();
    return ds;
}

// Brute-force activated label space: every non-empty mask contained in some support label.
std::set<LabelMask> brute_label_space(const std::vector<LabelMask>& support, std::size_t width)
{
    std::set<LabelMask> out;
    for (LabelMask m = 1; m < (1u << width); ++m) {
        for (LabelMask s : support) {
            if ((s & m) == m) {
                out.insert(m);
                break;
            }
        }
    }
    return out;
}

double sq_dist(const double* a, const double* b, std::size_t d)
{
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

} // namespace

TEST_CASE("multi-class centroids are class means")
{
    const Var two = matrix(2, 2, {0, 0, 2, 2});
    const std::vector<int> zeros{0, 0};
    const Var c = proto_centroids_multiclass(two, zeros, 1);
    CHECK(c.value()[0] == 1.0);
    CHECK(c.value()[1] == 1.0);

    const Var single = matrix(2, 3, {1, 2, 3, 4, 5, 6});
    const std::vector<int> ids{1, 0};
    const Var cs = proto_centroids_multiclass(single, ids, 2);
    CHECK(std::vector<double>(cs.value().data().begin(), cs.value().data().end()) ==
          std::vector<double>{4, 5, 6, 1, 2, 3});

    std::mt19937_64 rng(5);
    const std::size_t n = 3, k = 10, d = 7;
    const Tensor e = testing::random_tensor({n * k, d}, rng);
    std::vector<int> labels(n * k);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>((i * 7) % n);
    const Tensor got = proto_centroids_multiclass(ad::constant(e), labels, n).value();
    for (std::size_t c2 = 0; c2 < n; ++c2) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0;
            int count = 0;
            for (std::size_t i = 0; i < labels.size(); ++i) {
                if (labels[i] == static_cast<int>(c2)) {
                    s += e[i * d + j];
                    ++count;
                }
            }
            CHECK(std::abs(got[c2 * d + j] - s / count) <= 1e-12);
        }
    }
    const std::vector<int> missing{0, 0};
    CHECK_THROWS_AS(proto_centroids_multiclass(two, missing, 2), ContractError);
}

TEST_CASE("prototype logits and probabilities")
{
    const Var centroids = matrix(3, 2, {1, 0, -1, 0, 0, 2});
    const ProtoConfig cfg;
    SUBCASE("equidistant query gives uniform probabilities")
    {
        const Var eq = matrix(1, 2, {0, 0});
        const Var sym = matrix(3, 2, {1, 0, -1, 0, 0, 1});
        const Tensor p = ad::softmax(proto_logits(eq, sym, cfg)).value();
        for (std::size_t j = 0; j < 3; ++j) CHECK(p[j] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    }
    SUBCASE("query on a centroid gets the strict maximum")
    {
        const Tensor p = ad::softmax(proto_logits(matrix(1, 2, {0, 2}), centroids, cfg)).value();
        CHECK(p[2] > p[0]);
        CHECK(p[2] > p[1]);
    }
    SUBCASE("hand-evaluated softmax of negative squared distances")
    {
        const Tensor p = ad::softmax(proto_logits(matrix(1, 2, {0.5, 0.5}), centroids, cfg)).value();
        // distances: (0.25 + 0.25), (2.25 + 0.25), (0.25 + 2.25)
        const double e0 = std::exp(-0.5), e1 = std::exp(-2.5), e2 = std::exp(-2.5);
        const double z = e0 + e1 + e2;
        CHECK(std::abs(p[0] - e0 / z) <= 1e-12);
        CHECK(std::abs(p[1] - e1 / z) <= 1e-12);
        CHECK(std::abs(p[2] - e2 / z) <= 1e-12);
    }
    SUBCASE("cosine distance")
    {
        const Tensor l = proto_logits(matrix(1, 2, {3, 0}), centroids, {.distance = Distance::cosine}).value();
        CHECK(std::abs(l[0] - 0.0) <= 1e-12);
        CHECK(std::abs(l[1] + 2.0) <= 1e-12);
        CHECK(std::abs(l[2] + 1.0) <= 1e-12);
    }
    SUBCASE("normalization maps onto the unit circle first")
    {
        const Tensor l = proto_logits(matrix(1, 2, {0, 5}), centroids, {.normalize = true}).value();
        CHECK(std::abs(l[0] + 2.0) <= 1e-12);
        CHECK(std::abs(l[2] - 0.0) <= 1e-12);
    }
    CHECK_THROWS_AS(proto_logits(matrix(1, 2, {0, 0}), matrix(1, 2, {0, 0}), cfg), ContractError);
}

TEST_CASE("scaling embeddings leaves Euclidean argmax unchanged")
{
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor q = testing::random_tensor({6, 5}, rng), c = testing::random_tensor({4, 5}, rng);
        std::uniform_real_distribution<double> u(0.1, 10.0);
        const double s = u(rng);
        Tensor qs = q, cs = c;
        for (auto& v : qs.data()) v *= s;
        for (auto& v : cs.data()) v *= s;
        CHECK(argmax_rows(proto_logits(ad::constant(q), ad::constant(c), {}).value()) ==
              argmax_rows(proto_logits(ad::constant(qs), ad::constant(cs), {}).value()));
    }
}

TEST_CASE("activated label spaces")
{
    const std::vector<LabelMask> singles{mask({1}), mask({6})};
    CHECK(build_label_space(singles).combinations == std::vector<LabelMask>{mask({1}), mask({6})});
    const std::vector<LabelMask> pair{mask({1, 6})};
    CHECK(build_label_space(pair).combinations == std::vector<LabelMask>{mask({1}), mask({6}), mask({1, 6})});
    const std::vector<LabelMask> chain{mask({3}), mask({3, 5}), mask({3, 5, 7})};
    CHECK(build_label_space(chain).combinations ==
          std::vector<LabelMask>{mask({3}), mask({5}), mask({7}), mask({3, 5}), mask({3, 7}), mask({5, 7}),
                                 mask({3, 5, 7})});
    const std::vector<LabelMask> empty_labels{0, 0};
    CHECK_THROWS_AS(build_label_space(empty_labels), DegenerateEpisode);

    std::mt19937_64 rng(4);
    for (std::size_t width = 1; width <= 7; ++width) {
        for (int trial = 0; trial < 40; ++trial) {
            std::vector<LabelMask> support(1 + rng() % 6);
            for (auto& m : support) m = static_cast<LabelMask>(rng() % (1u << width));
            support[0] |= 1u;
            const LabelSpace space = build_label_space(support);
            const auto brute = brute_label_space(support, width);
            CHECK(std::set<LabelMask>(space.combinations.begin(), space.combinations.end()) == brute);
            CHECK(space.size() == brute.size());
            for (std::size_t i = 1; i < space.size(); ++i) {
                CHECK(std::popcount(space.combinations[i - 1]) <= std::popcount(space.combinations[i]));
            }
        }
    }
}

TEST_CASE("multi-label centroids follow subset membership")
{
    const Var e = matrix(2, 2, {1, 0, 3, 4});
    const std::vector<LabelMask> labels{mask({3}), mask({3, 5})};
    const LabelSpace space = build_label_space(labels);
    REQUIRE(space.combinations == std::vector<LabelMask>{mask({3}), mask({5}), mask({3, 5})});
    const Tensor c = proto_centroids_multilabel(e, labels, space).value();
    CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{2, 2, 3, 4, 3, 4});

    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t s = 1 + rng() % 8, d = 3, width = 1 + rng() % 5;
        std::vector<LabelMask> ls(s);
        for (auto& m : ls) m = static_cast<LabelMask>(rng() % (1u << width));
        ls[0] |= 1u;
        const Tensor emb = testing::random_tensor({s, d}, rng);
        const LabelSpace sp = build_label_space(ls);
        const Tensor got = proto_centroids_multilabel(ad::constant(emb), ls, sp).value();
        for (std::size_t ci = 0; ci < sp.size(); ++ci) {
            for (std::size_t j = 0; j < d; ++j) {
                double sum = 0;
                int n = 0;
                for (std::size_t i = 0; i < s; ++i) {
                    bool member = true;
                    for (std::size_t a = 0; a < width; ++a) {
                        if ((sp.combinations[ci] >> a & 1u) && !(ls[i] >> a & 1u)) member = false;
                    }
                    if (member) {
                        sum += emb[i * d + j];
                        ++n;
                    }
                }
                CHECK(std::abs(got[ci * d + j] - sum / n) <= 1e-12);
            }
        }
    }
}

TEST_CASE("multi-label nearest-prototype decoding")
{
    const std::vector<LabelMask> pair{mask({1, 2})};
    const LabelSpace space = build_label_space(pair);
    const Var centroids = matrix(3, 2, {1, 0, 0, 1, 1, 1});
    CHECK(proto_predict_multilabel(matrix(1, 2, {1, 1}), centroids, space, {}) == std::vector<LabelMask>{mask({1, 2})});
    // Equidistant from {1} and {2}: the earlier combination wins.
    CHECK(proto_predict_multilabel(matrix(1, 2, {0.5, 0.5}), matrix(3, 2, {1, 0, 0, 1, 5, 5}), space, {}) ==
          std::vector<LabelMask>{mask({1})});

    const Var e = matrix(2, 2, {0, 0, 2, 2});
    const std::vector<LabelMask> labels{mask({3}), mask({3, 5})};
    const LabelSpace sp = build_label_space(labels);
    const Var c = proto_centroids_multilabel(e, labels, sp);
    std::mt19937_64 rng(2);
    const Tensor q = testing::random_tensor({40, 2}, rng, -1.0, 3.0);
    const auto pred = proto_predict_multilabel(ad::constant(q), c, sp, {});
    for (std::size_t i = 0; i < 40; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < sp.size(); ++j) {
            if (sq_dist(q.ptr() + 2 * i, c.value().ptr() + 2 * j, 2) < sq_dist(q.ptr() + 2 * i, c.value().ptr() + 2 * best, 2)) best = j;
        }
        CHECK(pred[i] == sp.combinations[best]);
    }
}

TEST_CASE("prototype cross-entropy matches direct evaluation")
{
    SUBCASE("uniform logits with three ways give ln 3")
    {
        const Var c = matrix(3, 1, {1, 1, 1});
        const Var logits = proto_logits(matrix(2, 1, {0, 5}), c, {});
        const std::vector<int> t{0, 2};
        CHECK(std::abs(ad::cross_entropy_with_logits(logits, t).item() - std::log(3.0)) <= 1e-12);
    }
    SUBCASE("small fixed episode")
    {
        const Var c = matrix(2, 1, {0, 1});
        const Var q = matrix(2, 1, {0.2, 0.9});
        const std::vector<int> t{0, 1};
        const double l0 = -std::log(std::exp(-0.04) / (std::exp(-0.04) + std::exp(-0.64)));
        const double l1 = -std::log(std::exp(-0.01) / (std::exp(-0.81) + std::exp(-0.01)));
        CHECK(std::abs(ad::cross_entropy_with_logits(proto_logits(q, c, {}), t).item() - (l0 + l1) / 2) <= 1e-12);
    }
    SUBCASE("separated embeddings")
    {
        const Var c = matrix(2, 2, {0, 0, 10, 10});
        const Var q = matrix(4, 2, {0.1, 0, 9.9, 10, 0, 0.2, 10, 9.8});
        const std::vector<int> t{0, 1, 0, 1};
        const Var logits = proto_logits(q, c, {});
        CHECK(ad::cross_entropy_with_logits(logits, t).item() < std::log(2.0));
        CHECK(argmax_rows(logits.value()) == std::vector<std::size_t>{0, 1, 0, 1});
    }
}

TEST_CASE("prototypical episodes over a backbone")
{
    const Backbone net(tiny_spec(), 32);
    std::mt19937_64 rng(1);
    const auto params = net.init(rng);
    const SamplerConfig mc{.n_way = 3, .k_shot = 3, .m_query = 4, .seed = 5};
    const Episode ep = episode_at(small_synthetic(), mc, 0);
    const auto out = proto_episode(net, params, ep, {}, false, rng);
    CHECK(out.predicted.size() == ep.query.size());
    CHECK(out.truth.size() == ep.query.size());
    CHECK(std::isfinite(out.loss.item()));
    const auto grads = ad::grad(out.loss, params.vars());
    CHECK(grads.size() == params.size());

    // A query whose adapted combination is absent from the support label space is skipped.
    const SamplerConfig ml{.n_way = 2, .k_shot = 3, .m_query = 4, .mode = EpisodeMode::multi_label, .seed = 5};
    Episode mle = episode_at(small_synthetic(), ml, 0);
    for (auto& e : mle.support) e.labels = e.labels == 0b11u ? 0b01u : e.labels;
    mle.support[0].labels = 0b01u;
    mle.support[1].labels = 0b10u;
    mle.query[0].labels = 0b11u;
    const auto ml_out = proto_episode(net, params, mle, {}, false, rng);
    CHECK(ml_out.skipped >= 1);
    for (auto& e : mle.query) e.labels = 0b11u;
    CHECK_THROWS_AS(proto_episode(net, params, mle, {}, false, rng), DegenerateEpisode);
}

TEST_CASE("quadratic toy meta-gradients")
{
    ad::ParamSet meta;
    meta.add("theta", ad::parameter(Tensor({1}, 0.0)));
    const LossFn loss = [](const ad::ParamSet& p) { return ad::square(ad::add_scalar(p[0], -1.0)); };
    const auto adapted = adapt(meta, loss, 0.1, 1, false);
    CHECK(std::abs(adapted[0].item() - 0.2) <= 1e-15);

    MamlConfig cfg{.inner_lr = 0.1, .meta_lr = 0.1, .adaptation_steps = 1, .order = MamlOrder::second};
    CHECK(std::abs(maml_meta_gradient(meta, loss, loss, cfg).grads[0].item() - (-1.28)) <= 1e-9);
    cfg.order = MamlOrder::first;
    CHECK(std::abs(maml_meta_gradient(meta, loss, loss, cfg).grads[0].item() - (-1.6)) <= 1e-9);
    CHECK(meta[0].item() == 0.0);
}

TEST_CASE("second-order meta-gradient of a two-layer network matches finite differences")
{
    std::mt19937_64 rng(21);
    const Tensor xs = testing::random_tensor({6, 3}, rng), xq = testing::random_tensor({5, 3}, rng);
    const std::vector<int> ts{0, 1, 0, 1, 1, 0}, tq{1, 0, 0, 1, 1};
    auto model_loss = [](const Tensor& x, const std::vector<int>& t) {
        return [x, t](const ad::ParamSet& p) {
            const Var h = ad::tanh(ad::affine(ad::constant(x), p[0], p[1]));
            return ad::cross_entropy_with_logits(ad::affine(h, p[2], p[3]), t);
        };
    };
    const LossFn support = model_loss(xs, ts), query = model_loss(xq, tq);
    ad::ParamSet meta;
    meta.add("w1", ad::parameter(testing::random_tensor({3, 4}, rng)));
    meta.add("b1", ad::parameter(testing::random_tensor({4}, rng)));
    meta.add("w2", ad::parameter(testing::random_tensor({4, 2}, rng)));
    meta.add("b2", ad::parameter(testing::random_tensor({2}, rng)));
    const MamlConfig cfg{.inner_lr = 0.3, .meta_lr = 0.1, .adaptation_steps = 3, .order = MamlOrder::second};
    const auto analytic = maml_meta_gradient(meta, support, query, cfg).grads;

    auto post_adaptation = [&](const ad::ParamSet& p) {
        return query(adapt(p.clone(true), support, cfg.inner_lr, cfg.adaptation_steps, false)).item();
    };
    std::vector<double> a, n;
    const double h = 1e-5;
    for (std::size_t i = 0; i < meta.size(); ++i) {
        for (std::size_t j = 0; j < meta[i].size(); ++j) {
            auto plus = meta.clone(true), minus = meta.clone(true);
            plus[i].mutable_value()[j] += h;
            minus[i].mutable_value()[j] -= h;
            n.push_back((post_adaptation(plus) - post_adaptation(minus)) / (2 * h));
            a.push_back(analytic[i].value()[j]);
        }
    }
    double worst = 0;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - n[k]));
    CHECK(worst < 1e-6);
}

TEST_CASE("inner loop decreases the support loss on a separable toy")
{
    std::mt19937_64 rng(3);
    const Tensor x({4, 2}, {1, 0, 0.9, 0.1, 0, 1, 0.1, 0.9});
    const std::vector<int> t{0, 0, 1, 1};
    ad::ParamSet p;
    p.add("w", ad::parameter(Tensor({2, 2}, 0.0)));
    p.add("b", ad::parameter(Tensor({2}, 0.0)));
    const LossFn loss = [&](const ad::ParamSet& q) {
        return ad::cross_entropy_with_logits(ad::affine(ad::constant(x), q[0], q[1]), t);
    };
    double previous = loss(p).item();
    for (std::size_t steps = 1; steps <= 6; ++steps) {
        const double now = loss(adapt(p, loss, 0.5, steps, false)).item();
        CHECK(now < previous);
        previous = now;
    }
    const LossFn bad = [](const ad::ParamSet& q) { return ad::scale(ad::sum(q[0]), NAN); };
    CHECK_THROWS_AS(adapt(p, bad, 0.1, 1, false), NumericError);
}

TEST_CASE("MAML inference leaves meta parameters untouched and memorizes its support")
{
    const Backbone net(tiny_spec(), 32);
    std::mt19937_64 rng(6);
    const auto meta = maml_init(net, 3, rng);
    CHECK(meta.get("head.weight").shape() == ad::Shape{4, 3});
    const auto before = meta.clone(false);
    const SamplerConfig mc{.n_way = 3, .k_shot = 4, .m_query = 2, .seed = 9};
    Episode ep = episode_at(small_synthetic(), mc, 0);
    ep.query = ep.support;
    const MamlConfig cfg{.inner_lr = 0.1, .meta_lr = 1e-3, .adaptation_steps = 60};
    const auto out = maml_infer_episode(meta, ep, net, cfg, rng);
    CHECK(meta.same_values(before));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < out.truth.size(); ++i) hits += out.predicted[i] == out.truth[i];
    CHECK(hits == out.truth.size());

    ad::ParamSet trained = meta.clone(true);
    ad::Optimizer opt({.kind = ad::OptimizerKind::adam, .learning_rate = 1e-3});
    const auto t = maml_train_episode(trained, episode_at(small_synthetic(), mc, 1), net, cfg, opt, rng);
    CHECK(std::isfinite(t.loss.item()));
    CHECK_FALSE(trained.same_values(before));

    const ad::ParamSet narrow = maml_init(net, 2, rng);
    CHECK_THROWS_AS(maml_infer_episode(narrow, ep, net, cfg, rng), ContractError);
}

TEST_CASE("sigmoid threshold maps exactly one half to absent")
{
    const Tensor logits({2, 3}, {0.0, 1e-3, -1e-3, 5.0, 0.0, -5.0});
    CHECK(threshold_sigmoid(logits) == std::vector<LabelMask>{0b010u, 0b001u});
}

TEST_CASE("renaming raw labels leaves episode outcomes unchanged")
{
    std::vector<Sample> original, renamed;
    const std::map<std::uint32_t, std::uint32_t> rename{{1, 4}, {32, 2}, {33, 1}};
    for (const auto& s : small_synthetic().samples()) {
        const std::uint32_t c = raw(encode_label(s.label));
        if (!rename.contains(c)) continue;
        original.push_back(s);
        Sample r = s;
        r.label = decode_label(class_id(rename.at(c)), 7);
        renamed.push_back(r);
    }
    const Dataset a(original, 7), b(renamed, 7);
    const Backbone net(tiny_spec(), 32);
    std::mt19937_64 init(2);
    const auto params = net.init(init);
    const SamplerConfig cfg{.n_way = 3, .k_shot = 3, .m_query = 3, .seed = 13};
    for (std::size_t i = 0; i < 5; ++i) {
        const Episode ea = episode_at(a, cfg, i), eb = episode_at(b, cfg, i);
        std::mt19937_64 r1(0), r2(0);
        const auto oa = proto_episode(net, params, ea, {}, false, r1);
        const auto ob = proto_episode(net, params, eb, {}, false, r2);
        CHECK(std::abs(oa.loss.item() - ob.loss.item()) <= 1e-12);
        for (std::size_t q = 0; q < oa.predicted.size(); ++q) {
            CHECK(rename.at(ea.label_map[oa.predicted[q]]) == eb.label_map[ob.predicted[q]]);
        }
        const MamlConfig mcfg{.inner_lr = 0.1, .adaptation_steps = 2};
        const auto meta = maml_init(net, 3, init);
        const auto ma = maml_infer_episode(meta, ea, net, mcfg, r1);
        const auto mb = maml_infer_episode(meta, eb, net, mcfg, r2);
        for (std::size_t q = 0; q < ma.predicted.size(); ++q) {
            CHECK(rename.at(ea.label_map[ma.predicted[q]]) == eb.label_map[mb.predicted[q]]);
        }
    }
}
