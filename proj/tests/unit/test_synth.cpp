#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fewshot/preprocess.hpp"
#include "fewshot/random.hpp"
#include "fewshot/synth.hpp"

using namespace fewshot;

namespace {

LabelVector atoms(std::set<std::size_t> a) { return LabelVector::from_atoms(7, a); }

} // namespace

TEST_CASE("default counts follow the taxonomy table")
{
    const auto counts = default_class_counts();
    CHECK(counts.size() == 15);
    std::size_t total = 0;
    for (const auto& [c, n] : counts) total += n;
    CHECK(total == 2300);
    CHECK(counts.at(class_id(33)) == 100);
    CHECK(counts.at(class_id(0)) == 200);
}

TEST_CASE("signatures are distinct and the noiseless curve is compositional")
{
    const std::size_t L = 920;
    const auto base = base_curve(L);
    for (std::size_t a = 1; a <= 7; ++a) {
        for (std::size_t b = a + 1; b <= 7; ++b) CHECK(signature(a, L) != signature(b, L));
    }
    for (std::uint32_t c = 0; c < 128; ++c) {
        const LabelVector label = decode_label(class_id(c), 7);
        std::vector<double> expected = base;
        for (std::size_t atom : supp(label)) {
            const auto s = signature(atom, L);
            for (std::size_t i = 0; i < L; ++i) expected[i] += s[i];
        }
        CHECK(noiseless_curve(label, L) == expected);
    }
    CHECK(noiseless_curve(atoms({}), L) == base);
}

TEST_CASE("class (1,6) averages to base plus both signatures")
{
    const std::size_t L = 920, n = 1000;
    const double noise = 0.02;
    std::vector<double> mean(L, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        auto rng = derived_rng(5, k);
        const auto x = raw_torque(atoms({1, 6}), L, noise, rng);
        for (std::size_t i = 0; i < L; ++i) mean[i] += x[i] / static_cast<double>(n);
    }
    const auto base = base_curve(L), s1 = signature(1, L), s6 = signature(6, L);
    double worst = 0.0;
    for (std::size_t i = 0; i < L; ++i) worst = std::max(worst, std::abs(mean[i] - (base[i] + s1[i] + s6[i])));
    CHECK(worst < 3.0 * noise / std::sqrt(100.0));
}

TEST_CASE("in-order samples are the base curve plus noise")
{
    auto rng = derived_rng(1, 0);
    const auto x = raw_torque(atoms({}), 920, 0.0, rng);
    CHECK(x == base_curve(920));
}

TEST_CASE("generation is deterministic and satisfies preprocessing invariants")
{
    SynthConfig cfg;
    cfg.seed = 42;
    cfg.samples_per_class = {{class_id(0), 5}, {class_id(33), 5}};
    const Dataset a = generate(cfg);
    const Dataset b = generate(cfg);
    REQUIRE(a.size() == 10);
    CHECK(dataset_checksum(a) == dataset_checksum(b));
    for (const auto& s : a.samples()) {
        REQUIRE(s.series.length() == 920);
        for (double v : s.series.values()) CHECK((v >= 0.0 && v <= 1.0));
    }
    CHECK(a[5].source_id == "000005_class16");
    cfg.seed = 43;
    CHECK(dataset_checksum(generate(cfg)) != dataset_checksum(a));
}

TEST_CASE("nearest-centroid separability of single-label classes")
{
    const std::size_t L = 920, per_class = 100;
    std::vector<LabelVector> classes{atoms({})};
    for (std::size_t a = 1; a <= 7; ++a) classes.push_back(atoms({a}));
    std::vector<std::vector<double>> centroids;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        std::vector<double> mean(L, 0.0);
        for (std::size_t k = 0; k < per_class; ++k) {
            auto rng = derived_rng(100 + c, k);
            const auto x = raw_torque(classes[c], L, 0.02, rng);
            for (std::size_t i = 0; i < L; ++i) mean[i] += x[i] / per_class;
        }
        centroids.push_back(mean);
    }
    std::size_t correct = 0, total = 0;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            auto rng = derived_rng(200 + c, k);
            const auto x = raw_torque(classes[c], L, 0.02, rng);
            std::size_t best = 0;
            double best_d = INFINITY;
            for (std::size_t j = 0; j < centroids.size(); ++j) {
                double d = 0;
                for (std::size_t i = 0; i < L; ++i) d += (x[i] - centroids[j][i]) * (x[i] - centroids[j][i]);
                if (d < best_d) {
                    best_d = d;
                    best = j;
                }
            }
            correct += best == c;
            ++total;
        }
    }
    CHECK(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("export then ingest reproduces the dataset")
{
    SynthConfig cfg;
    cfg.seed = 9;
    cfg.samples_per_class = {{class_id(0), 2}, {class_id(10), 2}, {class_id(33), 2}};
    const Dataset ds = generate(cfg);
    const auto dir = std::filesystem::temp_directory_path() / "fewshot_synth_export";
    std::filesystem::remove_all(dir);
    export_csv(ds, dir);
    CHECK(std::filesystem::exists(dir / "000002_class24.csv"));
    const Dataset back = load_csv_directory(dir, {.downsample_rate = 1, .target_length = 920}, 7);
    REQUIRE(back.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(back[i].label == ds[i].label);
        CHECK(back[i].source_id == ds[i].source_id);
        double worst = 0;
        for (std::size_t t = 0; t < 920; ++t) worst = std::max(worst, std::abs(back[i].series[t] - ds[i].series[t]));
        CHECK(worst <= 1e-12);
    }
    std::filesystem::remove_all(dir);

    export_csv(Dataset({}, 7), dir);
    CHECK(std::filesystem::is_empty(dir));
    std::filesystem::remove_all(dir);
}

TEST_CASE("synth config JSON round trip")
{
    SynthConfig cfg;
    cfg.seed = 3;
    cfg.noise_std = 0.05;
    const auto back = synth_config_from_json(synth_config_to_json(cfg));
    CHECK(back.seed == 3);
    CHECK(back.noise_std == 0.05);
    CHECK(back.samples_per_class == cfg.samples_per_class);
}
