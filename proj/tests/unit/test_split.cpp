#include <doctest.h>

#include <cmath>
#include <random>

#include "fewshot/error.hpp"
#include "fewshot/split.hpp"

using namespace fewshot;

namespace {

ClassId from_digits(const std::string& digits)
{
    std::uint32_t c = 0;
    for (char d : digits) {
        if (d != '0') c |= 1u << (d - '1');
    }
    return class_id(c);
}

std::set<ClassId> set_of(std::initializer_list<const char*> digits)
{
    std::set<ClassId> out;
    for (const char* d : digits) out.insert(from_digits(d));
    return out;
}

std::map<ClassId, std::size_t> taxonomy_counts()
{
    std::map<ClassId, std::size_t> counts;
    for (const char* d : {"0", "1", "2", "3", "4", "5", "6", "7"}) counts[from_digits(d)] = 200;
    for (const char* d : {"16", "24", "27", "35", "37", "267", "357"}) counts[from_digits(d)] = 100;
    return counts;
}

std::set<ClassId> keys(const std::map<ClassId, std::size_t>& m)
{
    std::set<ClassId> out;
    for (const auto& [k, v] : m) out.insert(k);
    return out;
}

// Naive oracle: every label independently goes to one of four places.
std::optional<SplitSpec> brute_force(const std::map<ClassId, std::size_t>& counts, const SplitOptions& opt)
{
    const std::vector<std::pair<ClassId, std::size_t>> items(counts.begin(), counts.end());
    const std::size_t n = items.size();
    const double rs = opt.ratio.train + opt.ratio.validation + opt.ratio.test;
    const double target[3] = {opt.ratio.train / rs, opt.ratio.test / rs, opt.ratio.validation / rs};
    struct Best {
        std::size_t abandoned;
        double distance;
        std::size_t train;
        std::vector<int> codes;
    };
    std::optional<Best> best;
    std::size_t total = 1;
    for (std::size_t i = 0; i < n; ++i) total *= 4;
    for (std::size_t code = 0; code < total; ++code) {
        std::vector<int> codes(n);
        std::size_t c = code;
        for (std::size_t i = 0; i < n; ++i) {
            codes[n - 1 - i] = static_cast<int>(c % 4);
            c /= 4;
        }
        std::size_t abandoned_labels = 0, abandoned_mass = 0;
        std::set<std::size_t> atoms[3];
        std::size_t slot_mass[3] = {0, 0, 0}, slot_labels[3] = {0, 0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            if (codes[i] == 3) {
                ++abandoned_labels;
                abandoned_mass += items[i].second;
                continue;
            }
            for (std::size_t a : supp(decode_label(items[i].first, 7))) atoms[codes[i]].insert(a);
            slot_mass[codes[i]] += items[i].second;
            ++slot_labels[codes[i]];
        }
        if (abandoned_labels > opt.max_abandoned) continue;
        bool ok = true;
        for (int s = 0; s < 3; ++s) {
            if (slot_labels[s] == 0 || atoms[s].size() < opt.min_atoms_per_slot) ok = false;
            for (int t = s + 1; t < 3; ++t) {
                for (std::size_t a : atoms[s]) {
                    if (atoms[t].count(a)) ok = false;
                }
            }
        }
        if (!ok) continue;
        const double kept = static_cast<double>(slot_mass[0] + slot_mass[1] + slot_mass[2]);
        double d = 0;
        for (int s = 0; s < 3; ++s) d += std::abs(slot_mass[s] / kept - target[s]);
        Best cand{abandoned_mass, d, slot_mass[0], codes};
        bool take = !best;
        if (best) {
            if (cand.abandoned != best->abandoned) take = cand.abandoned < best->abandoned;
            else if (std::abs(cand.distance - best->distance) > 1e-12) take = cand.distance < best->distance;
            else if (cand.train != best->train) take = cand.train > best->train;
            else take = cand.codes < best->codes;
        }
        if (take) best = cand;
    }
    if (!best) return std::nullopt;
    SplitSpec spec;
    for (std::size_t i = 0; i < n; ++i) {
        switch (best->codes[i]) {
        case 0: spec.train.insert(items[i].first); break;
        case 1: spec.test.insert(items[i].first); break;
        case 2: spec.validation.insert(items[i].first); break;
        default: spec.abandoned.insert(items[i].first);
        }
    }
    return spec;
}

} // namespace

TEST_CASE("check_split examples")
{
    SplitSpec reference_split;
    reference_split.train = set_of({"0", "5", "3", "7", "35", "37", "357"});
    reference_split.validation = set_of({"2", "4", "24"});
    reference_split.test = set_of({"1", "6", "16"});
    CHECK(check_split(reference_split).empty());

    SplitSpec overlap;
    overlap.train = set_of({"27"});
    overlap.validation = set_of({"12"});
    const auto v = check_split(overlap);
    REQUIRE(v.size() == 1);
    CHECK(v[0].atom == 2);

    CHECK(check_split(SplitSpec{}).empty());
}

TEST_CASE("defect taxonomy splits with two abandoned labels")
{
    const auto counts = taxonomy_counts();
    const auto spec = solve_split(keys(counts), counts, {.ratio = {}, .max_abandoned = 2});
    REQUIRE(spec.has_value());
    CHECK(spec->abandoned == set_of({"27", "267"}));
    CHECK(spec->train == set_of({"0", "5", "3", "7", "35", "37", "357"}));
    CHECK(spec->validation == set_of({"2", "4", "24"}));
    CHECK(spec->test == set_of({"1", "6", "16"}));
    CHECK(check_split(*spec).empty());
}

TEST_CASE("defect taxonomy has no split without abandoning")
{
    const auto counts = taxonomy_counts();
    CHECK_FALSE(solve_split(keys(counts), counts, {.ratio = {}, .max_abandoned = 0}).has_value());
}

TEST_CASE("disjoint singletons take one slot each")
{
    std::map<ClassId, std::size_t> counts{{from_digits("1"), 10}, {from_digits("2"), 10}, {from_digits("3"), 10}};
    const auto spec = solve_split(keys(counts), counts, {.ratio = {1, 1, 1}});
    REQUIRE(spec.has_value());
    CHECK(spec->abandoned.empty());
    CHECK(spec->train.size() == 1);
    CHECK(spec->validation.size() == 1);
    CHECK(spec->test.size() == 1);
}

TEST_CASE("label cap")
{
    std::map<ClassId, std::size_t> counts;
    for (std::uint32_t c = 0; c < 21; ++c) counts[class_id(c)] = 1;
    CHECK_THROWS_AS(solve_split(keys(counts), counts), SearchSpaceTooLarge);
}

TEST_CASE("solver agrees with brute-force enumeration on random small instances")
{
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::uint32_t> label(0, 127);
    std::uniform_int_distribution<std::size_t> size(3, 7), count(1, 30), abandon(0, 2);
    for (int trial = 0; trial < 60; ++trial) {
        std::map<ClassId, std::size_t> counts;
        const std::size_t n = size(rng);
        while (counts.size() < n) {
            std::uint32_t c = label(rng);
            // Keep labels to at most two atoms so instances stay feasible often.
            if (__builtin_popcount(c) <= 2) counts[class_id(c)] = count(rng);
        }
        SplitOptions opt{.ratio = {0.5, 0.25, 0.25}, .max_abandoned = abandon(rng)};
        const auto fast = solve_split(keys(counts), counts, opt);
        const auto slow = brute_force(counts, opt);
        REQUIRE(fast.has_value() == slow.has_value());
        if (fast) {
            CHECK(*fast == *slow);
            CHECK(check_split(*fast).empty());
        }
    }
}

TEST_CASE("split JSON round trip")
{
    const auto counts = taxonomy_counts();
    const auto spec = solve_split(keys(counts), counts);
    REQUIRE(spec.has_value());
    const auto j = split_to_json(*spec, 7);
    CHECK(j["abandoned"]["labels"] == nlohmann::json({"27", "267"}));
    CHECK(split_from_json(j) == *spec);
}
