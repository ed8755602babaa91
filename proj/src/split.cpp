#include "fewshot/split.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "fewshot/error.hpp"

namespace fewshot {

namespace {

constexpr double kTieTolerance = 1e-12;
constexpr double kMaxSearchWork = 1e8;

// Slot codes in tie-break preference order.
enum Code : int { kTrain = 0, kTest = 1, kValidation = 2, kAbandoned = 3 };

struct Candidate {
    std::size_t abandoned_mass = 0;
    double distance = 0.0;
    std::size_t train_mass = 0;
    std::vector<int> codes;
};

bool better(const Candidate& a, const Candidate& b)
{
    if (a.abandoned_mass != b.abandoned_mass) return a.abandoned_mass < b.abandoned_mass;
    if (std::abs(a.distance - b.distance) > kTieTolerance) return a.distance < b.distance;
    if (a.train_mass != b.train_mass) return a.train_mass > b.train_mass;
    return a.codes < b.codes;
}

double binomial(std::size_t n, std::size_t k)
{
    double r = 1.0;
    for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
    return r;
}

std::size_t find(std::vector<std::size_t>& parent, std::size_t i)
{
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
}

} // namespace

std::string to_string(Slot slot)
{
    switch (slot) {
    case Slot::train: return "train";
    case Slot::validation: return "validation";
    case Slot::test: return "test";
    }
    return "?";
}

const std::set<ClassId>& SplitSpec::slot(Slot s) const
{
    switch (s) {
    case Slot::train: return train;
    case Slot::validation: return validation;
    case Slot::test: return test;
    }
    return train;
}

std::string SplitViolation::describe() const
{
    if (atom == 0) return "label in both " + first + " and " + second;
    return first + " and " + second + " share atomic label " + std::to_string(atom);
}

std::set<std::size_t> footprint(const std::set<ClassId>& labels)
{
    std::set<std::size_t> atoms;
    for (ClassId c : labels) {
        for (std::size_t i = 0; i < 32; ++i) {
            if ((raw(c) >> i) & 1u) atoms.insert(i + 1);
        }
    }
    return atoms;
}

std::vector<SplitViolation> check_split(const SplitSpec& spec)
{
    std::vector<SplitViolation> out;
    const std::array<Slot, 3> slots{Slot::train, Slot::validation, Slot::test};
    for (std::size_t a = 0; a < slots.size(); ++a) {
        for (std::size_t b = a + 1; b < slots.size(); ++b) {
            const auto fa = footprint(spec.slot(slots[a]));
            const auto fb = footprint(spec.slot(slots[b]));
            for (std::size_t atom : fa) {
                if (fb.count(atom)) out.push_back({to_string(slots[a]), to_string(slots[b]), atom});
            }
        }
    }
    for (Slot s : slots) {
        for (ClassId c : spec.slot(s)) {
            if (spec.abandoned.count(c)) out.push_back({to_string(s), "abandoned", 0});
        }
    }
    return out;
}

std::optional<SplitSpec> solve_split(const std::set<ClassId>& labels, const std::map<ClassId, std::size_t>& counts,
                                     const SplitOptions& options)
{
    const std::size_t n = labels.size();
    if (n > options.max_labels) {
        throw SearchSpaceTooLarge("split search over " + std::to_string(n) + " labels exceeds the cap of " +
                                  std::to_string(options.max_labels));
    }
    const double ratio_sum = options.ratio.train + options.ratio.validation + options.ratio.test;
    if (!(options.ratio.train >= 0 && options.ratio.validation >= 0 && options.ratio.test >= 0) || ratio_sum <= 0) {
        throw ConfigError("split ratio must be non-negative with a positive sum");
    }
    // Target shares indexed by slot code.
    const std::array<double, 3> target{options.ratio.train / ratio_sum, options.ratio.test / ratio_sum,
                                       options.ratio.validation / ratio_sum};

    const std::vector<ClassId> ids(labels.begin(), labels.end());
    std::vector<std::size_t> mass(n);
    std::uint32_t all_bits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        auto it = counts.find(ids[i]);
        mass[i] = it == counts.end() ? 0 : it->second;
        all_bits |= raw(ids[i]);
    }

    const std::size_t max_abandoned = std::min(options.max_abandoned, n);
    const std::size_t max_units = std::min<std::size_t>(n, static_cast<std::size_t>(std::popcount(all_bits)) + 1);
    double work = 0.0;
    for (std::size_t k = 0; k <= max_abandoned; ++k) work += binomial(n, k);
    work *= std::pow(3.0, static_cast<double>(max_units));
    if (work > kMaxSearchWork) {
        throw SearchSpaceTooLarge("split search would examine about " + std::to_string(static_cast<long long>(work)) +
                                  " assignments");
    }

    std::optional<Candidate> best;
    std::vector<std::size_t> chosen;

    auto evaluate = [&](const std::vector<bool>& abandoned) {
        // Labels that share an atom must share a slot: group them.
        std::vector<std::size_t> parent(n);
        std::iota(parent.begin(), parent.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (abandoned[i]) continue;
            for (std::size_t j = i + 1; j < n; ++j) {
                if (!abandoned[j] && (raw(ids[i]) & raw(ids[j])) != 0) parent[find(parent, i)] = find(parent, j);
            }
        }
        std::vector<std::size_t> unit_of(n, 0);
        std::vector<std::uint32_t> unit_bits;
        std::vector<std::size_t> unit_mass;
        std::vector<std::size_t> root_unit(n, static_cast<std::size_t>(-1));
        std::size_t abandoned_mass = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (abandoned[i]) {
                abandoned_mass += mass[i];
                continue;
            }
            const std::size_t r = find(parent, i);
            if (root_unit[r] == static_cast<std::size_t>(-1)) {
                root_unit[r] = unit_bits.size();
                unit_bits.push_back(0);
                unit_mass.push_back(0);
            }
            unit_of[i] = root_unit[r];
            unit_bits[unit_of[i]] |= raw(ids[i]);
            unit_mass[unit_of[i]] += mass[i];
        }
        if (best && abandoned_mass > best->abandoned_mass) return;

        const std::size_t u = unit_bits.size();
        std::vector<int> assign(u, 0);
        while (true) {
            std::array<std::uint32_t, 3> bits{0, 0, 0};
            std::array<std::size_t, 3> slot_mass{0, 0, 0};
            std::array<std::size_t, 3> slot_units{0, 0, 0};
            for (std::size_t x = 0; x < u; ++x) {
                bits[static_cast<std::size_t>(assign[x])] |= unit_bits[x];
                slot_mass[static_cast<std::size_t>(assign[x])] += unit_mass[x];
                ++slot_units[static_cast<std::size_t>(assign[x])];
            }
            bool feasible = true;
            for (std::size_t s = 0; s < 3; ++s) {
                if (slot_units[s] == 0 ||
                    static_cast<std::size_t>(std::popcount(bits[s])) < options.min_atoms_per_slot) {
                    feasible = false;
                }
            }
            if (feasible) {
                const std::size_t kept = slot_mass[0] + slot_mass[1] + slot_mass[2];
                double distance = 0.0;
                for (std::size_t s = 0; s < 3; ++s) {
                    const double share = kept == 0 ? 0.0 : static_cast<double>(slot_mass[s]) / static_cast<double>(kept);
                    distance += std::abs(share - target[s]);
                }
                Candidate c{abandoned_mass, distance, slot_mass[0], std::vector<int>(n)};
                for (std::size_t i = 0; i < n; ++i) c.codes[i] = abandoned[i] ? kAbandoned : assign[unit_of[i]];
                if (!best || better(c, *best)) best = std::move(c);
            }
            std::size_t pos = 0;
            while (pos < u && assign[pos] == 2) assign[pos++] = 0;
            if (pos == u) break;
            ++assign[pos];
        }
    };

    // Enumerate abandoned subsets of every size up to the limit.
    for (std::size_t k = 0; k <= max_abandoned; ++k) {
        std::vector<std::size_t> comb(k);
        std::iota(comb.begin(), comb.end(), 0);
        while (true) {
            std::vector<bool> abandoned(n, false);
            for (std::size_t i : comb) abandoned[i] = true;
            evaluate(abandoned);
            if (k == 0) break;
            std::size_t i = k;
            while (i > 0 && comb[i - 1] == n - k + (i - 1)) --i;
            if (i == 0) break;
            ++comb[i - 1];
            for (std::size_t j = i; j < k; ++j) comb[j] = comb[j - 1] + 1;
        }
    }

    if (!best) return std::nullopt;
    SplitSpec spec;
    spec.ratio = options.ratio;
    for (std::size_t i = 0; i < n; ++i) {
        switch (best->codes[i]) {
        case kTrain: spec.train.insert(ids[i]); break;
        case kTest: spec.test.insert(ids[i]); break;
        case kValidation: spec.validation.insert(ids[i]); break;
        default: spec.abandoned.insert(ids[i]); break;
        }
    }
    return spec;
}

nlohmann::json split_to_json(const SplitSpec& spec, std::size_t label_width)
{
    auto ids = [](const std::set<ClassId>& s) {
        std::vector<std::uint32_t> out;
        for (ClassId c : s) out.push_back(raw(c));
        return out;
    };
    auto names = [label_width](const std::set<ClassId>& s) {
        std::vector<std::string> out;
        for (ClassId c : s) out.push_back(class_digits(c, label_width));
        return out;
    };
    nlohmann::json j;
    j["label_width"] = label_width;
    j["ratio"] = {spec.ratio.train, spec.ratio.validation, spec.ratio.test};
    for (auto [key, set] : {std::pair<const char*, const std::set<ClassId>*>{"train", &spec.train},
                            {"validation", &spec.validation},
                            {"test", &spec.test},
                            {"abandoned", &spec.abandoned}}) {
        j[key] = {{"class_ids", ids(*set)}, {"labels", names(*set)}};
    }
    return j;
}

SplitSpec split_from_json(const nlohmann::json& j)
{
    auto read = [&j](const char* key) {
        std::set<ClassId> out;
        for (auto v : j.at(key).at("class_ids")) out.insert(class_id(v.get<std::uint32_t>()));
        return out;
    };
    SplitSpec spec;
    spec.train = read("train");
    spec.validation = read("validation");
    spec.test = read("test");
    spec.abandoned = read("abandoned");
    if (j.contains("ratio")) {
        const auto r = j["ratio"].get<std::vector<double>>();
        if (r.size() != 3) throw FormatError("split ratio must have three entries");
        spec.ratio = {r[0], r[1], r[2]};
    }
    return spec;
}

} // namespace fewshot
