#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewshot/core.hpp"

namespace fewshot {

enum class Slot { train, validation, test };

std::string to_string(Slot slot);

// Target share of samples per slot (normalized before use).
struct SplitRatio {
    double train = 0.5;
    double validation = 0.25;
    double test = 0.25;
};

struct SplitSpec {
    std::set<ClassId> train;
    std::set<ClassId> validation;
    std::set<ClassId> test;
    std::set<ClassId> abandoned;
    SplitRatio ratio;

    const std::set<ClassId>& slot(Slot s) const;

    friend bool operator==(const SplitSpec& a, const SplitSpec& b)
    {
        return a.train == b.train && a.validation == b.validation && a.test == b.test && a.abandoned == b.abandoned;
    }
};

struct SplitViolation {
    std::string first;
    std::string second;
    // Shared atomic label (1-based), or 0 when a label is both kept and abandoned.
    std::size_t atom = 0;

    std::string describe() const;
};

// Atomic labels used by a set of classes.
std::set<std::size_t> footprint(const std::set<ClassId>& labels);

// Empty iff the three slots have pairwise disjoint atomic footprints and no kept label is abandoned.
std::vector<SplitViolation> check_split(const SplitSpec& spec);

struct SplitOptions {
    SplitRatio ratio;
    std::size_t max_abandoned = 2;
    // Each slot must cover at least this many atomic labels (and hold at least one label).
    std::size_t min_atoms_per_slot = 1;
    std::size_t max_labels = 20;
};

// Exhaustive search over slot assignments. Minimizes abandoned sample count, then the L1
// distance between slot shares and the target ratio, then prefers a larger train slot;
// remaining ties go to the assignment that is smallest label by label in ascending ClassId
// order (train < test < validation < abandoned). Returns nullopt when no feasible
// assignment abandons at most max_abandoned labels.
std::optional<SplitSpec> solve_split(const std::set<ClassId>& labels, const std::map<ClassId, std::size_t>& counts,
                                     const SplitOptions& options = {});

nlohmann::json split_to_json(const SplitSpec& spec, std::size_t label_width);
SplitSpec split_from_json(const nlohmann::json& j);

} // namespace fewshot
