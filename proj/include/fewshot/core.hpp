#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace fewshot {

// Integer encoding of a label vector: sum over set bits i (1-based) of 2^(i-1).
enum class ClassId : std::uint32_t {};

constexpr std::uint32_t raw(ClassId c) { return static_cast<std::uint32_t>(c); }
constexpr ClassId class_id(std::uint32_t v) { return static_cast<ClassId>(v); }

constexpr std::size_t kMaxLabelWidth = 30;

// Fixed-width binary defect indicator. Atomic indices are 1-based at the interface.
class LabelVector {
public:
    LabelVector() = default;
    explicit LabelVector(std::size_t width);
    // bits[0] flags atomic label 1.
    explicit LabelVector(std::vector<std::uint8_t> bits);

    static LabelVector from_atoms(std::size_t width, const std::set<std::size_t>& atoms);

    std::size_t width() const { return bits_.size(); }
    bool test(std::size_t atom) const;
    void set(std::size_t atom, bool value = true);
    bool none() const;
    std::size_t count() const;
    const std::vector<std::uint8_t>& bits() const { return bits_; }

    // Atom digits in ascending order, e.g. "16"; "0" for the all-zero vector.
    std::string digits() const;

    friend bool operator==(const LabelVector&, const LabelVector&) = default;
    friend auto operator<=>(const LabelVector&, const LabelVector&) = default;

private:
    std::vector<std::uint8_t> bits_;
};

ClassId encode_label(const LabelVector& v);
LabelVector decode_label(ClassId c, std::size_t width);
// 1-based indices of the set bits.
std::set<std::size_t> supp(const LabelVector& v);

// Atom digits for a class id, e.g. 33 -> "16" at width 7.
std::string class_digits(ClassId c, std::size_t width);

// Immutable univariate series; copies share storage.
class TimeSeries {
public:
    TimeSeries() = default;
    explicit TimeSeries(std::vector<double> values);

    std::size_t length() const { return values_ ? values_->size() : 0; }
    const std::vector<double>& values() const;
    double operator[](std::size_t i) const { return (*values_)[i]; }

private:
    std::shared_ptr<const std::vector<double>> values_;
};

struct Sample {
    TimeSeries series;
    LabelVector label;
    std::string source_id;
};

// Samples with a fixed label width plus per-class and per-atom indices.
class Dataset {
public:
    Dataset() = default;
    Dataset(std::vector<Sample> samples, std::size_t label_width);

    std::size_t size() const { return samples_.size(); }
    bool empty() const { return samples_.empty(); }
    std::size_t label_width() const { return width_; }
    const std::vector<Sample>& samples() const { return samples_; }
    const Sample& operator[](std::size_t i) const { return samples_.at(i); }

    // Positions of samples bearing exactly this label (empty if none).
    const std::vector<std::size_t>& positions(ClassId c) const;
    // Positions of samples with atomic label `atom` (1-based) set.
    const std::vector<std::size_t>& atom_positions(std::size_t atom) const;

    const std::map<ClassId, std::vector<std::size_t>>& index() const { return index_; }
    const std::map<std::size_t, std::vector<std::size_t>>& label_index() const { return label_index_; }

    std::map<ClassId, std::size_t> class_counts() const;
    std::vector<ClassId> classes() const;
    // Classes ordered by the position of their first sample.
    std::vector<ClassId> classes_by_first_appearance() const;
    // Atoms with at least one sample, ascending.
    std::vector<std::size_t> atoms() const;

    // Samples whose label is in `keep`, in original order.
    Dataset subset(const std::set<ClassId>& keep) const;

private:
    std::vector<Sample> samples_;
    std::size_t width_ = 0;
    std::map<ClassId, std::vector<std::size_t>> index_;
    std::map<std::size_t, std::vector<std::size_t>> label_index_;
};

enum class EpisodeMode { multi_class, multi_label };

std::string to_string(EpisodeMode mode);
EpisodeMode parse_episode_mode(const std::string& text);

// Membership bitmask over remapped labels {0..N-1}.
using LabelMask = std::uint32_t;

struct EpisodeEntry {
    Sample sample;
    // Position in the source dataset; identifies the sample.
    std::size_t dataset_index = 0;
    // Remapped class in multi-class mode.
    int target = 0;
    // Remapped label set (multi-class entries have exactly one bit).
    LabelMask labels = 0;
};

struct Episode {
    std::vector<EpisodeEntry> support;
    std::vector<EpisodeEntry> query;
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    std::size_t m_query = 0;
    EpisodeMode mode = EpisodeMode::multi_class;
    // label_map[j] is the raw label remapped to j: a raw ClassId (multi-class) or a
    // 1-based atomic index (multi-label). Ascending.
    std::vector<std::uint32_t> label_map;
};

// Returns a list of violated episode invariants (empty when valid).
std::vector<std::string> check_episode(const Episode& episode);

} // namespace fewshot
