#include "fewshot/core.hpp"

#include <algorithm>

#include "fewshot/error.hpp"

namespace fewshot {

namespace {

void check_width(std::size_t width)
{
    if (width == 0 || width > kMaxLabelWidth) {
        throw InvalidWidth("label width " + std::to_string(width) + " outside [1, " +
                           std::to_string(kMaxLabelWidth) + "]");
    }
}

const std::vector<std::size_t> kNoPositions;

} // namespace

LabelVector::LabelVector(std::size_t width) : bits_(width, 0) { check_width(width); }

LabelVector::LabelVector(std::vector<std::uint8_t> bits) : bits_(std::move(bits))
{
    check_width(bits_.size());
    for (auto b : bits_) {
        if (b > 1) throw InvalidClass("label entries must be 0 or 1");
    }
}

LabelVector LabelVector::from_atoms(std::size_t width, const std::set<std::size_t>& atoms)
{
    LabelVector v(width);
    for (std::size_t a : atoms) v.set(a);
    return v;
}

bool LabelVector::test(std::size_t atom) const
{
    if (atom == 0 || atom > bits_.size()) {
        throw InvalidClass("atomic label " + std::to_string(atom) + " outside [1, " + std::to_string(bits_.size()) + "]");
    }
    return bits_[atom - 1] != 0;
}

void LabelVector::set(std::size_t atom, bool value)
{
    if (atom == 0 || atom > bits_.size()) {
        throw InvalidClass("atomic label " + std::to_string(atom) + " outside [1, " + std::to_string(bits_.size()) + "]");
    }
    bits_[atom - 1] = value ? 1 : 0;
}

bool LabelVector::none() const
{
    return std::all_of(bits_.begin(), bits_.end(), [](std::uint8_t b) { return b == 0; });
}

std::size_t LabelVector::count() const
{
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::string LabelVector::digits() const
{
    std::string out;
    for (std::size_t i = 0; i < bits_.size(); ++i) {
        if (bits_[i]) out += std::to_string(i + 1);
    }
    return out.empty() ? "0" : out;
}

ClassId encode_label(const LabelVector& v)
{
    check_width(v.width());
    std::uint32_t c = 0;
    for (std::size_t i = 0; i < v.width(); ++i) {
        if (v.bits()[i]) c |= std::uint32_t{1} << i;
    }
    return class_id(c);
}

LabelVector decode_label(ClassId c, std::size_t width)
{
    check_width(width);
    if (raw(c) >> width != 0) {
        throw InvalidClass("class id " + std::to_string(raw(c)) + " out of range for width " + std::to_string(width));
    }
    std::vector<std::uint8_t> bits(width);
    for (std::size_t i = 0; i < width; ++i) bits[i] = static_cast<std::uint8_t>((raw(c) >> i) & 1u);
    return LabelVector(std::move(bits));
}

std::set<std::size_t> supp(const LabelVector& v)
{
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < v.width(); ++i) {
        if (v.bits()[i]) out.insert(i + 1);
    }
    return out;
}

std::string class_digits(ClassId c, std::size_t width) { return decode_label(c, width).digits(); }

TimeSeries::TimeSeries(std::vector<double> values)
    : values_(std::make_shared<const std::vector<double>>(std::move(values)))
{
}

const std::vector<double>& TimeSeries::values() const
{
    static const std::vector<double> empty;
    return values_ ? *values_ : empty;
}

Dataset::Dataset(std::vector<Sample> samples, std::size_t label_width)
    : samples_(std::move(samples)), width_(label_width)
{
    check_width(width_);
    for (std::size_t j = 0; j < samples_.size(); ++j) {
        const LabelVector& label = samples_[j].label;
        if (label.width() != width_) {
            throw InvalidWidth("sample '" + samples_[j].source_id + "' has label width " +
                               std::to_string(label.width()) + ", dataset width is " + std::to_string(width_));
        }
        index_[encode_label(label)].push_back(j);
        for (std::size_t atom : supp(label)) label_index_[atom].push_back(j);
    }
}

const std::vector<std::size_t>& Dataset::positions(ClassId c) const
{
    auto it = index_.find(c);
    return it == index_.end() ? kNoPositions : it->second;
}

const std::vector<std::size_t>& Dataset::atom_positions(std::size_t atom) const
{
    auto it = label_index_.find(atom);
    return it == label_index_.end() ? kNoPositions : it->second;
}

std::map<ClassId, std::size_t> Dataset::class_counts() const
{
    std::map<ClassId, std::size_t> out;
    for (const auto& [c, pos] : index_) out[c] = pos.size();
    return out;
}

std::vector<ClassId> Dataset::classes() const
{
    std::vector<ClassId> out;
    for (const auto& [c, pos] : index_) out.push_back(c);
    return out;
}

std::vector<ClassId> Dataset::classes_by_first_appearance() const
{
    std::vector<std::pair<std::size_t, ClassId>> firsts;
    for (const auto& [c, pos] : index_) firsts.emplace_back(pos.front(), c);
    std::sort(firsts.begin(), firsts.end());
    std::vector<ClassId> out;
    for (const auto& [p, c] : firsts) out.push_back(c);
    return out;
}

std::vector<std::size_t> Dataset::atoms() const
{
    std::vector<std::size_t> out;
    for (const auto& [a, pos] : label_index_) out.push_back(a);
    return out;
}

Dataset Dataset::subset(const std::set<ClassId>& keep) const
{
    std::vector<Sample> kept;
    for (const auto& s : samples_) {
        if (keep.count(encode_label(s.label))) kept.push_back(s);
    }
    return Dataset(std::move(kept), width_);
}

std::string to_string(EpisodeMode mode)
{
    return mode == EpisodeMode::multi_class ? "multi_class" : "multi_label";
}

EpisodeMode parse_episode_mode(const std::string& text)
{
    if (text == "multi_class") return EpisodeMode::multi_class;
    if (text == "multi_label") return EpisodeMode::multi_label;
    throw ConfigError("mode: unknown value '" + text + "'; allowed: multi_class, multi_label");
}

std::vector<std::string> check_episode(const Episode& ep)
{
    std::vector<std::string> issues;
    const std::size_t n = ep.n_way;
    if (n == 0 || n > 32) {
        issues.push_back("n_way out of range");
        return issues;
    }
    const LabelMask full = n == 32 ? ~LabelMask{0} : ((LabelMask{1} << n) - 1);

    std::set<std::size_t> support_ids;
    for (const auto& e : ep.support) support_ids.insert(e.dataset_index);
    for (const auto& e : ep.query) {
        if (support_ids.count(e.dataset_index)) {
            issues.push_back("sample " + std::to_string(e.dataset_index) + " is in both support and query");
        }
    }
    if (ep.label_map.size() != n) issues.push_back("label_map size differs from n_way");
    if (!std::is_sorted(ep.label_map.begin(), ep.label_map.end()) ||
        std::adjacent_find(ep.label_map.begin(), ep.label_map.end()) != ep.label_map.end()) {
        issues.push_back("label_map is not strictly ascending");
    }

    auto check_entries = [&](const std::vector<EpisodeEntry>& entries, const char* part) {
        for (const auto& e : entries) {
            if (e.labels == 0 || (e.labels & ~full) != 0) {
                issues.push_back(std::string(part) + " entry with label set outside {0..N-1}");
            }
        }
    };
    check_entries(ep.support, "support");
    check_entries(ep.query, "query");

    if (ep.mode == EpisodeMode::multi_class) {
        if (ep.support.size() != ep.k_shot * n) issues.push_back("support size differs from K*N");
        if (ep.query.size() != ep.m_query * n) issues.push_back("query size differs from M*N");
        std::vector<std::size_t> s_count(n, 0), q_count(n, 0);
        for (const auto& e : ep.support) {
            if (e.target < 0 || static_cast<std::size_t>(e.target) >= n || e.labels != (LabelMask{1} << e.target)) {
                issues.push_back("support entry target inconsistent with its label set");
            } else {
                ++s_count[static_cast<std::size_t>(e.target)];
            }
        }
        for (const auto& e : ep.query) {
            if (e.target < 0 || static_cast<std::size_t>(e.target) >= n || e.labels != (LabelMask{1} << e.target)) {
                issues.push_back("query entry target inconsistent with its label set");
            } else {
                ++q_count[static_cast<std::size_t>(e.target)];
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (s_count[j] != ep.k_shot) issues.push_back("class " + std::to_string(j) + " lacks K support samples");
            if (q_count[j] != ep.m_query) issues.push_back("class " + std::to_string(j) + " lacks M query samples");
        }
        std::set<std::size_t> query_ids;
        for (const auto& e : ep.query) {
            if (!query_ids.insert(e.dataset_index).second) issues.push_back("duplicate query sample");
        }
        if (support_ids.size() != ep.support.size()) issues.push_back("duplicate support sample");
    } else {
        LabelMask active = 0;
        for (const auto& e : ep.support) active |= e.labels;
        if (active != full) issues.push_back("some remapped label is inactive in the support set");
        std::set<std::size_t> query_ids;
        for (const auto& e : ep.query) {
            if (!query_ids.insert(e.dataset_index).second) issues.push_back("duplicate query sample");
        }
    }
    return issues;
}

} // namespace fewshot
