#include "fewshot/episodes.hpp"

#include <algorithm>
#include <map>

#include "fewshot/error.hpp"
#include "fewshot/random.hpp"

namespace fewshot {

void SamplerConfig::validate() const
{
    if (n_way < 2) throw ConfigError("n_way must be >= 2, got " + std::to_string(n_way));
    if (n_way > 30) throw ConfigError("n_way must be <= 30, got " + std::to_string(n_way));
    if (k_shot < 1) throw ConfigError("k_shot must be >= 1");
    if (m_query < 1) throw ConfigError("m_query must be >= 1");
}

namespace {

EpisodeEntry make_entry(const Dataset& ds, std::size_t position, int target, LabelMask labels)
{
    return EpisodeEntry{ds[position], position, target, labels};
}

std::size_t rank_of(const std::vector<std::uint32_t>& sorted, std::uint32_t value)
{
    return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), value) - sorted.begin());
}

} // namespace

Episode sample_episode_multiclass(const Dataset& ds, const SamplerConfig& cfg, std::mt19937_64& rng)
{
    cfg.validate();
    const std::size_t need = cfg.k_shot + cfg.m_query;
    std::vector<ClassId> candidates = ds.classes_by_first_appearance();
    if (candidates.size() < cfg.n_way) {
        throw InsufficientSamples("dataset has " + std::to_string(candidates.size()) + " classes, episode needs " +
                                  std::to_string(cfg.n_way));
    }
    for (ClassId c : candidates) {
        const std::size_t have = ds.positions(c).size();
        if (have < need) {
            throw InsufficientSamples("class " + class_digits(c, ds.label_width()) + " (id " + std::to_string(raw(c)) +
                                      ") has " + std::to_string(have) + " samples, episode needs " +
                                      std::to_string(need));
        }
    }

    partial_shuffle(candidates, cfg.n_way, rng);
    const std::vector<ClassId> chosen(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(cfg.n_way));

    Episode ep;
    ep.n_way = cfg.n_way;
    ep.k_shot = cfg.k_shot;
    ep.m_query = cfg.m_query;
    ep.mode = EpisodeMode::multi_class;
    for (ClassId c : chosen) ep.label_map.push_back(raw(c));
    std::sort(ep.label_map.begin(), ep.label_map.end());

    // Draw in selection order so the random stream does not depend on raw label values.
    for (ClassId c : chosen) {
        const int target = static_cast<int>(rank_of(ep.label_map, raw(c)));
        std::vector<std::size_t> pool = ds.positions(c);
        partial_shuffle(pool, need, rng);
        for (std::size_t i = 0; i < cfg.k_shot; ++i) {
            ep.support.push_back(make_entry(ds, pool[i], target, LabelMask{1} << target));
        }
        for (std::size_t i = cfg.k_shot; i < need; ++i) {
            ep.query.push_back(make_entry(ds, pool[i], target, LabelMask{1} << target));
        }
    }
    return ep;
}

LabelVector adapt_label(const LabelVector& label, const std::set<std::size_t>& sampled)
{
    LabelVector out(label.width());
    for (std::size_t atom : supp(label)) {
        if (sampled.count(atom)) out.set(atom);
    }
    return out;
}

LabelMask remap_atoms(const LabelVector& label, const std::vector<std::uint32_t>& label_map)
{
    LabelMask mask = 0;
    for (std::size_t j = 0; j < label_map.size(); ++j) {
        if (label_map[j] >= 1 && label_map[j] <= label.width() && label.test(label_map[j])) mask |= LabelMask{1} << j;
    }
    return mask;
}

Episode sample_episode_multilabel(const Dataset& ds, const SamplerConfig& cfg, std::mt19937_64& rng)
{
    cfg.validate();
    const std::size_t need = cfg.k_shot + cfg.m_query;

    // Atoms ordered by first appearance, ties by index.
    std::vector<std::pair<std::size_t, std::size_t>> order;
    for (const auto& [atom, positions] : ds.label_index()) order.emplace_back(positions.front(), atom);
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> candidates;
    for (const auto& [first, atom] : order) candidates.push_back(atom);

    if (candidates.size() < cfg.n_way) {
        throw InsufficientSamples("dataset has " + std::to_string(candidates.size()) +
                                  " atomic labels, episode needs " + std::to_string(cfg.n_way));
    }
    for (std::size_t atom : candidates) {
        const std::size_t have = ds.atom_positions(atom).size();
        if (have < need) {
            throw InsufficientSamples("atomic label " + std::to_string(atom) + " has " + std::to_string(have) +
                                      " samples, episode needs " + std::to_string(need));
        }
    }

    partial_shuffle(candidates, cfg.n_way, rng);
    const std::vector<std::size_t> chosen(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(cfg.n_way));

    Episode ep;
    ep.n_way = cfg.n_way;
    ep.k_shot = cfg.k_shot;
    ep.m_query = cfg.m_query;
    ep.mode = EpisodeMode::multi_label;
    for (std::size_t atom : chosen) ep.label_map.push_back(static_cast<std::uint32_t>(atom));
    std::sort(ep.label_map.begin(), ep.label_map.end());

    auto entry_for = [&](std::size_t position, std::size_t atom) {
        const LabelMask mask = remap_atoms(ds[position].label, ep.label_map);
        return make_entry(ds, position, static_cast<int>(rank_of(ep.label_map, static_cast<std::uint32_t>(atom))), mask);
    };

    std::set<std::size_t> support_ids;
    for (std::size_t atom : chosen) {
        std::vector<std::size_t> pool = ds.atom_positions(atom);
        partial_shuffle(pool, cfg.k_shot, rng);
        for (std::size_t i = 0; i < cfg.k_shot; ++i) {
            ep.support.push_back(entry_for(pool[i], atom));
            support_ids.insert(pool[i]);
        }
    }

    std::set<std::size_t> query_ids;
    for (std::size_t atom : chosen) {
        std::vector<std::size_t> pool;
        for (std::size_t p : ds.atom_positions(atom)) {
            if (!support_ids.count(p)) pool.push_back(p);
        }
        if (pool.size() < cfg.m_query) {
            throw InsufficientSamples("atomic label " + std::to_string(atom) + " has " + std::to_string(pool.size()) +
                                      " samples outside the support set, episode needs " +
                                      std::to_string(cfg.m_query));
        }
        partial_shuffle(pool, cfg.m_query, rng);
        for (std::size_t i = 0; i < cfg.m_query; ++i) {
            if (query_ids.insert(pool[i]).second) ep.query.push_back(entry_for(pool[i], atom));
        }
    }
    return ep;
}

Episode sample_episode(const Dataset& ds, const SamplerConfig& cfg, std::mt19937_64& rng)
{
    return cfg.mode == EpisodeMode::multi_class ? sample_episode_multiclass(ds, cfg, rng)
                                                : sample_episode_multilabel(ds, cfg, rng);
}

Episode episode_at(const Dataset& ds, const SamplerConfig& cfg, std::uint64_t index)
{
    auto rng = derived_rng(cfg.seed, index);
    return sample_episode(ds, cfg, rng);
}

std::vector<Episode> episode_stream(const Dataset& ds, const SamplerConfig& cfg, std::size_t count)
{
    if (count < 1) throw ContractError("episode_stream: count must be >= 1");
    std::vector<Episode> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(episode_at(ds, cfg, i));
    return out;
}

nlohmann::json episode_to_json(const Episode& ep)
{
    auto entries = [](const std::vector<EpisodeEntry>& list) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& e : list) {
            std::vector<int> labels;
            for (int j = 0; j < 32; ++j) {
                if ((e.labels >> j) & 1u) labels.push_back(j);
            }
            arr.push_back({{"source_id", e.sample.source_id}, {"dataset_index", e.dataset_index}, {"labels", labels}});
        }
        return arr;
    };
    return {{"mode", to_string(ep.mode)},
            {"n_way", ep.n_way},
            {"k_shot", ep.k_shot},
            {"m_query", ep.m_query},
            {"label_map", ep.label_map},
            {"support", entries(ep.support)},
            {"query", entries(ep.query)}};
}

} // namespace fewshot
