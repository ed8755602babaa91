#include "fewshot/fsl.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>

#include "fewshot/ad/grad.hpp"
#include "fewshot/ad/ops.hpp"
#include "fewshot/error.hpp"

namespace fewshot {

using ad::ParamSet;
using ad::Tensor;
using ad::Var;

namespace {

std::vector<std::size_t> mask_atoms(LabelMask m)
{
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < 32; ++j) {
        if (m >> j & 1u) out.push_back(j);
    }
    return out;
}

bool label_space_order(LabelMask a, LabelMask b)
{
    const int ca = std::popcount(a), cb = std::popcount(b);
    if (ca != cb) return ca < cb;
    return mask_atoms(a) < mask_atoms(b);
}

// (rows.size(), total) matrix picking the given rows of a (total, D) operand.
Var row_selector(const std::vector<std::size_t>& rows, std::size_t total)
{
    Tensor t({rows.size(), total}, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) t[i * total + rows[i]] = 1.0;
    return ad::constant(std::move(t));
}

// Averaging matrix: row c holds 1/|members_c| at each member column.
Var averaging_matrix(const std::vector<std::vector<std::size_t>>& members, std::size_t total)
{
    Tensor t({members.size(), total}, 0.0);
    for (std::size_t c = 0; c < members.size(); ++c) {
        const double w = 1.0 / static_cast<double>(members[c].size());
        for (std::size_t i : members[c]) t[c * total + i] = w;
    }
    return ad::constant(std::move(t));
}

void require_embeddings(const Var& e, std::size_t rows, const char* what)
{
    if (e.value().rank() != 2 || e.shape()[0] != rows) {
        throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + " embedding rows, got " +
                         ad::to_string(e.shape()));
    }
}

std::vector<EpisodeEntry> concat(const std::vector<EpisodeEntry>& a, const std::vector<EpisodeEntry>& b)
{
    std::vector<EpisodeEntry> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

std::vector<int> targets_of(std::span<const EpisodeEntry> entries)
{
    std::vector<int> out;
    for (const auto& e : entries) out.push_back(e.target);
    return out;
}

std::vector<LabelMask> masks_of(std::span<const EpisodeEntry> entries)
{
    std::vector<LabelMask> out;
    for (const auto& e : entries) out.push_back(e.labels);
    return out;
}

std::vector<std::uint32_t> truth_of(const std::vector<EpisodeEntry>& query, EpisodeMode mode)
{
    std::vector<std::uint32_t> out;
    for (const auto& e : query) {
        out.push_back(mode == EpisodeMode::multi_class ? static_cast<std::uint32_t>(e.target) : e.labels);
    }
    return out;
}

std::vector<std::uint32_t> maml_predictions(const Tensor& logits, EpisodeMode mode)
{
    if (mode == EpisodeMode::multi_label) return threshold_sigmoid(logits);
    std::vector<std::uint32_t> out;
    for (std::size_t c : argmax_rows(logits)) out.push_back(static_cast<std::uint32_t>(c));
    return out;
}

} // namespace

std::string to_string(Distance d) { return d == Distance::euclidean ? "euclidean" : "cosine"; }

Distance parse_distance(const std::string& name)
{
    if (name == "euclidean") return Distance::euclidean;
    if (name == "cosine") return Distance::cosine;
    throw ConfigError("distance: unknown name '" + name + "'; allowed: euclidean, cosine");
}

std::optional<std::size_t> LabelSpace::index_of(LabelMask mask) const
{
    const auto it = std::find(combinations.begin(), combinations.end(), mask);
    if (it == combinations.end()) return std::nullopt;
    return static_cast<std::size_t>(it - combinations.begin());
}

LabelSpace build_label_space(std::span<const LabelMask> support_labels)
{
    if (support_labels.empty()) throw ContractError("label space: support is empty");
    std::set<LabelMask> seen;
    for (LabelMask m : support_labels) {
        // Every non-empty submask of m.
        for (LabelMask s = m; s != 0; s = (s - 1) & m) seen.insert(s);
    }
    if (seen.empty()) throw DegenerateEpisode("label space: no support sample carries an active label");
    LabelSpace space{{seen.begin(), seen.end()}};
    std::sort(space.combinations.begin(), space.combinations.end(), label_space_order);
    return space;
}

Var proto_centroids_multiclass(const Var& embeddings, std::span<const int> labels, std::size_t n_classes)
{
    require_embeddings(embeddings, labels.size(), "proto_centroids_multiclass");
    std::vector<std::vector<std::size_t>> members(n_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
            throw ContractError("proto_centroids_multiclass: label " + std::to_string(labels[i]) + " out of range");
        }
        members[static_cast<std::size_t>(labels[i])].push_back(i);
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (members[c].empty()) throw ContractError("proto_centroids_multiclass: class " + std::to_string(c) + " is empty");
    }
    return ad::matmul(averaging_matrix(members, labels.size()), embeddings);
}

Var proto_centroids_multilabel(const Var& embeddings, std::span<const LabelMask> labels, const LabelSpace& space)
{
    require_embeddings(embeddings, labels.size(), "proto_centroids_multilabel");
    std::vector<std::vector<std::size_t>> members(space.size());
    for (std::size_t c = 0; c < space.size(); ++c) {
        const LabelMask l = space.combinations[c];
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if ((labels[i] & l) == l) members[c].push_back(i);
        }
        if (members[c].empty()) {
            throw ContractError("proto_centroids_multilabel: no support sample covers combination " +
                                std::to_string(l));
        }
    }
    return ad::matmul(averaging_matrix(members, labels.size()), embeddings);
}

Var proto_logits(const Var& queries, const Var& centroids, const ProtoConfig& cfg)
{
    if (centroids.value().rank() != 2 || centroids.shape()[0] < 2) {
        throw ContractError("proto_logits: at least two centroids are required");
    }
    Var q = queries, c = centroids;
    if (cfg.normalize) {
        q = ad::l2_normalize(q);
        c = ad::l2_normalize(c);
    }
    if (cfg.distance == Distance::euclidean) return ad::neg(ad::sq_euclidean(q, c));
    return ad::add_scalar(ad::cosine_similarity(q, c), -1.0);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits)
{
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    std::vector<std::size_t> out(rows, 0);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* r = logits.ptr() + i * cols;
        for (std::size_t j = 1; j < cols; ++j) {
            if (r[j] > r[out[i]]) out[i] = j;
        }
    }
    return out;
}

std::vector<LabelMask> proto_predict_multilabel(const Var& queries, const Var& centroids, const LabelSpace& space,
                                                const ProtoConfig& cfg)
{
    if (centroids.shape()[0] != space.size()) throw ContractError("proto_predict_multilabel: centroids misaligned");
    std::vector<LabelMask> out;
    for (std::size_t c : argmax_rows(proto_logits(queries, centroids, cfg).value())) {
        out.push_back(space.combinations[c]);
    }
    return out;
}

std::vector<LabelMask> threshold_sigmoid(const Tensor& logits)
{
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    std::vector<LabelMask> out;
    for (std::size_t i = 0; i < rows; ++i) {
        LabelMask m = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double p = 1.0 / (1.0 + std::exp(-logits[i * cols + j]));
            if (p > 0.5) m |= 1u << j;
        }
        out.push_back(m);
    }
    return out;
}

Tensor series_batch(std::span<const EpisodeEntry> entries)
{
    if (entries.empty()) throw ContractError("series_batch: no entries");
    const std::size_t len = entries[0].sample.series.length();
    Tensor t({entries.size(), 1, len});
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& v = entries[i].sample.series.values();
        if (v.size() != len) throw ShapeError("series_batch: series lengths differ");
        std::copy(v.begin(), v.end(), t.ptr() + i * len);
    }
    return t;
}

EpisodeOutcome proto_episode(const Backbone& net, const ParamSet& params, const Episode& episode,
                             const ProtoConfig& cfg, bool train_mode, std::mt19937_64& rng)
{
    const std::size_t s = episode.support.size(), q = episode.query.size();
    if (s == 0 || q == 0) throw DegenerateEpisode("prototypical episode needs support and query samples");
    const auto all = concat(episode.support, episode.query);
    const Var embeddings = net.forward(params, ad::constant(series_batch(all)), train_mode, rng);

    std::vector<std::size_t> support_rows(s), query_rows(q);
    for (std::size_t i = 0; i < s; ++i) support_rows[i] = i;
    for (std::size_t i = 0; i < q; ++i) query_rows[i] = s + i;
    const Var support = ad::matmul(row_selector(support_rows, s + q), embeddings);
    const Var query = ad::matmul(row_selector(query_rows, s + q), embeddings);

    EpisodeOutcome out;
    out.truth = truth_of(episode.query, episode.mode);
    if (episode.mode == EpisodeMode::multi_class) {
        const auto targets = targets_of(episode.support);
        const Var logits = proto_logits(query, proto_centroids_multiclass(support, targets, episode.n_way), cfg);
        out.loss = ad::cross_entropy_with_logits(logits, targets_of(episode.query));
        for (std::size_t c : argmax_rows(logits.value())) out.predicted.push_back(static_cast<std::uint32_t>(c));
        return out;
    }

    const auto support_masks = masks_of(episode.support);
    const LabelSpace space = build_label_space(support_masks);
    if (space.size() < 2) throw DegenerateEpisode("label space holds a single combination");
    const Var logits = proto_logits(query, proto_centroids_multilabel(support, support_masks, space), cfg);
    for (std::size_t c : argmax_rows(logits.value())) out.predicted.push_back(space.combinations[c]);

    std::vector<std::size_t> kept;
    std::vector<int> targets;
    for (std::size_t i = 0; i < q; ++i) {
        if (const auto idx = space.index_of(episode.query[i].labels)) {
            kept.push_back(i);
            targets.push_back(static_cast<int>(*idx));
        }
    }
    out.skipped = q - kept.size();
    if (kept.empty()) throw DegenerateEpisode("every query label lies outside the support label space");
    const Var kept_logits = kept.size() == q ? logits : ad::matmul(row_selector(kept, q), logits);
    out.loss = ad::cross_entropy_with_logits(kept_logits, targets);
    return out;
}

// ---------------------------------------------------------------------------

std::string to_string(MamlOrder order) { return order == MamlOrder::first ? "first" : "second"; }

MamlOrder parse_maml_order(const std::string& name)
{
    if (name == "first") return MamlOrder::first;
    if (name == "second") return MamlOrder::second;
    throw ConfigError("maml.order: unknown value '" + name + "'; allowed: first, second");
}

void MamlConfig::validate() const
{
    if (!(inner_lr > 0.0) || !std::isfinite(inner_lr)) throw ConfigError("maml.inner_lr must be > 0");
    if (!(meta_lr > 0.0) || !std::isfinite(meta_lr)) throw ConfigError("maml.meta_lr must be > 0");
    if (adaptation_steps < 1) throw ConfigError("maml.adaptation_steps must be >= 1");
}

ParamSet adapt(const ParamSet& start, const LossFn& loss, double inner_lr, std::size_t steps, bool create_graph)
{
    ParamSet params = start;
    for (std::size_t step = 0; step < steps; ++step) {
        const Var l = loss(params);
        if (!std::isfinite(l.item())) {
            throw NumericError("non-finite inner loss at adaptation step " + std::to_string(step + 1));
        }
        const auto grads = ad::grad(l, params.vars(), create_graph);
        std::vector<Var> next;
        next.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (create_graph) {
                next.push_back(ad::sub(params[i], ad::scale(grads[i], inner_lr)));
            } else {
                Tensor v = params[i].value();
                const auto& g = grads[i].value();
                for (std::size_t j = 0; j < v.size(); ++j) v[j] -= inner_lr * g[j];
                next.push_back(ad::parameter(std::move(v)));
            }
        }
        params = start.with_vars(std::move(next));
    }
    return params;
}

MetaGradient maml_meta_gradient(const ParamSet& meta, const LossFn& support_loss, const LossFn& query_loss,
                                const MamlConfig& cfg)
{
    cfg.validate();
    MetaGradient out;
    if (cfg.order == MamlOrder::second) {
        const ParamSet adapted = adapt(meta, support_loss, cfg.inner_lr, cfg.adaptation_steps, true);
        out.query_loss = query_loss(adapted);
        out.grads = ad::grad(out.query_loss, meta.vars());
    } else {
        const ParamSet adapted = adapt(meta.clone(true), support_loss, cfg.inner_lr, cfg.adaptation_steps, false);
        out.query_loss = query_loss(adapted);
        out.grads = ad::grad(out.query_loss, adapted.vars());
    }
    if (!std::isfinite(out.query_loss.item())) throw NumericError("non-finite query loss after adaptation");
    return out;
}

ParamSet maml_init(const Backbone& net, std::size_t n_way, std::mt19937_64& rng)
{
    ParamSet params = net.init(rng);
    params.add("head.weight", ad::parameter(Tensor({net.repr_dim(), n_way}, 0.0)));
    params.add("head.bias", ad::parameter(Tensor({n_way}, 0.0)));
    return params;
}

Var maml_logits(const Backbone& net, const ParamSet& params, std::span<const EpisodeEntry> entries, bool train_mode,
                std::mt19937_64& rng)
{
    const Var repr = net.forward(params, ad::constant(series_batch(entries)), train_mode, rng);
    return ad::affine(repr, params.get("head.weight"), params.get("head.bias"));
}

Var maml_loss(const Var& logits, std::span<const EpisodeEntry> entries, EpisodeMode mode)
{
    if (mode == EpisodeMode::multi_class) return ad::cross_entropy_with_logits(logits, targets_of(entries));
    const std::size_t n = logits.shape()[0], ways = logits.shape()[1];
    Tensor targets({n, ways}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < ways; ++j) targets[i * ways + j] = (entries[i].labels >> j & 1u) ? 1.0 : 0.0;
    }
    return ad::bce_with_logits(logits, targets);
}

namespace {

void check_head(const ParamSet& meta, const Episode& episode)
{
    const auto& w = meta.get("head.weight");
    if (w.shape().size() != 2 || w.shape()[1] != episode.n_way) {
        throw ContractError("MAML head width does not match the episode's " + std::to_string(episode.n_way) +
                            " ways");
    }
}

} // namespace

EpisodeOutcome maml_train_episode(ParamSet& meta, const Episode& episode, const Backbone& net,
                                  const MamlConfig& cfg, ad::Optimizer& optimizer, std::mt19937_64& rng)
{
    check_head(meta, episode);
    Tensor query_logits;
    const LossFn support_loss = [&](const ParamSet& p) {
        return maml_loss(maml_logits(net, p, episode.support, true, rng), episode.support, episode.mode);
    };
    const LossFn query_loss = [&](const ParamSet& p) {
        const Var logits = maml_logits(net, p, episode.query, true, rng);
        query_logits = logits.value();
        return maml_loss(logits, episode.query, episode.mode);
    };
    MetaGradient mg = maml_meta_gradient(meta, support_loss, query_loss, cfg);
    optimizer.step(meta, mg.grads);

    EpisodeOutcome out;
    out.loss = mg.query_loss.detach();
    out.truth = truth_of(episode.query, episode.mode);
    out.predicted = maml_predictions(query_logits, episode.mode);
    return out;
}

EpisodeOutcome maml_infer_episode(const ParamSet& meta, const Episode& episode, const Backbone& net,
                                  const MamlConfig& cfg, std::mt19937_64& rng)
{
    check_head(meta, episode);
    cfg.validate();
    const LossFn support_loss = [&](const ParamSet& p) {
        return maml_loss(maml_logits(net, p, episode.support, false, rng), episode.support, episode.mode);
    };
    const ParamSet adapted = adapt(meta.clone(true), support_loss, cfg.inner_lr, cfg.adaptation_steps, false);
    ad::NoGradGuard no_grad;
    const Var logits = maml_logits(net, adapted, episode.query, false, rng);
    EpisodeOutcome out;
    out.loss = maml_loss(logits, episode.query, episode.mode);
    out.truth = truth_of(episode.query, episode.mode);
    out.predicted = maml_predictions(logits.value(), episode.mode);
    return out;
}

} // namespace fewshot
