#pragma once

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fewshot/ad/optim.hpp"
#include "fewshot/ad/param_set.hpp"
#include "fewshot/backbones.hpp"
#include "fewshot/core.hpp"

namespace fewshot {

// ---------------------------------------------------------------------------
// Prototypical networks

enum class Distance { euclidean, cosine };

std::string to_string(Distance d);
Distance parse_distance(const std::string& name);

struct ProtoConfig {
    Distance distance = Distance::euclidean;
    bool normalize = false;
};

// Label combinations (masks over remapped atoms) with one prototype each, ordered by
// cardinality and then lexicographically by their sorted atom indices.
struct LabelSpace {
    std::vector<LabelMask> combinations;

    std::size_t size() const { return combinations.size(); }
    std::optional<std::size_t> index_of(LabelMask mask) const;
};

// Union of the non-empty subsets of every support label. Throws DegenerateEpisode when
// the support carries no active label at all.
LabelSpace build_label_space(std::span<const LabelMask> support_labels);

// (S, D) embeddings grouped by class index in [0, n_classes) -> (n_classes, D) means.
ad::Var proto_centroids_multiclass(const ad::Var& embeddings, std::span<const int> labels, std::size_t n_classes);

// Centroid of combination l averages every support embedding whose label contains l.
ad::Var proto_centroids_multilabel(const ad::Var& embeddings, std::span<const LabelMask> labels,
                                   const LabelSpace& space);

// Negative squared Euclidean distance or negative cosine distance, (Q, C).
ad::Var proto_logits(const ad::Var& queries, const ad::Var& centroids, const ProtoConfig& cfg);

// Row-wise argmax; ties go to the lowest column.
std::vector<std::size_t> argmax_rows(const ad::Tensor& logits);

std::vector<LabelMask> proto_predict_multilabel(const ad::Var& queries, const ad::Var& centroids,
                                                const LabelSpace& space, const ProtoConfig& cfg);

// Bit j set when sigmoid(logits[i, j]) > 0.5; exactly 0.5 stays unset.
std::vector<LabelMask> threshold_sigmoid(const ad::Tensor& logits);

// Per-query outcome of one episode. Multi-class values are remapped class indices;
// multi-label values are masks over remapped atoms.
struct EpisodeOutcome {
    ad::Var loss;
    std::vector<std::uint32_t> truth;
    std::vector<std::uint32_t> predicted;
    std::size_t skipped = 0;
};

// (n, 1, L) batch of the entries' series.
ad::Tensor series_batch(std::span<const EpisodeEntry> entries);

// Embeds support and query in one batch, builds prototypes and scores every query.
// Multi-label queries whose combination lies outside the label space are classified but
// left out of the loss; when every query is left out, DegenerateEpisode is thrown.
EpisodeOutcome proto_episode(const Backbone& net, const ad::ParamSet& params, const Episode& episode,
                             const ProtoConfig& cfg, bool train_mode, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Model-agnostic meta-learning

enum class MamlOrder { first, second };

std::string to_string(MamlOrder order);
MamlOrder parse_maml_order(const std::string& name);

struct MamlConfig {
    double inner_lr = 1e-4;
    double meta_lr = 1e-4;
    std::size_t adaptation_steps = 5;
    MamlOrder order = MamlOrder::first;

    void validate() const;
};

using LossFn = std::function<ad::Var(const ad::ParamSet&)>;

// Plain gradient descent on `loss` starting from `start`. With create_graph the adapted
// parameters stay differentiable functions of `start`; otherwise each step yields fresh leaves.
// Throws NumericError when a loss is not finite.
ad::ParamSet adapt(const ad::ParamSet& start, const LossFn& loss, double inner_lr, std::size_t steps,
                   bool create_graph);

struct MetaGradient {
    std::vector<ad::Var> grads; // aligned with the meta parameters
    ad::Var query_loss;         // evaluated at the adapted parameters
};

// Second order differentiates the query loss through every inner step; first order
// returns the query-loss gradient at the adapted parameters.
MetaGradient maml_meta_gradient(const ad::ParamSet& meta, const LossFn& support_loss, const LossFn& query_loss,
                                const MamlConfig& cfg);

// Backbone parameters followed by an affine head "head.weight" (repr_dim, n_way) and
// "head.bias" (n_way), both zero.
ad::ParamSet maml_init(const Backbone& net, std::size_t n_way, std::mt19937_64& rng);

// Head logits (n, n_way) for a batch of entries.
ad::Var maml_logits(const Backbone& net, const ad::ParamSet& params, std::span<const EpisodeEntry> entries,
                    bool train_mode, std::mt19937_64& rng);

// Mean cross-entropy (multi-class) or mean binary cross-entropy over atoms (multi-label).
ad::Var maml_loss(const ad::Var& logits, std::span<const EpisodeEntry> entries, EpisodeMode mode);

// One meta-update of `meta` in place; returns the outcome measured on the query set.
EpisodeOutcome maml_train_episode(ad::ParamSet& meta, const Episode& episode, const Backbone& net,
                                  const MamlConfig& cfg, ad::Optimizer& optimizer, std::mt19937_64& rng);

// Adapts a copy on the support set and classifies the query set; `meta` is not modified.
// Multi-label predictions keep an atom when its sigmoid exceeds 0.5 strictly.
EpisodeOutcome maml_infer_episode(const ad::ParamSet& meta, const Episode& episode, const Backbone& net,
                                  const MamlConfig& cfg, std::mt19937_64& rng);

} // namespace fewshot
