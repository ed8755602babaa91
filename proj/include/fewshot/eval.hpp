#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewshot/ad/optim.hpp"
#include "fewshot/backbones.hpp"
#include "fewshot/episodes.hpp"
#include "fewshot/fsl.hpp"

namespace fewshot {

// ---------------------------------------------------------------------------
// Metrics

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct MetricsReport {
    EpisodeMode mode = EpisodeMode::multi_class;
    // Keyed by class digits (multi-class) or by atomic label index (multi-label).
    std::map<std::string, ClassMetrics> per_class;
    // Multi-label only: exact label combinations scored as classes, keyed by digits.
    std::map<std::string, ClassMetrics> per_combination;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t episode_count = 0;
    std::size_t skipped_query_count = 0;
};

nlohmann::json metrics_to_json(const MetricsReport& report);

// Support-weighted precision, recall and F1. Multi-class scores every distinct label vector
// one-vs-rest; multi-label scores every atomic label as a binary problem weighted by its
// positive count. Zero denominators score 0. Throws ContractError on empty or unequal input.
MetricsReport weighted_metrics(std::span<const LabelVector> truth, std::span<const LabelVector> predicted,
                               EpisodeMode mode);

// Raw-label predictions pooled over episodes.
struct PredictionLog {
    std::vector<LabelVector> truth;
    std::vector<LabelVector> predicted;
    std::size_t episodes = 0;
    std::size_t skipped = 0;

    // Maps remapped values back through the episode's label map.
    void add(const Episode& episode, const EpisodeOutcome& outcome, std::size_t width);
    MetricsReport report(EpisodeMode mode) const;
};

// ---------------------------------------------------------------------------
// Experiment configuration

enum class Method { proto_multiclass, proto_multilabel, maml_multiclass, maml_multilabel };

std::string to_string(Method m);
Method parse_method(const std::string& name);
EpisodeMode mode_of(Method m);
bool is_maml(Method m);

struct EpisodeCounts {
    std::size_t train = 60;
    std::size_t validation = 30;
    std::size_t test = 100;
};

struct MamlSettings {
    double meta_lr = 1e-4;
    std::size_t adaptation_steps = 5;
    MamlOrder order = MamlOrder::first;
};

// Which hyperparameters random search draws; the rest are taken from the template.
struct SearchSpace {
    bool optimizer = true;
    bool rates = true;
    bool method = true;
    bool backbone = true;
};

struct ExperimentConfig {
    Method method = Method::proto_multiclass;
    BackboneSpec backbone = CnnSpec{};
    ad::OptimizerKind optimizer = ad::OptimizerKind::adam;
    // Optimizer rate for prototypical training; inner adaptation rate for MAML.
    double learning_rate = 1e-4;
    double weight_decay = 1e-5;
    std::size_t patience = 5;
    ProtoConfig proto;
    MamlSettings maml;
    std::size_t n_way = 3;
    std::size_t k_shot = 10;
    std::size_t m_query = 50;
    EpisodeCounts episodes;
    std::size_t max_epochs = 200;
    std::uint64_t seed = 0;
    std::size_t trials = 5;
    std::size_t repeats = 50;
    SearchSpace search;

    // Throws ConfigError naming the field and its allowed range.
    void validate() const;

    SamplerConfig sampler(std::uint64_t seed) const;
    MamlConfig maml_config() const;
    ad::OptimizerConfig optimizer_config() const;
};

inline constexpr int kExperimentSchemaVersion = 1;

nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
// Missing fields keep their defaults; the result is validated.
ExperimentConfig experiment_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Training

// Stops once the score has failed to improve strictly for `patience` consecutive updates.
class EarlyStopper {
public:
    explicit EarlyStopper(std::size_t patience);

    // Records the next epoch's score; returns true when it is a new best.
    bool update(double score);
    bool should_stop() const { return stale_ >= patience_; }
    std::size_t best_epoch() const { return best_epoch_; }
    double best_score() const { return best_; }
    std::size_t epochs() const { return epochs_; }

private:
    std::size_t patience_;
    std::size_t epochs_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t stale_ = 0;
    double best_ = -std::numeric_limits<double>::infinity();
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double validation_f1 = 0.0;
    bool improved = false;
};

struct TrainResult {
    ad::ParamSet params;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_validation_f1 = 0.0;
};

nlohmann::json history_to_json(const std::vector<EpochRecord>& history);

// Builds the backbone for the config over the dataset's series length.
Backbone make_backbone(const ExperimentConfig& cfg, const Dataset& ds);

// Fresh parameters for the configured method.
ad::ParamSet init_params(const ExperimentConfig& cfg, const Backbone& net, std::mt19937_64& rng);

// Pooled metrics over `count` episodes drawn from `ds` with the given sampler seed.
MetricsReport evaluate(const ExperimentConfig& cfg, const Backbone& net, const ad::ParamSet& params,
                       const Dataset& ds, std::size_t count, std::uint64_t sampler_seed);

// Epochs of training episodes, each followed by validation F1; returns the parameters of
// the best validation epoch. Errors raised inside an episode are rethrown with the epoch
// and episode index prepended. Seeds derived from `seed`: 0 initialization, 1 dropout,
// 2 training episodes (one continuing stream across epochs), 3 validation episodes.
TrainResult train_with_early_stop(const ExperimentConfig& cfg, const Dataset& train, const Dataset& validation,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// Search and final evaluation

double sample_log_uniform(std::mt19937_64& rng, double lo, double hi);
BackboneSpec sample_backbone(const BackboneSpec& like, std::mt19937_64& rng);
// Draws the hyperparameters enabled in tmpl.search.
ExperimentConfig sample_trial(const ExperimentConfig& tmpl, std::mt19937_64& rng);

struct TrialRecord {
    std::size_t index = 0;
    ExperimentConfig config;
    double validation_f1 = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

struct SearchResult {
    std::size_t best_index = 0;
    ExperimentConfig best;
    std::vector<TrialRecord> trials;
};

nlohmann::json trials_to_json(const SearchResult& result);

// Trials are independent given the master seed, so `workers` only changes wall time.
// Ties on validation F1 go to the lowest trial index.
SearchResult random_search(const ExperimentConfig& tmpl, std::size_t trials, const Dataset& train,
                           const Dataset& validation, std::uint64_t seed, std::size_t workers = 1);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

// Mean and sample standard deviation; needs at least two values.
MeanStd mean_std(std::span<const double> values);
// "0.944 ± 0.017"
std::string format_mean_std(const MeanStd& m, int digits = 3);

struct FinalReport {
    std::vector<MetricsReport> repeats;
    MeanStd precision;
    MeanStd recall;
    MeanStd f1;
};

nlohmann::json final_report_to_json(const ExperimentConfig& cfg, const FinalReport& report);

// Retrains from scratch `repeats` times with derived seeds and scores each run on test episodes.
FinalReport final_evaluation(const ExperimentConfig& cfg, const Dataset& train, const Dataset& validation,
                             const Dataset& test, std::size_t repeats, std::uint64_t seed, std::size_t workers = 1);

// Plain-text summary: a mean ± std row per metric and a per-class table.
std::string render_report(const nlohmann::json& metrics);

} // namespace fewshot
