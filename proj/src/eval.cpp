#include "fewshot/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "fewshot/ad/grad.hpp"
#include "fewshot/error.hpp"
#include "fewshot/random.hpp"

namespace fewshot {

using ad::ParamSet;
using nlohmann::json;

namespace {

struct Counts {
    std::size_t tp = 0, fp = 0, fn = 0, support = 0;
};

ClassMetrics score(const Counts& c)
{
    ClassMetrics m;
    m.support = c.support;
    m.precision = c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    m.recall = c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    const std::size_t denom = 2 * c.tp + c.fp + c.fn;
    m.f1 = denom == 0 ? 0.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
    return m;
}

// One-vs-rest counts for every label vector seen in truth or prediction.
std::map<std::string, ClassMetrics> per_class_exact(std::span<const LabelVector> truth,
                                                    std::span<const LabelVector> predicted)
{
    std::map<LabelVector, Counts> counts;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++counts[truth[i]].support;
        if (truth[i] == predicted[i]) {
            ++counts[truth[i]].tp;
        } else {
            ++counts[truth[i]].fn;
            ++counts[predicted[i]].fp;
        }
    }
    std::map<std::string, ClassMetrics> out;
    for (const auto& [label, c] : counts) out[label.digits()] = score(c);
    return out;
}

std::map<std::string, ClassMetrics> per_atom(std::span<const LabelVector> truth, std::span<const LabelVector> predicted)
{
    std::map<std::size_t, Counts> counts;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        for (std::size_t a = 1; a <= truth[i].width(); ++a) {
            const bool t = truth[i].test(a), p = predicted[i].test(a);
            if (!t && !p) continue;
            Counts& c = counts[a];
            if (t) ++c.support;
            if (t && p) ++c.tp;
            if (!t && p) ++c.fp;
            if (t && !p) ++c.fn;
        }
    }
    std::map<std::string, ClassMetrics> out;
    for (const auto& [a, c] : counts) out[std::to_string(a)] = score(c);
    return out;
}

void weigh(MetricsReport& r)
{
    double total = 0, p = 0, rc = 0, f = 0;
    for (const auto& [key, m] : r.per_class) {
        const double w = static_cast<double>(m.support);
        total += w;
        p += w * m.precision;
        rc += w * m.recall;
        f += w * m.f1;
    }
    if (total > 0) {
        r.precision = p / total;
        r.recall = rc / total;
        r.f1 = f / total;
    }
}

json class_metrics_json(const std::map<std::string, ClassMetrics>& m)
{
    json out = json::object();
    for (const auto& [key, c] : m) {
        out[key] = {{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}};
    }
    return out;
}

void check_range(const std::string& field, double v, double lo, double hi)
{
    if (!(v >= lo && v <= hi)) {
        std::ostringstream os;
        os << field << " = " << v << " outside allowed range [" << lo << ", " << hi << "]";
        throw ConfigError(os.str());
    }
}

void check_at_least(const std::string& field, std::size_t v, std::size_t lo)
{
    if (v < lo) throw ConfigError(field + " = " + std::to_string(v) + " must be >= " + std::to_string(lo));
}

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi)
{
    return lo + static_cast<std::size_t>(uniform_below(rng, hi - lo + 1));
}

template <class T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& options)
{
    return options[static_cast<std::size_t>(uniform_below(rng, options.size()))];
}

const std::vector<Activation> kActivations{Activation::relu, Activation::selu, Activation::elu, Activation::mish};

std::vector<DenseBlockSpec> sample_dense(std::mt19937_64& rng)
{
    std::vector<DenseBlockSpec> out(uniform_int(rng, 1, 3));
    for (auto& d : out) {
        d.features = uniform_int(rng, 64, 256);
        d.activation = pick(rng, kActivations);
    }
    return out;
}

// Runs body(i) for i in [0, n) on up to `workers` threads; rethrows the error of the
// lowest failing index.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F body)
{
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

EpisodeOutcome run_episode(const ExperimentConfig& cfg, const Backbone& net, ParamSet& params, const Episode& ep,
                           ad::Optimizer& opt, std::mt19937_64& rng)
{
    if (is_maml(cfg.method)) return maml_train_episode(params, ep, net, cfg.maml_config(), opt, rng);
    EpisodeOutcome out = proto_episode(net, params, ep, cfg.proto, true, rng);
    const auto grads = ad::grad(out.loss, params.vars());
    opt.step(params, grads);
    return out;
}

} // namespace

// ---------------------------------------------------------------------------

json metrics_to_json(const MetricsReport& r)
{
    json out = {{"mode", to_string(r.mode)},
                {"weighted", {{"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1}}},
                {"per_class", class_metrics_json(r.per_class)},
                {"episode_count", r.episode_count},
                {"skipped_query_count", r.skipped_query_count}};
    if (r.mode == EpisodeMode::multi_label) out["per_combination"] = class_metrics_json(r.per_combination);
    return out;
}

MetricsReport weighted_metrics(std::span<const LabelVector> truth, std::span<const LabelVector> predicted,
                               EpisodeMode mode)
{
    if (truth.empty()) throw ContractError("weighted_metrics: no predictions");
    if (truth.size() != predicted.size()) throw ContractError("weighted_metrics: truth and prediction lengths differ");
    MetricsReport r;
    r.mode = mode;
    if (mode == EpisodeMode::multi_class) {
        r.per_class = per_class_exact(truth, predicted);
    } else {
        r.per_class = per_atom(truth, predicted);
        r.per_combination = per_class_exact(truth, predicted);
    }
    weigh(r);
    return r;
}

void PredictionLog::add(const Episode& episode, const EpisodeOutcome& outcome, std::size_t width)
{
    auto to_raw = [&](std::uint32_t v) {
        if (episode.mode == EpisodeMode::multi_class) return decode_label(class_id(episode.label_map.at(v)), width);
        std::set<std::size_t> atoms;
        for (std::size_t j = 0; j < episode.label_map.size(); ++j) {
            if (v >> j & 1u) atoms.insert(episode.label_map[j]);
        }
        return LabelVector::from_atoms(width, atoms);
    };
    for (std::size_t i = 0; i < outcome.truth.size(); ++i) {
        truth.push_back(to_raw(outcome.truth[i]));
        predicted.push_back(to_raw(outcome.predicted[i]));
    }
    ++episodes;
    skipped += outcome.skipped;
}

MetricsReport PredictionLog::report(EpisodeMode mode) const
{
    MetricsReport r = weighted_metrics(truth, predicted, mode);
    r.episode_count = episodes;
    r.skipped_query_count = skipped;
    return r;
}

// ---------------------------------------------------------------------------

std::string to_string(Method m)
{
    switch (m) {
    case Method::proto_multiclass: return "proto_multiclass";
    case Method::proto_multilabel: return "proto_multilabel";
    case Method::maml_multiclass: return "maml_multiclass";
    case Method::maml_multilabel: return "maml_multilabel";
    }
    return "?";
}

Method parse_method(const std::string& name)
{
    for (Method m : {Method::proto_multiclass, Method::proto_multilabel, Method::maml_multiclass,
                     Method::maml_multilabel}) {
        if (to_string(m) == name) return m;
    }
    throw ConfigError("method: unknown value '" + name +
                      "'; allowed: proto_multiclass, proto_multilabel, maml_multiclass, maml_multilabel");
}

EpisodeMode mode_of(Method m)
{
    return m == Method::proto_multilabel || m == Method::maml_multilabel ? EpisodeMode::multi_label
                                                                        : EpisodeMode::multi_class;
}

bool is_maml(Method m) { return m == Method::maml_multiclass || m == Method::maml_multilabel; }

void ExperimentConfig::validate() const
{
    check_range("learning_rate", learning_rate, 1e-6, 1e-4);
    check_range("weight_decay", weight_decay, 1e-6, 1e-4);
    if (patience != 5) throw ConfigError("patience = " + std::to_string(patience) + " must be 5");
    check_range("maml.meta_lr", maml.meta_lr, 1e-6, 1e-4);
    check_range("maml.adaptation_steps", static_cast<double>(maml.adaptation_steps), 5, 15);
    validate_backbone_ranges(backbone);
    sampler(seed).validate();
    check_at_least("episodes.train", episodes.train, 1);
    check_at_least("episodes.validation", episodes.validation, 1);
    check_at_least("episodes.test", episodes.test, 1);
    check_at_least("max_epochs", max_epochs, 1);
    check_at_least("trials", trials, 1);
    check_at_least("repeats", repeats, 2);
}

SamplerConfig ExperimentConfig::sampler(std::uint64_t sampler_seed) const
{
    return {.n_way = n_way, .k_shot = k_shot, .m_query = m_query, .mode = mode_of(method), .seed = sampler_seed};
}

MamlConfig ExperimentConfig::maml_config() const
{
    return {.inner_lr = learning_rate, .meta_lr = maml.meta_lr, .adaptation_steps = maml.adaptation_steps,
            .order = maml.order};
}

ad::OptimizerConfig ExperimentConfig::optimizer_config() const
{
    ad::OptimizerConfig c;
    c.kind = optimizer;
    c.learning_rate = is_maml(method) ? maml.meta_lr : learning_rate;
    c.weight_decay = weight_decay;
    return c;
}

json experiment_to_json(const ExperimentConfig& cfg)
{
    return {{"schema_version", kExperimentSchemaVersion},
            {"method", to_string(cfg.method)},
            {"backbone", backbone_to_json(cfg.backbone)},
            {"optimizer", ad::optimizer_name(cfg.optimizer)},
            {"learning_rate", cfg.learning_rate},
            {"weight_decay", cfg.weight_decay},
            {"patience", cfg.patience},
            {"proto", {{"distance", to_string(cfg.proto.distance)}, {"normalize", cfg.proto.normalize}}},
            {"maml",
             {{"meta_lr", cfg.maml.meta_lr},
              {"adaptation_steps", cfg.maml.adaptation_steps},
              {"order", to_string(cfg.maml.order)}}},
            {"sampler", {{"n_way", cfg.n_way}, {"k_shot", cfg.k_shot}, {"m_query", cfg.m_query}}},
            {"episodes",
             {{"train", cfg.episodes.train}, {"validation", cfg.episodes.validation}, {"test", cfg.episodes.test}}},
            {"max_epochs", cfg.max_epochs},
            {"seed", cfg.seed},
            {"trials", cfg.trials},
            {"repeats", cfg.repeats},
            {"search",
             {{"optimizer", cfg.search.optimizer},
              {"rates", cfg.search.rates},
              {"method", cfg.search.method},
              {"backbone", cfg.search.backbone}}}};
}

ExperimentConfig experiment_from_json(const json& j)
{
    static const std::set<std::string> known{"schema_version", "method",   "backbone",   "optimizer", "learning_rate",
                                             "weight_decay",   "patience", "proto",      "maml",      "sampler",
                                             "episodes",       "max_epochs", "seed",     "trials",    "repeats",
                                             "search"};
    if (!j.is_object()) throw ConfigError("experiment: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw ConfigError("experiment." + key + ": unknown field");
    }
    if (j.value("schema_version", kExperimentSchemaVersion) != kExperimentSchemaVersion) {
        throw ConfigError("experiment.schema_version: expected " + std::to_string(kExperimentSchemaVersion));
    }
    ExperimentConfig c;
    try {
        if (j.contains("method")) c.method = parse_method(j["method"].get<std::string>());
        if (j.contains("backbone")) c.backbone = backbone_from_json(j["backbone"]);
        if (j.contains("optimizer")) c.optimizer = ad::parse_optimizer(j["optimizer"].get<std::string>());
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.patience = j.value("patience", c.patience);
        if (j.contains("proto")) {
            const auto& p = j["proto"];
            if (p.contains("distance")) c.proto.distance = parse_distance(p["distance"].get<std::string>());
            c.proto.normalize = p.value("normalize", c.proto.normalize);
        }
        if (j.contains("maml")) {
            const auto& m = j["maml"];
            c.maml.meta_lr = m.value("meta_lr", c.maml.meta_lr);
            c.maml.adaptation_steps = m.value("adaptation_steps", c.maml.adaptation_steps);
            if (m.contains("order")) c.maml.order = parse_maml_order(m["order"].get<std::string>());
        }
        if (j.contains("sampler")) {
            const auto& s = j["sampler"];
            c.n_way = s.value("n_way", c.n_way);
            c.k_shot = s.value("k_shot", c.k_shot);
            c.m_query = s.value("m_query", c.m_query);
        }
        if (j.contains("episodes")) {
            const auto& e = j["episodes"];
            c.episodes.train = e.value("train", c.episodes.train);
            c.episodes.validation = e.value("validation", c.episodes.validation);
            c.episodes.test = e.value("test", c.episodes.test);
        }
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.seed = j.value("seed", c.seed);
        c.trials = j.value("trials", c.trials);
        c.repeats = j.value("repeats", c.repeats);
        if (j.contains("search")) {
            const auto& s = j["search"];
            c.search.optimizer = s.value("optimizer", c.search.optimizer);
            c.search.rates = s.value("rates", c.search.rates);
            c.search.method = s.value("method", c.search.method);
            c.search.backbone = s.value("backbone", c.search.backbone);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("experiment: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

EarlyStopper::EarlyStopper(std::size_t patience) : patience_(patience)
{
    if (patience_ == 0) throw ContractError("early stopping patience must be >= 1");
}

bool EarlyStopper::update(double score)
{
    ++epochs_;
    if (score > best_) {
        best_ = score;
        best_epoch_ = epochs_;
        stale_ = 0;
        return true;
    }
    ++stale_;
    return false;
}

json history_to_json(const std::vector<EpochRecord>& history)
{
    json out = json::array();
    for (const auto& h : history) {
        out.push_back({{"epoch", h.epoch},
                       {"train_loss", h.train_loss},
                       {"validation_f1", h.validation_f1},
                       {"improved", h.improved}});
    }
    return out;
}

Backbone make_backbone(const ExperimentConfig& cfg, const Dataset& ds)
{
    if (ds.empty()) throw ContractError("dataset is empty");
    return Backbone(cfg.backbone, ds[0].series.length());
}

ParamSet init_params(const ExperimentConfig& cfg, const Backbone& net, std::mt19937_64& rng)
{
    return is_maml(cfg.method) ? maml_init(net, cfg.n_way, rng) : net.init(rng);
}

MetricsReport evaluate(const ExperimentConfig& cfg, const Backbone& net, const ParamSet& params, const Dataset& ds,
                       std::size_t count, std::uint64_t sampler_seed)
{
    const SamplerConfig sampler = cfg.sampler(sampler_seed);
    PredictionLog log;
    std::mt19937_64 rng(sampler_seed);
    for (std::size_t i = 0; i < count; ++i) {
        const Episode ep = episode_at(ds, sampler, i);
        if (is_maml(cfg.method)) {
            log.add(ep, maml_infer_episode(params, ep, net, cfg.maml_config(), rng), ds.label_width());
        } else {
            ad::NoGradGuard no_grad;
            log.add(ep, proto_episode(net, params, ep, cfg.proto, false, rng), ds.label_width());
        }
    }
    return log.report(mode_of(cfg.method));
}

// Splits must not share a class or an atomic label, otherwise "unseen" classes leak into training.
static void require_disjoint(const Dataset& a, const Dataset& b, const std::string& a_name, const std::string& b_name)
{
    const std::vector<ClassId> a_classes = a.classes();
    for (ClassId c : b.classes()) {
        if (std::find(a_classes.begin(), a_classes.end(), c) != a_classes.end()) {
            throw ContractError(a_name + " and " + b_name + " share class " + class_digits(c, a.label_width()));
        }
    }
    const std::vector<std::size_t> a_atoms = a.atoms();
    for (std::size_t atom : b.atoms()) {
        if (std::find(a_atoms.begin(), a_atoms.end(), atom) != a_atoms.end()) {
            throw ContractError(a_name + " and " + b_name + " share atomic label " + std::to_string(atom));
        }
    }
}

TrainResult train_with_early_stop(const ExperimentConfig& cfg, const Dataset& train, const Dataset& validation,
                                  std::uint64_t seed)
{
    require_disjoint(train, validation, "train", "validation");
    const Backbone net = make_backbone(cfg, train);
    auto init_rng = derived_rng(seed, 0);
    ParamSet params = init_params(cfg, net, init_rng);
    auto dropout_rng = derived_rng(seed, 1);
    const SamplerConfig train_sampler = cfg.sampler(derive_seed(seed, 2));
    const std::uint64_t validation_seed = derive_seed(seed, 3);
    ad::Optimizer optimizer(cfg.optimizer_config());
    EarlyStopper stopper(cfg.patience);

    TrainResult result;
    result.params = params.clone(false);
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (std::size_t i = 0; i < cfg.episodes.train; ++i) {
            const std::string where = "epoch " + std::to_string(epoch) + ", episode " + std::to_string(i + 1) + ": ";
            try {
                const Episode ep = episode_at(train, train_sampler, (epoch - 1) * cfg.episodes.train + i);
                loss_sum += run_episode(cfg, net, params, ep, optimizer, dropout_rng).loss.item();
            } catch (const DegenerateEpisode& e) {
                throw DegenerateEpisode(where + e.what());
            } catch (const NumericError& e) {
                throw NumericError(where + e.what());
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(cfg.episodes.train);
        rec.validation_f1 = evaluate(cfg, net, params, validation, cfg.episodes.validation, validation_seed).f1;
        rec.improved = stopper.update(rec.validation_f1);
        if (rec.improved) result.params = params.clone(false);
        result.history.push_back(rec);
        if (stopper.should_stop()) break;
    }
    result.best_epoch = stopper.best_epoch();
    result.best_validation_f1 = stopper.best_score();
    return result;
}

// ---------------------------------------------------------------------------

double sample_log_uniform(std::mt19937_64& rng, double lo, double hi)
{
    const double a = std::log10(lo), b = std::log10(hi);
    return std::pow(10.0, a + (b - a) * uniform_unit(rng));
}

BackboneSpec sample_backbone(const BackboneSpec& like, std::mt19937_64& rng)
{
    if (std::holds_alternative<InceptionSpec>(like)) {
        InceptionSpec s;
        s.module_count = uniform_int(rng, 2, 5);
        s.filters = uniform_int(rng, 4, 16);
        s.activation = pick(rng, kActivations);
        s.dense_blocks = sample_dense(rng);
        s.repr_dim = uniform_int(rng, 64, 256);
        return s;
    }
    CnnSpec s;
    s.conv_blocks.resize(uniform_int(rng, 2, 6));
    for (auto& b : s.conv_blocks) {
        b.channels = uniform_int(rng, 16, 64);
        b.kernel_size = uniform_int(rng, 2, 11);
        b.pooling = uniform_below(rng, 2) == 0 ? PoolKind::max : PoolKind::avg;
        b.pool_kernel = uniform_int(rng, 2, 4);
        b.activation = pick(rng, kActivations);
        b.dropout_rate = 0.5 * uniform_unit(rng);
    }
    s.dense_blocks = sample_dense(rng);
    s.repr_dim = uniform_int(rng, 64, 256);
    return s;
}

ExperimentConfig sample_trial(const ExperimentConfig& tmpl, std::mt19937_64& rng)
{
    ExperimentConfig c = tmpl;
    if (tmpl.search.rates) {
        c.learning_rate = sample_log_uniform(rng, 1e-6, 1e-4);
        c.weight_decay = sample_log_uniform(rng, 1e-6, 1e-4);
        if (is_maml(c.method)) c.maml.meta_lr = sample_log_uniform(rng, 1e-6, 1e-4);
    }
    if (tmpl.search.optimizer) {
        c.optimizer = pick(rng, std::vector<ad::OptimizerKind>{ad::OptimizerKind::adam, ad::OptimizerKind::sgd,
                                                               ad::OptimizerKind::adamw, ad::OptimizerKind::rmsprop});
    }
    if (tmpl.search.method) {
        if (is_maml(c.method)) {
            c.maml.adaptation_steps = uniform_int(rng, 5, 15);
        } else {
            c.proto.distance = uniform_below(rng, 2) == 0 ? Distance::euclidean : Distance::cosine;
            c.proto.normalize = uniform_below(rng, 2) == 1;
        }
    }
    if (tmpl.search.backbone) c.backbone = sample_backbone(tmpl.backbone, rng);
    return c;
}

json trials_to_json(const SearchResult& result)
{
    json trials = json::array();
    for (const auto& t : result.trials) {
        trials.push_back({{"index", t.index},
                          {"config", experiment_to_json(t.config)},
                          {"validation_f1", t.validation_f1},
                          {"best_epoch", t.best_epoch},
                          {"epochs_run", t.epochs_run}});
    }
    return {{"best_index", result.best_index}, {"trials", trials}};
}

SearchResult random_search(const ExperimentConfig& tmpl, std::size_t trials, const Dataset& train,
                           const Dataset& validation, std::uint64_t seed, std::size_t workers)
{
    if (trials < 1) throw ContractError("random search needs at least one trial");
    const std::size_t length = train.empty() ? 0 : train[0].series.length();
    SearchResult result;
    result.trials.resize(trials);
    for (std::size_t t = 0; t < trials; ++t) {
        auto rng = derived_rng(seed, t);
        // Redraw architectures that do not fit the series length.
        for (int attempt = 0;; ++attempt) {
            result.trials[t].config = sample_trial(tmpl, rng);
            try {
                Backbone(result.trials[t].config.backbone, length);
                break;
            } catch (const ShapeError&) {
                if (attempt >= 1000) throw;
            }
        }
        result.trials[t].index = t;
    }
    parallel_for(trials, workers, [&](std::size_t t) {
        TrialRecord& rec = result.trials[t];
        const TrainResult run = train_with_early_stop(rec.config, train, validation, derive_seed(seed, trials + t));
        rec.validation_f1 = run.best_validation_f1;
        rec.best_epoch = run.best_epoch;
        rec.epochs_run = run.history.size();
    });
    for (std::size_t t = 1; t < trials; ++t) {
        if (result.trials[t].validation_f1 > result.trials[result.best_index].validation_f1) result.best_index = t;
    }
    result.best = result.trials[result.best_index].config;
    return result;
}

MeanStd mean_std(std::span<const double> values)
{
    if (values.size() < 2) throw ContractError("mean and sample standard deviation need at least two values");
    double sum = 0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    double ss = 0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

std::string format_mean_std(const MeanStd& m, int digits)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << m.mean << " ± " << m.std;
    return os.str();
}

json final_report_to_json(const ExperimentConfig& cfg, const FinalReport& report)
{
    json repeats = json::array();
    for (const auto& r : report.repeats) repeats.push_back(metrics_to_json(r));
    auto summary = [](const MeanStd& m) { return json{{"mean", m.mean}, {"std", m.std}, {"text", format_mean_std(m)}}; };
    return {{"schema_version", kExperimentSchemaVersion},
            {"method", to_string(cfg.method)},
            {"backbone", backbone_to_json(cfg.backbone)},
            {"config", experiment_to_json(cfg)},
            {"summary",
             {{"precision", summary(report.precision)}, {"recall", summary(report.recall)}, {"f1", summary(report.f1)}}},
            {"repeats", repeats}};
}

FinalReport final_evaluation(const ExperimentConfig& cfg, const Dataset& train, const Dataset& validation,
                             const Dataset& test, std::size_t repeats, std::uint64_t seed, std::size_t workers)
{
    if (repeats < 2) throw ContractError("final evaluation needs at least two repeats");
    require_disjoint(train, test, "train", "test");
    require_disjoint(validation, test, "validation", "test");
    FinalReport report;
    report.repeats.resize(repeats);
    parallel_for(repeats, workers, [&](std::size_t r) {
        const TrainResult run = train_with_early_stop(cfg, train, validation, derive_seed(seed, 2 * r));
        const Backbone net = make_backbone(cfg, train);
        report.repeats[r] = evaluate(cfg, net, run.params, test, cfg.episodes.test, derive_seed(seed, 2 * r + 1));
    });
    std::vector<double> p, rc, f;
    for (const auto& m : report.repeats) {
        p.push_back(m.precision);
        rc.push_back(m.recall);
        f.push_back(m.f1);
    }
    report.precision = mean_std(p);
    report.recall = mean_std(rc);
    report.f1 = mean_std(f);
    return report;
}

std::string render_report(const json& metrics)
{
    std::ostringstream os;
    const std::string method = metrics.value("method", "?");
    const std::string backbone = metrics.contains("backbone") ? metrics["backbone"].value("type", "?") : "?";
    const auto& summary = metrics.at("summary");
    const auto& repeats = metrics.at("repeats");
    os << "Method: " << method << "\nBackbone: " << backbone << "\nRepeats: " << repeats.size() << "\n\n";
    os << std::left << std::setw(12) << "Metric" << "Weighted (mean ± std)\n";
    for (const char* key : {"precision", "recall", "f1"}) {
        os << std::left << std::setw(12) << key << summary.at(key).at("text").get<std::string>() << "\n";
    }
    for (const char* table : {"per_class", "per_combination"}) {
        std::map<std::string, std::vector<double>> f1s;
        std::map<std::string, std::size_t> support;
        for (const auto& r : repeats) {
            if (!r.contains(table)) continue;
            for (const auto& [key, m] : r[table].items()) {
                f1s[key].push_back(m.at("f1").get<double>());
                support[key] += m.at("support").get<std::size_t>();
            }
        }
        if (f1s.empty()) continue;
        os << "\n" << (std::string(table) == "per_class" ? "Per class" : "Per label combination") << " F1\n";
        os << std::left << std::setw(12) << "Label" << std::setw(24) << "F1 (mean ± std)" << "Support\n";
        for (const auto& [key, values] : f1s) {
            std::string text;
            if (values.size() >= 2) {
                text = format_mean_std(mean_std(values));
            } else {
                std::ostringstream v;
                v << std::fixed << std::setprecision(3) << values[0];
                text = v.str();
            }
            // Width counts bytes; the ± sign takes two.
            os << std::left << std::setw(12) << key << std::setw(25) << text << support[key] << "\n";
        }
    }
    return os.str();
}

} // namespace fewshot
