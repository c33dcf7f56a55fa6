#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "davqa/adapters.hpp"
#include "davqa/backbone.hpp"
#include "davqa/errors.hpp"
#include "davqa/metrics.hpp"
#include "davqa/router.hpp"
#include "davqa/synthdata.hpp"
#include "davqa/tensor.hpp"

namespace davqa {

// ---- metric selection ----

enum class EvalMetric { bleu, accuracy };

inline std::string metric_name(EvalMetric m) {
    return m == EvalMetric::bleu ? "bleu" : "accuracy";
}

// Single-token answer domains validate on accuracy (BLEU is degenerate on
// length-1 sequences); generative multi-token domains validate on BLEU.
inline EvalMetric default_metric_for(const std::vector<VqaSample>& samples) {
    for (const VqaSample& s : samples)
        if (s.answer.size() > 1) return EvalMetric::bleu;
    return EvalMetric::accuracy;
}

inline double metric_value(EvalMetric metric, const std::vector<TokenSeq>& preds,
                           const std::vector<TokenSeq>& golds) {
    if (metric == EvalMetric::accuracy) return accuracy(preds, golds);
    if (preds.size() != golds.size()) {
        throw ContractError("metric over mismatched prediction/gold counts");
    }
    if (preds.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) sum += bleu(preds[i], golds[i]);
    return sum / static_cast<double>(preds.size());
}

// ---- configuration and logs ----

struct TrainConfig {
    double learning_rate = 2e-4;
    std::size_t batch_size = 16;
    std::size_t max_epochs = 5;
    std::size_t patience = 2;  // evals without improvement before stopping
    EvalMetric eval_metric = EvalMetric::bleu;
    std::uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    }
};

struct EpochEntry {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_metric = 0.0;
    double wall_seconds = 0.0;
};

struct TrainLog {
    double initial_val_metric = 0.0;
    std::vector<EpochEntry> epochs;
    std::string stopping_reason;
    std::size_t best_epoch = 0;  // 0 means the initial weights were best
    std::map<std::string, std::string> frozen_checksums;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["initial_val_metric"] = initial_val_metric;
        j["stopping_reason"] = stopping_reason;
        j["best_epoch"] = best_epoch;
        j["frozen_checksums"] = frozen_checksums;
        nlohmann::json rows = nlohmann::json::array();
        for (const EpochEntry& e : epochs) {
            rows.push_back({{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"val_metric", e.val_metric},
                            {"wall_seconds", e.wall_seconds}});
        }
        j["epochs"] = std::move(rows);
        return j;
    }

    // one JSON object per line: epochs first, then the summary
    void save_jsonl(const std::filesystem::path& path) const {
        if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw FileError("cannot write training log: " + path.string());
        for (const EpochEntry& e : epochs) {
            nlohmann::json row = {{"event", "epoch"},
                                  {"epoch", e.epoch},
                                  {"train_loss", e.train_loss},
                                  {"val_metric", e.val_metric},
                                  {"wall_seconds", e.wall_seconds}};
            out << row.dump() << '\n';
        }
        nlohmann::json summary = {{"event", "summary"},
                                  {"initial_val_metric", initial_val_metric},
                                  {"stopping_reason", stopping_reason},
                                  {"best_epoch", best_epoch},
                                  {"frozen_checksums", frozen_checksums}};
        out << summary.dump() << '\n';
    }
};

// ---- shared helpers ----

namespace detail {

inline std::vector<std::vector<double>> snapshot_values(const ParameterStore& store) {
    std::vector<std::vector<double>> out;
    for (const Parameter& p : store.all()) out.push_back(p.tensor.data());
    return out;
}

inline void restore_values(ParameterStore& store, const std::vector<std::vector<double>>& snap) {
    const auto& params = store.all();
    if (params.size() != snap.size()) throw ContractError("snapshot/parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        store.at(params[i].name).tensor.data() = snap[i];
    }
}

inline void shuffle_indices(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_int(i);
        std::swap(order[i - 1], order[j]);
    }
}

inline std::vector<TokenSeq> greedy_predictions(Backbone& model, const std::vector<VqaSample>& samples) {
    std::vector<TokenSeq> preds;
    preds.reserve(samples.size());
    for (const VqaSample& s : samples) preds.push_back(model.generate_greedy(s.image, s.question, vocab::end));
    return preds;
}

inline std::vector<TokenSeq> golds_of(const std::vector<VqaSample>& samples) {
    std::vector<TokenSeq> out;
    out.reserve(samples.size());
    for (const VqaSample& s : samples) out.push_back(s.answer);
    return out;
}

}  // namespace detail

// ---- backbone pretraining ----

// One-time pass that stands in for an externally pretrained model: a short
// mixed-domain teacher-forced run, after which every backbone parameter is
// frozen for the rest of the project.
struct PretrainConfig {
    std::size_t epochs = 10;
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
};

inline TrainLog pretrain_backbone(Backbone& model, const std::vector<VqaSample>& train,
                                  const std::vector<VqaSample>& val, const PretrainConfig& cfg) {
    if (train.empty()) throw ContractError("pretraining corpus is empty");
    TrainLog log;
    AdamW opt;
    Rng shuffle_rng(mix_seed(cfg.seed, "pretrain-shuffle"));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    {
        NoGradGuard guard;
        log.initial_val_metric =
            metric_value(EvalMetric::accuracy, detail::greedy_predictions(model, val),
                         detail::golds_of(val));
    }
    double best_metric = log.initial_val_metric;
    std::size_t best_epoch = 0;
    auto best_snapshot = detail::snapshot_values(model.params());

    // Warmup plus cosine decay: the loss landscape here has a long flat
    // stretch (answer priors) before the visually grounded solution opens up,
    // and the late phase needs a smaller rate to keep that solution.
    const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    const std::size_t warmup_steps = std::min<std::size_t>(100, total_steps / 10 + 1);
    std::size_t step = 0;
    auto scheduled_rate = [&]() {
        ++step;
        if (step <= warmup_steps) {
            return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup_steps);
        }
        const double t = static_cast<double>(step - warmup_steps) /
                         static_cast<double>(total_steps - warmup_steps);
        return cfg.learning_rate * (0.1 + 0.45 * (1.0 + std::cos(3.14159265358979323846 * t)));
    };

    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        detail::shuffle_indices(order, shuffle_rng);
        double loss_sum = 0.0;
        std::size_t in_batch = 0;
        model.params().zero_grads();
        for (std::size_t i = 0; i < order.size(); ++i) {
            const VqaSample& s = train[order[i]];
            Tensor loss = scale(model.answer_loss(s.image, s.question, s.answer, vocab::end), inv_batch);
            loss.backward();
            loss_sum += loss.item() * static_cast<double>(cfg.batch_size);
            if (++in_batch == cfg.batch_size || i + 1 == order.size()) {
                opt.set_learning_rate(scheduled_rate());
                opt.step(model.params());
                model.params().zero_grads();
                in_batch = 0;
            }
        }
        EpochEntry e;
        e.epoch = epoch;
        e.train_loss = loss_sum / static_cast<double>(order.size());
        e.val_metric = metric_value(EvalMetric::accuracy, detail::greedy_predictions(model, val),
                                    detail::golds_of(val));
        e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(e);
        if (e.val_metric > best_metric) {
            best_metric = e.val_metric;
            best_epoch = epoch;
            best_snapshot = detail::snapshot_values(model.params());
        }
    }
    // The artifact is the best validation epoch, not the last one: a late
    // training wobble must not degrade the one backbone everything else uses.
    detail::restore_values(model.params(), best_snapshot);
    model.params().freeze_all();
    log.stopping_reason = "budget";
    log.best_epoch = best_epoch;
    log.frozen_checksums["backbone"] = model.params().checksum();
    return log;
}

// ---- per-domain adapter training ----

struct AdapterTrainResult {
    AdapterPair pair;
    TrainLog log;
};

// Optimizes one domain's prompt prefix and visual adapters against a frozen
// backbone; restores the weights of the best validation epoch on exit.
inline AdapterTrainResult train_adapter_pair(Backbone& model, const std::vector<VqaSample>& train,
                                             const std::vector<VqaSample>& val,
                                             const AdapterConfig& acfg, const TrainConfig& tcfg) {
    tcfg.validate();
    if (train.empty()) throw ContractError("adapter training set is empty");
    if (!model.params().all_frozen()) {
        throw ContractError("adapter training requires a frozen backbone; pretrain and freeze first");
    }
    const std::string domain = train.front().domain;
    for (const VqaSample& s : train) {
        if (s.domain != domain) {
            throw ContractError("adapter training set mixes domains '" + domain + "' and '" +
                                s.domain + "'");
        }
    }
    const std::string backbone_before = model.params().checksum();

    AdapterPair pair = AdapterPair::init(domain, acfg, mix_seed(tcfg.seed, domain));
    pair.seed_prefix_from(model.params().at("text.tok").tensor, train.front().question,
                          mix_seed(tcfg.seed, domain));
    pair.activate(model.hooks());

    TrainLog log;
    log.initial_val_metric = metric_value(tcfg.eval_metric, detail::greedy_predictions(model, val),
                                          detail::golds_of(val));
    double best_metric = log.initial_val_metric;
    std::size_t best_epoch = 0;
    auto best_snapshot = detail::snapshot_values(pair.params());

    AdamWConfig ocfg;
    ocfg.learning_rate = tcfg.learning_rate;
    AdamW opt(ocfg);
    Rng shuffle_rng(mix_seed(tcfg.seed, "adapter-shuffle"));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const double inv_batch = 1.0 / static_cast<double>(tcfg.batch_size);
    std::size_t since_best = 0;
    log.stopping_reason = "max_epochs";
    for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        detail::shuffle_indices(order, shuffle_rng);
        double loss_sum = 0.0;
        std::size_t in_batch = 0;
        pair.params().zero_grads();
        for (std::size_t i = 0; i < order.size(); ++i) {
            const VqaSample& s = train[order[i]];
            Tensor loss = scale(model.answer_loss(s.image, s.question, s.answer, vocab::end), inv_batch);
            loss.backward();
            loss_sum += loss.item() * static_cast<double>(tcfg.batch_size);
            if (++in_batch == tcfg.batch_size || i + 1 == order.size()) {
                opt.step(pair.params());
                pair.params().zero_grads();
                in_batch = 0;
            }
        }
        EpochEntry e;
        e.epoch = epoch;
        e.train_loss = loss_sum / static_cast<double>(order.size());
        e.val_metric = metric_value(tcfg.eval_metric, detail::greedy_predictions(model, val),
                                    detail::golds_of(val));
        e.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(e);

        if (e.val_metric > best_metric) {
            best_metric = e.val_metric;
            best_epoch = epoch;
            best_snapshot = detail::snapshot_values(pair.params());
            since_best = 0;
        } else if (++since_best >= tcfg.patience) {
            log.stopping_reason = "early_stop";
            break;
        }
    }
    detail::restore_values(pair.params(), best_snapshot);
    log.best_epoch = best_epoch;

    model.hooks().clear_all();
    const std::string backbone_after = model.params().checksum();
    if (backbone_after != backbone_before) {
        throw StateError("backbone parameters changed during adapter training");
    }
    log.frozen_checksums["backbone"] = backbone_after;
    pair.params().freeze_all();
    return {std::move(pair), std::move(log)};
}

// ---- policy-routed evaluation ----

struct EvalPolicy {
    enum class Kind { frozen, oracle, fixed, hard, soft, random };
    Kind kind = Kind::hard;
    std::string fixed_domain;  // kind == fixed
    double temperature = 1.0;  // kind == soft
    std::uint64_t seed = 0;    // kind == random
    bool use_prompt = true;    // false: activate adapters without their prompt prefix
    bool use_visual = true;    // false: activate adapters without their visual hooks

    static EvalPolicy frozen() { return {Kind::frozen, "", 1.0, 0}; }
    static EvalPolicy oracle() { return {Kind::oracle, "", 1.0, 0}; }
    static EvalPolicy fixed(std::string domain) { return {Kind::fixed, std::move(domain), 1.0, 0}; }
    static EvalPolicy hard() { return {Kind::hard, "", 1.0, 0}; }
    static EvalPolicy soft(double temperature) { return {Kind::soft, "", temperature, 0}; }
    static EvalPolicy random(std::uint64_t seed) { return {Kind::random, "", 1.0, seed}; }

    std::string name() const {
        switch (kind) {
            case Kind::frozen: return "frozen";
            case Kind::oracle: return "oracle";
            case Kind::fixed: return "fixed";
            case Kind::hard: return "hard";
            case Kind::soft: return "soft";
            case Kind::random: return "random";
        }
        throw ContractError("unknown evaluation policy");
    }
};

// Routes every sample by the chosen policy, generates greedily, and scores
// all metrics per domain plus overall. Side-effect free: the hook engine is
// left empty and no parameters move. Routing decisions and raw predictions
// can be captured through the optional out-parameters.
inline EvalReport evaluate(Backbone& model, const AdapterRegistry* registry,
                           const DomainClassifier* classifier,
                           const std::map<std::string, std::vector<double>>* prototypes,
                           const std::vector<VqaSample>& samples, const EvalPolicy& policy,
                           std::vector<RoutingDecision>* decisions = nullptr,
                           std::vector<TokenSeq>* out_predictions = nullptr) {
    using Kind = EvalPolicy::Kind;
    if (policy.kind != Kind::frozen && (registry == nullptr || registry->size() == 0)) {
        throw ContractError("policy '" + policy.name() + "' needs a non-empty adapter registry");
    }
    if ((policy.kind == Kind::hard || policy.kind == Kind::soft) && classifier == nullptr) {
        throw ContractError("policy '" + policy.name() + "' needs a trained domain classifier");
    }
    if (policy.kind == Kind::soft && prototypes == nullptr) {
        throw StateError("soft routing requires domain prototypes");
    }

    const std::vector<std::string> available = registry ? registry->names() : std::vector<std::string>{};
    Rng random_rng(mix_seed(policy.seed, "random-routing"));

    // soft routing mixes over the domains that exist in both the classifier's
    // label space and the registry (the registry may be a leave-one-out subset)
    std::vector<std::string> soft_names;
    std::vector<std::vector<double>> soft_protos;
    if (policy.kind == Kind::soft) {
        for (const std::string& d : classifier->config().domains) {
            if (!registry->contains(d)) continue;
            const auto it = prototypes->find(d);
            if (it == prototypes->end()) {
                throw StateError("no prototype recorded for domain '" + d + "'");
            }
            soft_names.push_back(d);
            soft_protos.push_back(it->second);
        }
        if (soft_names.empty()) throw StateError("no usable prototypes for soft routing");
    }

    std::vector<TokenSeq> preds(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const VqaSample& s = samples[i];
        std::optional<AdapterScope> scope;
        RoutingDecision decision;
        decision.probabilities.assign(std::max<std::size_t>(available.size(), 1), 0.0);
        decision.weights = decision.probabilities;
        switch (policy.kind) {
            case Kind::frozen:
                break;
            case Kind::oracle: {
                const std::size_t idx = static_cast<std::size_t>(
                    std::find(available.begin(), available.end(), s.domain) - available.begin());
                if (idx == available.size()) {
                    throw LookupError("oracle routing: registry lacks domain '" + s.domain + "'");
                }
                scope.emplace(model.hooks(), registry->at(s.domain), policy.use_prompt,
                              policy.use_visual);
                decision.policy = RoutePolicy::hard;
                decision.selected = idx;
                decision.probabilities[idx] = decision.weights[idx] = 1.0;
                break;
            }
            case Kind::fixed: {
                const std::size_t idx = static_cast<std::size_t>(
                    std::find(available.begin(), available.end(), policy.fixed_domain) -
                    available.begin());
                if (idx == available.size()) {
                    throw LookupError("fixed routing: registry lacks domain '" + policy.fixed_domain +
                                      "'");
                }
                scope.emplace(model.hooks(), registry->at(policy.fixed_domain), policy.use_prompt,
                              policy.use_visual);
                decision.policy = RoutePolicy::hard;
                decision.selected = idx;
                decision.probabilities[idx] = decision.weights[idx] = 1.0;
                break;
            }
            case Kind::hard: {
                // argmax over the domains the registry can serve; with a full
                // registry this is the plain classifier argmax
                const std::vector<double> probs = classifier->classify(s.image);
                double best = -1.0;
                std::size_t best_idx = 0;
                for (std::size_t k = 0; k < available.size(); ++k) {
                    const double p = probs[classifier->domain_index(available[k])];
                    if (p > best) {
                        best = p;
                        best_idx = k;
                    }
                }
                scope.emplace(model.hooks(), registry->at(available[best_idx]), policy.use_prompt,
                              policy.use_visual);
                decision.policy = RoutePolicy::hard;
                decision.selected = best_idx;
                decision.weights[best_idx] = 1.0;
                for (std::size_t k = 0; k < available.size(); ++k) {
                    decision.probabilities[k] = probs[classifier->domain_index(available[k])];
                }
                break;
            }
            case Kind::soft: {
                const RoutingDecision soft =
                    route_soft(classifier->penultimate(s.image), soft_protos, policy.temperature);
                std::vector<std::pair<double, const AdapterPair*>> mix;
                for (std::size_t k = 0; k < soft_names.size(); ++k) {
                    mix.emplace_back(soft.weights[k], &registry->at(soft_names[k]));
                }
                scope.emplace(model.hooks(), mix, policy.use_prompt, policy.use_visual);
                decision = soft;
                break;
            }
            case Kind::random: {
                const RoutingDecision pick = route_random(available.size(), random_rng);
                scope.emplace(model.hooks(), registry->at(available[pick.selected]), policy.use_prompt,
                              policy.use_visual);
                decision = pick;
                break;
            }
        }
        preds[i] = model.generate_greedy(s.image, s.question, vocab::end);
        if (decisions) decisions->push_back(std::move(decision));
    }
    if (out_predictions) *out_predictions = preds;

    EvalReport report;
    std::map<std::string, std::vector<std::size_t>> by_domain;
    for (std::size_t i = 0; i < samples.size(); ++i) by_domain[samples[i].domain].push_back(i);
    std::vector<TokenSeq> all_preds, all_golds;
    for (const auto& [name, idxs] : by_domain) {
        std::vector<TokenSeq> p, g;
        for (std::size_t i : idxs) {
            p.push_back(preds[i]);
            g.push_back(samples[i].answer);
        }
        report.per_domain[name] = compute_row(p, g);
        all_preds.insert(all_preds.end(), p.begin(), p.end());
        all_golds.insert(all_golds.end(), g.begin(), g.end());
    }
    report.overall = compute_row(all_preds, all_golds);
    report.config_echo = {{"policy", policy.name()}, {"samples", samples.size()}};
    if (policy.kind == Kind::soft) report.config_echo["temperature"] = policy.temperature;
    if (policy.kind == Kind::random) report.config_echo["seed"] = policy.seed;
    if (policy.kind == Kind::fixed) report.config_echo["fixed_domain"] = policy.fixed_domain;
    if (!policy.use_prompt) report.config_echo["use_prompt"] = false;
    if (!policy.use_visual) report.config_echo["use_visual"] = false;
    return report;
}

}  // namespace davqa
