#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "davqa/adapters.hpp"
#include "davqa/backbone.hpp"
#include "davqa/checkpoint.hpp"
#include "davqa/errors.hpp"
#include "davqa/hooks.hpp"
#include "davqa/rng.hpp"
#include "davqa/synthdata.hpp"
#include "davqa/tensor.hpp"

namespace davqa {

// ---- domain classifier: patch-mean pooling -> tanh MLP -> K logits ----

struct ClassifierConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t hidden = 32;
    std::vector<std::string> domains;  // index order is the registry order

    std::size_t feature_dim() const {
        const std::size_t per_side = image_size / patch_size;
        return per_side * per_side;
    }

    void validate() const {
        if (domains.size() < 2) {
            throw ConfigError("domain classifier needs at least 2 domains, got " +
                              std::to_string(domains.size()));
        }
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
            throw ConfigError("classifier patch size must divide the image size");
        }
        if (hidden == 0) throw ConfigError("classifier hidden width must be positive");
    }
};

class DomainClassifier {
public:
    explicit DomainClassifier(ClassifierConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t f = cfg_.feature_dim(), h = cfg_.hidden, k = cfg_.domains.size();
        w1_ = params_.add("clf.w1", Tensor::zeros({h, f}));
        b1_ = params_.add("clf.b1", Tensor::zeros({1, h}));
        w2_ = params_.add("clf.w2", Tensor::zeros({k, h}));
        b2_ = params_.add("clf.b2", Tensor::zeros({1, k}));
    }

    // Symmetric zero init cannot train (all-zero hidden activations); give the
    // MLP a small random start before fitting.
    void init_params(std::uint64_t seed) {
        Rng rng(mix_seed(seed, "classifier-init"));
        for (const std::string name : {"clf.w1", "clf.w2"}) {
            Tensor t = params_.at(name).tensor;
            for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * 0.1;
        }
    }

    const ClassifierConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    std::size_t num_domains() const { return cfg_.domains.size(); }
    bool frozen() const { return params_.all_frozen(); }
    void freeze() { params_.freeze_all(); }

    std::size_t domain_index(const std::string& name) const {
        for (std::size_t i = 0; i < cfg_.domains.size(); ++i)
            if (cfg_.domains[i] == name) return i;
        throw LookupError("domain '" + name + "' unknown to the classifier");
    }

    // Mean intensity per patch, row-major over the patch grid.
    std::vector<double> features(const Image& image) const {
        if (image.size() != cfg_.image_size * cfg_.image_size) {
            throw ConfigError("classifier expects a " + std::to_string(cfg_.image_size) + "x" +
                              std::to_string(cfg_.image_size) + " image, got " +
                              std::to_string(image.size()) + " pixels");
        }
        const std::size_t per_side = cfg_.image_size / cfg_.patch_size;
        std::vector<double> out(per_side * per_side, 0.0);
        for (std::size_t r = 0; r < cfg_.image_size; ++r) {
            for (std::size_t c = 0; c < cfg_.image_size; ++c) {
                out[(r / cfg_.patch_size) * per_side + (c / cfg_.patch_size)] +=
                    image[r * cfg_.image_size + c];
            }
        }
        const double denom = static_cast<double>(cfg_.patch_size * cfg_.patch_size);
        for (double& v : out) v /= denom;
        return out;
    }

    // Differentiable forward over a batch of feature rows.
    Tensor logits(Tensor feature_rows) const {
        return linear(tanh_act(linear(feature_rows, w1_, b1_)), w2_, b2_);
    }

    std::vector<double> classify(const Image& image) const {
        NoGradGuard guard;
        const Tensor probs = softmax_rows(logits(Tensor::from({1, cfg_.feature_dim()}, features(image))));
        return probs.data();
    }

    // Penultimate activations (the hidden layer) — the embedding space in
    // which domain prototypes live.
    std::vector<double> penultimate(const Image& image) const {
        NoGradGuard guard;
        const Tensor h = tanh_act(linear(Tensor::from({1, cfg_.feature_dim()}, features(image)), w1_, b1_));
        return h.data();
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json meta;
        meta["kind"] = "domain_classifier";
        meta["image_size"] = cfg_.image_size;
        meta["patch_size"] = cfg_.patch_size;
        meta["hidden"] = cfg_.hidden;
        meta["domains"] = cfg_.domains;
        ckpt::save(params_, path, meta);
    }

    static DomainClassifier load(const std::filesystem::path& path) {
        const ckpt::Checkpoint ck = ckpt::load(path);
        if (!ck.meta.contains("kind") || ck.meta["kind"] != "domain_classifier") {
            throw FormatError("checkpoint at " + path.string() + " is not a domain classifier");
        }
        ClassifierConfig cfg;
        cfg.image_size = ck.meta.at("image_size").get<std::size_t>();
        cfg.patch_size = ck.meta.at("patch_size").get<std::size_t>();
        cfg.hidden = ck.meta.at("hidden").get<std::size_t>();
        cfg.domains = ck.meta.at("domains").get<std::vector<std::string>>();
        DomainClassifier clf(cfg);
        ckpt::load_into(ck, clf.params_);
        clf.freeze();
        return clf;
    }

private:
    ClassifierConfig cfg_;
    ParameterStore params_;
    Tensor w1_, b1_, w2_, b2_;
};

// ---- routing decisions ----

enum class RoutePolicy { hard, soft, random };

inline std::string policy_name(RoutePolicy p) {
    switch (p) {
        case RoutePolicy::hard: return "hard";
        case RoutePolicy::soft: return "soft";
        case RoutePolicy::random: return "random";
    }
    throw ContractError("unknown routing policy");
}

inline RoutePolicy policy_from_name(const std::string& name) {
    if (name == "hard") return RoutePolicy::hard;
    if (name == "soft") return RoutePolicy::soft;
    if (name == "random") return RoutePolicy::random;
    throw ConfigError("unknown routing policy '" + name + "' (expected hard|soft|random)");
}

struct RoutingDecision {
    RoutePolicy policy = RoutePolicy::hard;
    std::vector<double> probabilities;  // simplex over domains
    std::size_t selected = 0;           // argmax (hard/random draw)
    std::vector<double> weights;        // mixing weights (one-hot except soft)
};

namespace detail {

inline void check_simplex(const std::vector<double>& probs) {
    if (probs.empty()) throw ContractError("routing needs at least one probability");
    double sum = 0.0;
    for (double p : probs) {
        if (p < 0.0) throw ContractError("negative probability in routing input");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ContractError("routing probabilities sum to " + std::to_string(sum));
    }
}

inline std::size_t argmax_lowest(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;  // strict: ties keep the lowest index
    return best;
}

}  // namespace detail

inline RoutingDecision route_hard(const std::vector<double>& probs) {
    detail::check_simplex(probs);
    RoutingDecision d;
    d.policy = RoutePolicy::hard;
    d.probabilities = probs;
    d.selected = detail::argmax_lowest(probs);
    d.weights.assign(probs.size(), 0.0);
    d.weights[d.selected] = 1.0;
    return d;
}

// Soft routing weights adapters by similarity between the classifier's
// penultimate embedding and per-domain prototypes: softmax(-||e-p_k||^2 / t).
inline RoutingDecision route_soft(const std::vector<double>& embedding,
                                  const std::vector<std::vector<double>>& prototypes,
                                  double temperature = 1.0) {
    if (temperature <= 0.0) throw ContractError("soft routing temperature must be positive");
    if (prototypes.empty()) throw StateError("soft routing requires domain prototypes");
    std::vector<double> sims(prototypes.size());
    for (std::size_t k = 0; k < prototypes.size(); ++k) {
        if (prototypes[k].size() != embedding.size()) {
            throw StateError("prototype " + std::to_string(k) + " has dimension " +
                             std::to_string(prototypes[k].size()) + ", embedding has " +
                             std::to_string(embedding.size()));
        }
        double d2 = 0.0;
        for (std::size_t i = 0; i < embedding.size(); ++i) {
            const double diff = embedding[i] - prototypes[k][i];
            d2 += diff * diff;
        }
        sims[k] = -d2 / temperature;
    }
    const double peak = *std::max_element(sims.begin(), sims.end());
    double z = 0.0;
    for (double& s : sims) {
        s = std::exp(s - peak);
        z += s;
    }
    RoutingDecision d;
    d.policy = RoutePolicy::soft;
    d.weights.resize(sims.size());
    for (std::size_t k = 0; k < sims.size(); ++k) d.weights[k] = sims[k] / z;
    d.probabilities = d.weights;
    d.selected = detail::argmax_lowest(d.weights);
    return d;
}

inline RoutingDecision route_random(std::size_t num_domains, Rng& rng) {
    if (num_domains < 1) throw ContractError("random routing needs at least one domain");
    RoutingDecision d;
    d.policy = RoutePolicy::random;
    d.probabilities.assign(num_domains, 1.0 / static_cast<double>(num_domains));
    d.selected = rng.uniform_int(num_domains);
    d.weights.assign(num_domains, 0.0);
    d.weights[d.selected] = 1.0;
    return d;
}

// ---- classifier training ----

struct TrainClassifierOptions {
    std::size_t epochs = 20;
    double lr = 1e-3;
    std::size_t batch_size = 32;
    std::size_t hidden = 32;
    std::uint64_t seed = 0;
};

inline std::vector<std::string> domains_of(const std::vector<VqaSample>& samples) {
    std::vector<std::string> names;
    for (const VqaSample& s : samples)
        if (std::find(names.begin(), names.end(), s.domain) == names.end()) names.push_back(s.domain);
    std::sort(names.begin(), names.end());
    return names;
}

inline DomainClassifier train_classifier(const std::vector<VqaSample>& samples,
                                         const TrainClassifierOptions& opts,
                                         std::vector<double>* epoch_losses = nullptr) {
    if (samples.empty()) throw ConfigError("classifier training set is empty");
    ClassifierConfig cfg;
    cfg.hidden = opts.hidden;
    cfg.domains = domains_of(samples);
    if (cfg.domains.size() < 2) {
        throw ConfigError("classifier training needs at least 2 domains, got " +
                          std::to_string(cfg.domains.size()));
    }
    const std::size_t side = static_cast<std::size_t>(
        std::llround(std::sqrt(static_cast<double>(samples.front().image.size()))));
    cfg.image_size = side;
    cfg.patch_size = side / 4;  // 4x4 patch grid regardless of scale
    DomainClassifier clf(cfg);
    clf.init_params(opts.seed);

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(opts.seed, "classifier-shuffle"));
    AdamWConfig ocfg;
    ocfg.learning_rate = opts.lr;
    AdamW opt(ocfg);

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng.uniform_int(i);
            std::swap(order[i - 1], order[j]);
        }
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
            const std::size_t stop = std::min(order.size(), start + opts.batch_size);
            std::vector<double> rows;
            std::vector<int> labels;
            for (std::size_t i = start; i < stop; ++i) {
                const std::vector<double> f = clf.features(samples[order[i]].image);
                rows.insert(rows.end(), f.begin(), f.end());
                labels.push_back(static_cast<int>(clf.domain_index(samples[order[i]].domain)));
            }
            const Tensor x = Tensor::from({labels.size(), cfg.feature_dim()}, rows);
            Tensor loss = softmax_cross_entropy(clf.logits(x), labels);
            clf.params().zero_grads();
            loss.backward();
            opt.step(clf.params());
            loss_sum += loss.item();
            ++batches;
        }
        if (epoch_losses) epoch_losses->push_back(loss_sum / static_cast<double>(batches));
    }
    clf.freeze();
    return clf;
}

inline double classifier_accuracy(const DomainClassifier& clf, const std::vector<VqaSample>& samples) {
    if (samples.empty()) return 0.0;
    std::size_t hits = 0;
    for (const VqaSample& s : samples) {
        const std::vector<double> probs = clf.classify(s.image);
        if (detail::argmax_lowest(probs) == clf.domain_index(s.domain)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// Mean penultimate embedding per domain over the given (training) samples.
inline std::map<std::string, std::vector<double>> compute_prototypes(
    const DomainClassifier& clf, const std::vector<VqaSample>& samples) {
    std::map<std::string, std::vector<double>> sums;
    std::map<std::string, std::size_t> counts;
    for (const VqaSample& s : samples) {
        clf.domain_index(s.domain);  // validates membership
        const std::vector<double> e = clf.penultimate(s.image);
        auto& acc = sums[s.domain];
        if (acc.empty()) acc.assign(e.size(), 0.0);
        for (std::size_t i = 0; i < e.size(); ++i) acc[i] += e[i];
        counts[s.domain]++;
    }
    for (auto& [name, acc] : sums) {
        const auto n = static_cast<double>(counts[name]);
        for (double& v : acc) v /= n;
    }
    return sums;
}

// ---- adapter registry ----

class AdapterRegistry {
public:
    explicit AdapterRegistry(const BackboneConfig& backbone) : backbone_(backbone) {}

    void add(AdapterPair pair) {
        const std::string name = pair.domain();
        if (pairs_.count(name)) throw ConflictError("registry already holds domain '" + name + "'");
        pair.config().validate(backbone_);  // all pairs share the backbone's dimensions
        pairs_.emplace(name, std::move(pair));
    }

    bool contains(const std::string& name) const { return pairs_.count(name) > 0; }

    const AdapterPair& at(const std::string& name) const {
        const auto it = pairs_.find(name);
        if (it == pairs_.end()) throw LookupError("registry has no domain '" + name + "'");
        return it->second;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [name, pair] : pairs_) out.push_back(name);
        return out;
    }

    std::size_t size() const { return pairs_.size(); }

    void set_default_domain(const std::string& name) {
        if (!contains(name)) throw LookupError("cannot default to unknown domain '" + name + "'");
        default_domain_ = name;
    }
    const std::optional<std::string>& default_domain() const { return default_domain_; }

private:
    BackboneConfig backbone_;
    std::map<std::string, AdapterPair> pairs_;  // sorted by name = index order
    std::optional<std::string> default_domain_;
};

// Atomically routes the hook engine to one domain's adapters.
inline void swap_domain(HookEngine& hooks, const AdapterRegistry& registry, const std::string& name) {
    registry.at(name).activate(hooks);
}

// ---- registry manifest ----

struct RegistryManifest {
    std::vector<std::string> domains;
    std::map<std::string, std::string> adapter_paths;
    std::string classifier_path;
    std::map<std::string, std::vector<double>> prototypes;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["domains"] = domains;
        j["adapters"] = adapter_paths;
        j["classifier"] = classifier_path;
        j["prototypes"] = prototypes;
        return j;
    }

    static RegistryManifest from_json(const nlohmann::json& j) {
        RegistryManifest m;
        try {
            m.domains = j.at("domains").get<std::vector<std::string>>();
            m.adapter_paths = j.at("adapters").get<std::map<std::string, std::string>>();
            m.classifier_path = j.at("classifier").get<std::string>();
            m.prototypes = j.at("prototypes").get<std::map<std::string, std::vector<double>>>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("malformed registry manifest: ") + e.what());
        }
        return m;
    }

    void save(const std::filesystem::path& path) const {
        if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw FileError("cannot write registry manifest: " + path.string());
        out << to_json().dump(2) << '\n';
    }

    static RegistryManifest load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw FileError("cannot open registry manifest: " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("registry manifest is not valid JSON: ") + e.what());
        }
        return from_json(j);
    }
};

}  // namespace davqa
