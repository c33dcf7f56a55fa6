#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "davqa/backbone.hpp"
#include "davqa/checkpoint.hpp"
#include "davqa/errors.hpp"
#include "davqa/hooks.hpp"
#include "davqa/rng.hpp"
#include "davqa/tensor.hpp"

namespace davqa {

struct AdapterConfig {
    std::size_t prefix_len = 10;                  // prompt prefix rows (l)
    std::size_t d_q = 64;                         // must match backbone d_q
    std::size_t d_v = 64;                         // must match backbone d_v
    std::size_t d_a = 16;                         // bottleneck width
    std::vector<std::size_t> layers{4, 8};        // 1-based vision injection layers
    std::string activation = "gelu";              // "gelu" or "relu"

    void validate(const BackboneConfig& bb) const {
        if (d_q != bb.d_q || d_v != bb.d_v) {
            throw ConfigError("adapter dims (d_q=" + std::to_string(d_q) + ", d_v=" + std::to_string(d_v) +
                              ") do not match backbone (d_q=" + std::to_string(bb.d_q) +
                              ", d_v=" + std::to_string(bb.d_v) + ")");
        }
        if (activation != "gelu" && activation != "relu") {
            throw ConfigError("unknown adapter activation '" + activation + "'");
        }
        if (d_a == 0) throw ConfigError("bottleneck width d_a must be positive");
        std::vector<std::size_t> sorted = layers;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            if (sorted[i] < 1 || sorted[i] > bb.vision_layers) {
                throw ConfigError("injection layer " + std::to_string(sorted[i]) +
                                  " outside [1, " + std::to_string(bb.vision_layers) + "]");
            }
            if (i > 0 && sorted[i] == sorted[i - 1]) {
                throw ConfigError("duplicate injection layer " + std::to_string(sorted[i]));
            }
        }
    }
};

// One domain's adaptation parameters: a prompt prefix P [l x d_q] prepended to
// the question embeddings, plus per-layer bottleneck MLPs producing additive
// deltas W2 . act(W1 . h + b1) + b2 on the vision stream.
class AdapterPair {
public:
    AdapterPair(std::string domain, AdapterConfig cfg) : domain_(std::move(domain)), cfg_(std::move(cfg)) {
        std::sort(cfg_.layers.begin(), cfg_.layers.end());
        params_.add("prompt.prefix", Tensor::zeros({cfg_.prefix_len, cfg_.d_q}));
        for (std::size_t l : cfg_.layers) {
            const std::string p = layer_prefix(l);
            params_.add(p + ".w1", Tensor::zeros({cfg_.d_a, cfg_.d_v}));
            params_.add(p + ".b1", Tensor::zeros({cfg_.d_a}));
            params_.add(p + ".w2", Tensor::zeros({cfg_.d_v, cfg_.d_a}));
            params_.add(p + ".b2", Tensor::zeros({cfg_.d_v}));
        }
    }

    // P and W1 draw from N(0, 0.02^2); W2 and biases start at zero so a fresh
    // visual adapter is an exact no-op through the additive hook.
    static AdapterPair init(const std::string& domain, const AdapterConfig& cfg, std::uint64_t seed) {
        AdapterPair pair(domain, cfg);
        Rng rng(mix_seed(seed, {0xada9, mix_seed(0, domain)}));
        const double sd = 0.02;
        for (double& v : pair.params_.at("prompt.prefix").tensor.data()) v = rng.normal(0.0, sd);
        for (std::size_t l : pair.cfg_.layers) {
            for (double& v : pair.params_.at(layer_prefix(l) + ".w1").tensor.data())
                v = rng.normal(0.0, sd);
        }
        return pair;
    }

    // Re-seeds the prefix rows from real token embeddings (cycled over `ids`)
    // with a little noise for symmetry breaking. Layer norm makes row scale
    // irrelevant downstream, so a small-variance random prefix is still a
    // full-strength random token to the decoder; starting from embeddings the
    // decoder was trained on keeps the fresh adapter close to harmless.
    void seed_prefix_from(const Tensor& token_table, const std::vector<int>& ids,
                          std::uint64_t seed) {
        if (cfg_.prefix_len == 0) return;
        if (ids.empty()) throw ContractError("seed_prefix_from needs at least one token id");
        if (token_table.cols() != cfg_.d_q) {
            throw ShapeError("token table width " + shape_str(token_table.shape()) +
                             " does not match prefix width " + std::to_string(cfg_.d_q));
        }
        Rng rng(mix_seed(seed, "prefix-seed"));
        Tensor prefix = params_.at("prompt.prefix").tensor;
        for (std::size_t r = 0; r < cfg_.prefix_len; ++r) {
            const auto src = static_cast<std::size_t>(ids[r % ids.size()]);
            if (src >= token_table.rows()) {
                throw IndexError("prefix seed token " + std::to_string(src) + " outside the table");
            }
            for (std::size_t c = 0; c < cfg_.d_q; ++c) {
                prefix.data()[r * cfg_.d_q + c] =
                    token_table.data()[src * cfg_.d_q + c] + rng.normal(0.0, 0.002);
            }
        }
    }

    const std::string& domain() const { return domain_; }
    const AdapterConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    Tensor prefix() const { return params_.at("prompt.prefix").tensor; }

    bool has_layer(std::size_t layer) const {
        return std::find(cfg_.layers.begin(), cfg_.layers.end(), layer) != cfg_.layers.end();
    }

    // Prepends the prefix to question embeddings: [P; q] with l + n rows.
    Tensor prompt_forward(const Tensor& question_embeddings) const {
        if (question_embeddings.cols() != cfg_.d_q) {
            throw ShapeError("prompt_forward: embeddings " + shape_str(question_embeddings.shape()) +
                             " do not match prefix width " + std::to_string(cfg_.d_q));
        }
        if (cfg_.prefix_len == 0) return question_embeddings;
        return concat_rows({prefix(), question_embeddings});
    }

    // The additive delta for one configured vision layer; the hook engine (or
    // the inline build) performs the h + delta addition.
    Tensor visual_delta(std::size_t layer, const Tensor& h) const {
        if (!has_layer(layer)) {
            throw ContractError("adapter '" + domain_ + "' has no visual adapter at layer " +
                                std::to_string(layer));
        }
        const std::string p = layer_prefix(layer);
        Tensor z = linear(h, params_.at(p + ".w1").tensor, params_.at(p + ".b1").tensor);
        z = cfg_.activation == "relu" ? relu(z) : gelu(z);
        return linear(z, params_.at(p + ".w2").tensor, params_.at(p + ".b2").tensor);
    }

    // Site -> transform list for the hook engine.
    std::vector<std::pair<std::string, DeltaFn>> hook_set() const {
        std::vector<std::pair<std::string, DeltaFn>> out;
        for (std::size_t l : cfg_.layers) {
            out.emplace_back(vision_site_name(l),
                             [this, l](const Tensor& h) { return visual_delta(l, h); });
        }
        return out;
    }

    // Installs this pair as the only active adapter set: visual hooks at the
    // configured layers plus the prefix bound for the next generation call.
    void activate(HookEngine& hooks) const {
        hooks.swap_active_set(hook_set(),
                              cfg_.prefix_len > 0 ? std::optional<Tensor>(prefix()) : std::nullopt);
    }

    std::size_t parameter_count() const { return params_.total_elements(); }

    void save(const std::filesystem::path& path) const {
        nlohmann::json meta;
        meta["kind"] = "adapter_pair";
        meta["domain"] = domain_;
        meta["l"] = cfg_.prefix_len;
        meta["d_q"] = cfg_.d_q;
        meta["d_v"] = cfg_.d_v;
        meta["d_a"] = cfg_.d_a;
        meta["layers"] = cfg_.layers;
        meta["activation"] = cfg_.activation;
        ckpt::save(params_, path, meta);
    }

    // Validates the stored config against the backbone before touching any
    // weight, then restores parameters bit-exactly.
    static AdapterPair load(const std::filesystem::path& path, const BackboneConfig& bb) {
        ckpt::Checkpoint ck = ckpt::load(path);
        if (ck.meta.value("kind", "") != "adapter_pair") {
            throw FormatError("not an adapter checkpoint: " + path.string());
        }
        AdapterConfig cfg;
        cfg.prefix_len = ck.meta.at("l").get<std::size_t>();
        cfg.d_q = ck.meta.at("d_q").get<std::size_t>();
        cfg.d_v = ck.meta.at("d_v").get<std::size_t>();
        cfg.d_a = ck.meta.at("d_a").get<std::size_t>();
        cfg.layers = ck.meta.at("layers").get<std::vector<std::size_t>>();
        cfg.activation = ck.meta.at("activation").get<std::string>();
        cfg.validate(bb);
        AdapterPair pair(ck.meta.at("domain").get<std::string>(), cfg);
        ckpt::load_into(ck, pair.params_);
        return pair;
    }

private:
    static std::string layer_prefix(std::size_t layer) { return "visual.layer" + std::to_string(layer); }

    std::string domain_;
    AdapterConfig cfg_;
    ParameterStore params_;
};

// Scoped activation: installs the pair on construction and clears every
// adapter hook (and the bound prefix) on scope exit, so inference never leaks
// adapter state into the next call. The use_prompt / use_visual switches
// support component-removal studies: a disabled component is simply not
// installed, leaving the other one untouched.
class AdapterScope {
public:
    AdapterScope(HookEngine& hooks, const AdapterPair& pair, bool use_prompt = true,
                 bool use_visual = true)
        : hooks_(hooks) {
        hooks_.swap_active_set(
            use_visual ? pair.hook_set() : std::vector<std::pair<std::string, DeltaFn>>{},
            use_prompt && pair.config().prefix_len > 0 ? std::optional<Tensor>(pair.prefix())
                                                       : std::nullopt);
    }

    // Soft-mix activation: at each site in the union of the pairs' layers the
    // delta is sum_k w_k * delta_k(h), and the bound prefix is sum_k w_k P_k.
    AdapterScope(HookEngine& hooks, const std::vector<std::pair<double, const AdapterPair*>>& mix,
                 bool use_prompt = true, bool use_visual = true)
        : hooks_(hooks) {
        if (mix.empty()) throw ContractError("soft-mix activation needs at least one adapter");
        std::vector<std::pair<std::string, DeltaFn>> hook_set;
        if (use_visual) {
            std::vector<std::size_t> sites;
            for (const auto& [w, pair] : mix) {
                for (std::size_t l : pair->config().layers) {
                    if (std::find(sites.begin(), sites.end(), l) == sites.end()) sites.push_back(l);
                }
            }
            std::sort(sites.begin(), sites.end());
            for (std::size_t l : sites) {
                hook_set.emplace_back(vision_site_name(l), [mix, l](const Tensor& h) {
                    Tensor acc = Tensor::zeros(h.shape());
                    for (const auto& [w, pair] : mix) {
                        if (pair->has_layer(l)) acc = add(acc, scale(pair->visual_delta(l, h), w));
                    }
                    return acc;
                });
            }
        }
        std::optional<Tensor> prefix;
        if (use_prompt) {
            for (const auto& [w, pair] : mix) {
                if (pair->config().prefix_len == 0) continue;
                Tensor part = scale(pair->prefix(), w);
                prefix = prefix ? add(*prefix, part) : part;
            }
        }
        hooks_.swap_active_set(hook_set, std::move(prefix));
    }

    ~AdapterScope() { hooks_.clear_all(); }
    AdapterScope(const AdapterScope&) = delete;
    AdapterScope& operator=(const AdapterScope&) = delete;

private:
    HookEngine& hooks_;
};

}  // namespace davqa
