#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "davqa/adapters.hpp"
#include "davqa/backbone.hpp"
#include "davqa/checkpoint.hpp"
#include "davqa/errors.hpp"
#include "davqa/metrics.hpp"
#include "davqa/router.hpp"
#include "davqa/sha256.hpp"
#include "davqa/synthdata.hpp"
#include "davqa/tensor.hpp"
#include "davqa/trainer.hpp"

namespace davqa {

// Stable identifier stamped into every report footer. Deliberately a constant:
// reruns of the same binary must emit byte-identical reports.
inline constexpr const char* kBuildId = "davqa-0.1.0";

// Environment variable consulted for the output root when neither the command
// line nor the config file names one.
inline constexpr const char* kOutputEnvVar = "DAVQA_OUT";

// ---- backbone persistence ----

inline nlohmann::json backbone_config_to_json(const BackboneConfig& c) {
    return {{"image_size", c.image_size},
            {"patch_size", c.patch_size},
            {"d_v", c.d_v},
            {"vision_layers", c.vision_layers},
            {"d_q", c.d_q},
            {"decoder_layers", c.decoder_layers},
            {"heads", c.heads},
            {"vocab_size", c.vocab_size},
            {"max_answer_len", c.max_answer_len},
            {"max_text_len", c.max_text_len},
            {"mlp_ratio", c.mlp_ratio},
            {"ln_eps", c.ln_eps}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                           const std::string& scope) {
    if (!j.is_object()) throw ConfigError("config section '" + scope + "' must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* a : allowed) {
            if (it.key() == a) {
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError("unknown field '" + it.key() + "' in " + scope);
    }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j,
                           {"image_size", "patch_size", "d_v", "vision_layers", "d_q", "decoder_layers",
                            "heads", "vocab_size", "max_answer_len", "max_text_len", "mlp_ratio",
                            "ln_eps"},
                           "backbone config");
    BackboneConfig c;
    detail::read_field(j, "image_size", c.image_size);
    detail::read_field(j, "patch_size", c.patch_size);
    detail::read_field(j, "d_v", c.d_v);
    detail::read_field(j, "vision_layers", c.vision_layers);
    detail::read_field(j, "d_q", c.d_q);
    detail::read_field(j, "decoder_layers", c.decoder_layers);
    detail::read_field(j, "heads", c.heads);
    detail::read_field(j, "vocab_size", c.vocab_size);
    detail::read_field(j, "max_answer_len", c.max_answer_len);
    detail::read_field(j, "max_text_len", c.max_text_len);
    detail::read_field(j, "mlp_ratio", c.mlp_ratio);
    detail::read_field(j, "ln_eps", c.ln_eps);
    return c;
}

inline void save_backbone(const Backbone& model, const std::filesystem::path& path) {
    nlohmann::json meta;
    meta["kind"] = "backbone";
    meta["config"] = backbone_config_to_json(model.config());
    ckpt::save(model.params(), path, meta);
}

// Restores a backbone checkpoint and freezes it: everything downstream of
// pretraining treats the backbone as read-only.
inline Backbone load_backbone(const std::filesystem::path& path) {
    const ckpt::Checkpoint ck = ckpt::load(path);
    if (ck.meta.value("kind", "") != "backbone") {
        throw FormatError("checkpoint at " + path.string() + " is not a backbone");
    }
    Backbone model(backbone_config_from_json(ck.meta.at("config")));
    ckpt::load_into(ck, model.params());
    model.freeze();
    return model;
}

// ---- experiment configuration ----

struct PretrainSettings {
    std::size_t epochs = 10;
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    // The pretraining corpus is a deliberately small mixed-domain slice of the
    // train split; keeping it lean leaves the per-domain adapters measurable
    // headroom over the frozen model.
    std::size_t per_domain = 500;      // train samples per domain (0 = all)
    std::size_t val_per_domain = 50;   // validation samples per domain (0 = all)
};

struct AdapterSettings {
    std::size_t prefix_length = 10;
    std::vector<std::size_t> injection_layers{4, 8};
    std::size_t bottleneck = 16;
    std::string activation = "gelu";
    double learning_rate = 2e-4;
    std::size_t batch_size = 16;
    std::size_t max_epochs = 5;
    std::size_t patience = 2;
};

struct ClassifierSettings {
    std::size_t epochs = 12;
    double learning_rate = 1e-2;
    std::size_t batch_size = 32;
    std::size_t hidden = 32;
};

struct RoutingSettings {
    double temperature = 1.0;
    // The random policy is scored as the mean of this many independently
    // seeded passes, shrinking draw noise so the enumeration expectation is a
    // tight reference.
    std::size_t random_draws = 16;
};

struct SweepSettings {
    std::vector<std::size_t> prefix_lengths{5, 10, 20, 50};
};

struct ExperimentConfig {
    std::string output_dir;  // resolved by load_config: flag > file > env > default
    std::uint64_t master_seed = 7;
    std::size_t n_per_domain = 2500;  // split 80/10/10 into train/val/test
    BackboneConfig backbone{};
    PretrainSettings pretrain{};
    AdapterSettings adapter{};
    ClassifierSettings classifier{};
    RoutingSettings routing{};
    SweepSettings sweep{};

    AdapterConfig adapter_config() const {
        AdapterConfig a;
        a.prefix_len = adapter.prefix_length;
        a.d_q = backbone.d_q;
        a.d_v = backbone.d_v;
        a.d_a = adapter.bottleneck;
        a.layers = adapter.injection_layers;
        a.activation = adapter.activation;
        return a;
    }

    // Longest text stream any run can produce: prefix + question + teacher-
    // forced answer (or generated tokens, whichever bound is larger).
    std::size_t text_rows_needed(std::size_t prefix_len) const {
        std::size_t q = 0;
        for (const DomainSpec& s : DomainSpec::builtin()) q = std::max(q, s.question.size());
        return prefix_len + q + backbone.max_answer_len;
    }

    void validate() const {
        backbone.validate();
        if (n_per_domain < 20) {
            throw ConfigError("n_per_domain must be at least 20 so every split is populated");
        }
        if (pretrain.epochs == 0 || adapter.max_epochs == 0 || classifier.epochs == 0) {
            throw ConfigError("epoch budgets must be positive");
        }
        if (pretrain.batch_size == 0 || adapter.batch_size == 0 || classifier.batch_size == 0) {
            throw ConfigError("batch sizes must be positive");
        }
        if (pretrain.learning_rate <= 0 || adapter.learning_rate <= 0 || classifier.learning_rate <= 0) {
            throw ConfigError("learning rates must be positive");
        }
        if (routing.temperature <= 0) throw ConfigError("routing temperature must be positive");
        if (routing.random_draws == 0) throw ConfigError("routing random_draws must be positive");
        if (sweep.prefix_lengths.empty()) throw ConfigError("sweep prefix_lengths must not be empty");
        adapter_config().validate(backbone);
        if (text_rows_needed(adapter.prefix_length) > backbone.max_text_len) {
            throw ConfigError("prefix length " + std::to_string(adapter.prefix_length) +
                              " cannot fit in max_text_len " + std::to_string(backbone.max_text_len));
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["output_dir"] = output_dir;
        j["master_seed"] = master_seed;
        j["n_per_domain"] = n_per_domain;
        j["backbone"] = backbone_config_to_json(backbone);
        j["pretrain"] = {{"epochs", pretrain.epochs},
                         {"learning_rate", pretrain.learning_rate},
                         {"batch_size", pretrain.batch_size},
                         {"per_domain", pretrain.per_domain},
                         {"val_per_domain", pretrain.val_per_domain}};
        j["adapter"] = {{"prefix_length", adapter.prefix_length},
                        {"injection_layers", adapter.injection_layers},
                        {"bottleneck", adapter.bottleneck},
                        {"activation", adapter.activation},
                        {"learning_rate", adapter.learning_rate},
                        {"batch_size", adapter.batch_size},
                        {"max_epochs", adapter.max_epochs},
                        {"patience", adapter.patience}};
        j["classifier"] = {{"epochs", classifier.epochs},
                           {"learning_rate", classifier.learning_rate},
                           {"batch_size", classifier.batch_size},
                           {"hidden", classifier.hidden}};
        j["routing"] = {{"temperature", routing.temperature}, {"random_draws", routing.random_draws}};
        j["sweep"] = {{"prefix_lengths", sweep.prefix_lengths}};
        return j;
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        detail::reject_unknown(j,
                               {"output_dir", "master_seed", "n_per_domain", "backbone", "pretrain",
                                "adapter", "classifier", "routing", "sweep"},
                               "config");
        ExperimentConfig c;
        try {
            detail::read_field(j, "output_dir", c.output_dir);
            detail::read_field(j, "master_seed", c.master_seed);
            detail::read_field(j, "n_per_domain", c.n_per_domain);
            if (j.contains("backbone")) c.backbone = backbone_config_from_json(j.at("backbone"));
            if (j.contains("pretrain")) {
                const auto& p = j.at("pretrain");
                detail::reject_unknown(
                    p, {"epochs", "learning_rate", "batch_size", "per_domain", "val_per_domain"},
                    "pretrain config");
                detail::read_field(p, "epochs", c.pretrain.epochs);
                detail::read_field(p, "learning_rate", c.pretrain.learning_rate);
                detail::read_field(p, "batch_size", c.pretrain.batch_size);
                detail::read_field(p, "per_domain", c.pretrain.per_domain);
                detail::read_field(p, "val_per_domain", c.pretrain.val_per_domain);
            }
            if (j.contains("adapter")) {
                const auto& a = j.at("adapter");
                detail::reject_unknown(a,
                                       {"prefix_length", "injection_layers", "bottleneck", "activation",
                                        "learning_rate", "batch_size", "max_epochs", "patience"},
                                       "adapter config");
                detail::read_field(a, "prefix_length", c.adapter.prefix_length);
                detail::read_field(a, "injection_layers", c.adapter.injection_layers);
                detail::read_field(a, "bottleneck", c.adapter.bottleneck);
                detail::read_field(a, "activation", c.adapter.activation);
                detail::read_field(a, "learning_rate", c.adapter.learning_rate);
                detail::read_field(a, "batch_size", c.adapter.batch_size);
                detail::read_field(a, "max_epochs", c.adapter.max_epochs);
                detail::read_field(a, "patience", c.adapter.patience);
            }
            if (j.contains("classifier")) {
                const auto& k = j.at("classifier");
                detail::reject_unknown(k, {"epochs", "learning_rate", "batch_size", "hidden"},
                                       "classifier config");
                detail::read_field(k, "epochs", c.classifier.epochs);
                detail::read_field(k, "learning_rate", c.classifier.learning_rate);
                detail::read_field(k, "batch_size", c.classifier.batch_size);
                detail::read_field(k, "hidden", c.classifier.hidden);
            }
            if (j.contains("routing")) {
                const auto& r = j.at("routing");
                detail::reject_unknown(r, {"temperature", "random_draws"}, "routing config");
                detail::read_field(r, "temperature", c.routing.temperature);
                detail::read_field(r, "random_draws", c.routing.random_draws);
            }
            if (j.contains("sweep")) {
                const auto& s = j.at("sweep");
                detail::reject_unknown(s, {"prefix_lengths"}, "sweep config");
                detail::read_field(s, "prefix_lengths", c.sweep.prefix_lengths);
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("invalid config value: ") + e.what());
        }
        return c;
    }
};

// Identity hash over the experiment-defining fields. The output directory is
// deliberately excluded: relocating results must not change what experiment
// they describe.
inline std::string config_sha256(const ExperimentConfig& cfg) {
    nlohmann::json j = cfg.to_json();
    j.erase("output_dir");
    Sha256 h;
    const std::string dump = j.dump();
    h.update(dump.data(), dump.size());
    return h.hex_digest();
}

inline std::string resolve_output_dir(const std::optional<std::string>& cli_value,
                                      const std::string& file_value) {
    if (cli_value && !cli_value->empty()) return *cli_value;
    if (!file_value.empty()) return file_value;
    if (const char* env = std::getenv(kOutputEnvVar); env != nullptr && *env != '\0') return env;
    return "davqa-out";
}

// Builds the effective config: defaults, overlaid by the optional JSON file,
// with the output root resolved flag > file > environment > "davqa-out".
inline ExperimentConfig load_config(const std::optional<std::string>& config_path,
                                    const std::optional<std::string>& cli_output_dir) {
    ExperimentConfig cfg;
    if (config_path) {
        std::ifstream in(*config_path);
        if (!in) throw FileError("cannot open config file: " + *config_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("config file " + *config_path + " is not valid JSON: " + e.what());
        }
        cfg = ExperimentConfig::from_json(j);
    }
    cfg.output_dir = resolve_output_dir(cli_output_dir, cfg.output_dir);
    cfg.validate();
    return cfg;
}

// ---- workspace layout ----

struct ExperimentPaths {
    std::filesystem::path root;

    explicit ExperimentPaths(std::filesystem::path r) : root(std::move(r)) {}

    std::filesystem::path data() const { return root / "data"; }
    std::filesystem::path data_manifest() const { return data() / "manifest.json"; }
    std::filesystem::path checkpoints() const { return root / "checkpoints"; }
    std::filesystem::path backbone_ckpt() const { return checkpoints() / "backbone.ckpt"; }
    std::filesystem::path classifier_ckpt() const { return checkpoints() / "classifier.ckpt"; }
    std::filesystem::path adapters_dir() const { return checkpoints() / "adapters"; }
    std::filesystem::path adapter_ckpt(const std::string& domain) const {
        return adapters_dir() / (domain + ".ckpt");
    }
    std::filesystem::path registry_manifest() const { return checkpoints() / "registry.json"; }
    std::filesystem::path logs() const { return root / "logs"; }
    std::filesystem::path reports() const { return root / "reports"; }
    std::filesystem::path report_json(const std::string& name) const {
        return reports() / (name + ".json");
    }
    std::filesystem::path report_text(const std::string& name) const {
        return reports() / (name + ".txt");
    }
};

// ---- artifact loading with actionable errors ----

// Missing prerequisites always name the command that builds them.
inline void require_artifact(const std::filesystem::path& path, const std::string& build_command) {
    if (!std::filesystem::exists(path)) {
        throw FileError("missing artifact " + path.string() + "; run: davqa " + build_command);
    }
}

struct LoadedSuite {
    Dataset ds;
    std::string manifest_sha256;
};

// Loads the generated dataset, verifying both that the files still match the
// manifest hashes and that the manifest matches the active config.
inline LoadedSuite load_suite(const ExperimentConfig& cfg, const ExperimentPaths& paths) {
    require_artifact(paths.data_manifest(), "gen-data");
    std::ifstream in(paths.data_manifest());
    if (!in) throw FileError("cannot open dataset manifest: " + paths.data_manifest().string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("dataset manifest is not valid JSON: " + std::string(e.what()));
    }
    const auto seed = manifest.value("master_seed", std::uint64_t{0});
    const auto n = manifest.value("n_per_domain", std::size_t{0});
    if (seed != cfg.master_seed || n != cfg.n_per_domain) {
        throw ConfigError("dataset at " + paths.data().string() + " was generated with master_seed=" +
                          std::to_string(seed) + ", n_per_domain=" + std::to_string(n) +
                          " but the config says master_seed=" + std::to_string(cfg.master_seed) +
                          ", n_per_domain=" + std::to_string(cfg.n_per_domain) +
                          "; re-run: davqa gen-data");
    }
    for (const auto& [file, want] : manifest.at("files").items()) {
        const std::string have = file_sha256(paths.data() / file);
        if (have != want.get<std::string>()) {
            throw FormatError("dataset file " + file + " does not match its manifest hash; re-run: "
                              "davqa gen-data");
        }
    }
    LoadedSuite out;
    out.ds.train = import_dataset(paths.data() / "train.jsonl");
    out.ds.val = import_dataset(paths.data() / "val.jsonl");
    out.ds.test = import_dataset(paths.data() / "test.jsonl");
    out.ds.master_seed = seed;
    out.ds.n_per_domain = n;
    out.manifest_sha256 = file_sha256(paths.data_manifest());
    return out;
}

inline Backbone load_backbone_artifact(const ExperimentConfig& cfg, const ExperimentPaths& paths) {
    require_artifact(paths.backbone_ckpt(), "pretrain");
    Backbone model = load_backbone(paths.backbone_ckpt());
    if (backbone_config_to_json(model.config()) != backbone_config_to_json(cfg.backbone)) {
        throw ConfigError("backbone checkpoint at " + paths.backbone_ckpt().string() +
                          " was built with a different backbone configuration; re-run: davqa pretrain");
    }
    return model;
}

inline DomainClassifier load_classifier_artifact(const ExperimentPaths& paths) {
    require_artifact(paths.classifier_ckpt(), "train-classifier");
    return DomainClassifier::load(paths.classifier_ckpt());
}

inline std::map<std::string, std::vector<double>> load_prototypes_artifact(
    const ExperimentPaths& paths) {
    require_artifact(paths.registry_manifest(), "train-classifier");
    return RegistryManifest::load(paths.registry_manifest()).prototypes;
}

// Adapters found on disk, minus explicit exclusions (leave-one-out runs).
inline AdapterRegistry load_registry_artifact(const ExperimentPaths& paths, const BackboneConfig& bb,
                                              const std::vector<std::string>& exclude = {}) {
    AdapterRegistry registry(bb);
    std::vector<std::filesystem::path> files;
    if (std::filesystem::exists(paths.adapters_dir())) {
        for (const auto& entry : std::filesystem::directory_iterator(paths.adapters_dir())) {
            if (entry.path().extension() == ".ckpt") files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        AdapterPair pair = AdapterPair::load(f, bb);
        if (std::find(exclude.begin(), exclude.end(), pair.domain()) != exclude.end()) continue;
        registry.add(std::move(pair));
    }
    if (registry.size() == 0) {
        throw FileError("no usable adapter checkpoints under " + paths.adapters_dir().string() +
                        "; run: davqa train-adapters --domain all");
    }
    return registry;
}

// ---- sample selection helpers ----

inline std::vector<VqaSample> filter_domain(const std::vector<VqaSample>& samples,
                                            const std::string& domain) {
    std::vector<VqaSample> out;
    for (const VqaSample& s : samples)
        if (s.domain == domain) out.push_back(s);
    return out;
}

// First n samples of every domain in encounter order; n == 0 keeps everything.
inline std::vector<VqaSample> take_per_domain(const std::vector<VqaSample>& samples, std::size_t n) {
    if (n == 0) return samples;
    std::map<std::string, std::size_t> taken;
    std::vector<VqaSample> out;
    for (const VqaSample& s : samples) {
        if (taken[s.domain] < n) {
            out.push_back(s);
            ++taken[s.domain];
        }
    }
    return out;
}

// ---- report plumbing ----

struct ReportFooter {
    std::string build_id = kBuildId;
    std::uint64_t master_seed = 0;
    std::string config_hash;
    std::string dataset_manifest;                     // sha256 of data/manifest.json
    std::map<std::string, std::string> checkpoints;   // label -> file sha256

    nlohmann::json to_json() const {
        return {{"build_id", build_id},
                {"master_seed", master_seed},
                {"config_hash", config_hash},
                {"dataset_manifest", dataset_manifest},
                {"checkpoints", checkpoints}};
    }

    std::string text_line() const {
        std::string line = "build " + build_id + " | master seed " + std::to_string(master_seed) +
                           " | config " + config_hash.substr(0, 12);
        if (!dataset_manifest.empty()) line += " | data " + dataset_manifest.substr(0, 12);
        for (const auto& [label, sha] : checkpoints) line += " | " + label + " " + sha.substr(0, 12);
        return line;
    }
};

inline ReportFooter make_footer(const ExperimentConfig& cfg, const std::string& dataset_sha,
                                std::map<std::string, std::string> checkpoint_ids) {
    ReportFooter f;
    f.master_seed = cfg.master_seed;
    f.config_hash = config_sha256(cfg);
    f.dataset_manifest = dataset_sha;
    f.checkpoints = std::move(checkpoint_ids);
    return f;
}

inline std::map<std::string, std::string> checkpoint_ids(const ExperimentPaths& paths,
                                                         bool with_backbone, bool with_classifier,
                                                         const std::vector<std::string>& adapters) {
    std::map<std::string, std::string> ids;
    if (with_backbone) ids["backbone"] = file_sha256(paths.backbone_ckpt());
    if (with_classifier) ids["classifier"] = file_sha256(paths.classifier_ckpt());
    for (const std::string& d : adapters) ids["adapter/" + d] = file_sha256(paths.adapter_ckpt(d));
    return ids;
}

// Writes <name>.json and <name>.txt under reports/. Reports never contain
// wall-clock times or absolute paths, so a rerun with the same master seed is
// byte-identical; timing lives in logs/ instead.
inline void write_report(const ExperimentPaths& paths, const std::string& name, nlohmann::json body,
                         const ReportFooter& footer, const std::string& text) {
    std::filesystem::create_directories(paths.reports());
    body["footer"] = footer.to_json();
    {
        std::ofstream out(paths.report_json(name), std::ios::trunc);
        if (!out) throw FileError("cannot write report: " + paths.report_json(name).string());
        out << body.dump(2) << '\n';
    }
    {
        std::ofstream out(paths.report_text(name), std::ios::trunc);
        if (!out) throw FileError("cannot write report: " + paths.report_text(name).string());
        out << text;
        if (!text.empty() && text.back() != '\n') out << '\n';
        out << footer.text_line() << '\n';
    }
}

namespace detail {

inline std::string fmt2(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string fmt2_signed(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%+.2f", v);
    return buf;
}

// points = percentage scale used in all text tables
inline double pts(double fraction) { return fraction * 100.0; }

inline std::string render_grid(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> widths;
    for (const auto& row : rows) {
        if (widths.size() < row.size()) widths.resize(row.size(), 0);
        for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
    }
    std::string out;
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            std::string cell = row[c];
            cell.resize(widths[c], ' ');
            out += cell;
            if (c + 1 < row.size()) out += "  ";
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += '\n';
    }
    return out;
}

inline std::vector<std::string> sorted_domains(const EvalReport& rep) {
    std::vector<std::string> names;
    for (const auto& [name, row] : rep.per_domain) names.push_back(name);
    return names;  // std::map iteration is already sorted
}

// Mean of metric rows field-by-field; counts must agree.
inline MetricRow average_rows(const std::vector<MetricRow>& rows) {
    if (rows.empty()) throw ContractError("cannot average zero metric rows");
    MetricRow out;
    for (const MetricRow& r : rows) {
        out.accuracy += r.accuracy;
        out.vqa += r.vqa;
        out.bleu += r.bleu;
        out.rouge_l += r.rouge_l;
        out.meteor += r.meteor;
    }
    const double n = static_cast<double>(rows.size());
    out.accuracy /= n;
    out.vqa /= n;
    out.bleu /= n;
    out.rouge_l /= n;
    out.meteor /= n;
    out.count = rows.front().count;
    return out;
}

inline EvalReport average_reports(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw ContractError("cannot average zero reports");
    EvalReport out;
    for (const auto& [name, row] : reports.front().per_domain) {
        std::vector<MetricRow> rows;
        for (const EvalReport& r : reports) rows.push_back(r.per_domain.at(name));
        out.per_domain[name] = average_rows(rows);
    }
    std::vector<MetricRow> overall;
    for (const EvalReport& r : reports) overall.push_back(r.overall);
    out.overall = average_rows(overall);
    out.config_echo = reports.front().config_echo;
    out.config_echo["draws"] = reports.size();
    return out;
}

// One text-table row of per-domain accuracies plus the overall mean, in
// points; an optional reference report adds signed drops in parentheses.
inline std::vector<std::string> accuracy_cells(const std::string& label, const EvalReport& rep,
                                               const std::vector<std::string>& domains,
                                               const EvalReport* reference = nullptr) {
    std::vector<std::string> row{label};
    for (const std::string& d : domains) {
        std::string cell = fmt2(pts(rep.per_domain.at(d).accuracy));
        if (reference) {
            cell += " (" +
                    fmt2_signed(pts(rep.per_domain.at(d).accuracy - reference->per_domain.at(d).accuracy)) +
                    ")";
        }
        row.push_back(cell);
    }
    std::string mean = fmt2(pts(rep.overall.accuracy));
    if (reference) {
        mean += " (" + fmt2_signed(pts(rep.overall.accuracy - reference->overall.accuracy)) + ")";
    }
    row.push_back(mean);
    return row;
}

}  // namespace detail

// ---- hook-free inline build ----

// Replays adapter-conditioned greedy generation with the adapter arithmetic
// written directly into the call sequence instead of routed through the hook
// engine. Injection is additive and both builds share encode_vision_with, so
// the outputs are bit-identical to the hooked build for identical weights.
inline TokenSeq generate_inline(const Backbone& model, const AdapterPair& pair, const Image& image,
                                const TokenSeq& question, int end_token) {
    if (question.empty()) throw ContractError("generate_inline requires a nonempty question");
    NoGradGuard no_grad;
    const Tensor z = model.encode_vision_with(
        model.embed_patches(image), [&pair](std::size_t l, Tensor h) {
            return pair.has_layer(l) ? add(h, pair.visual_delta(l, h)) : h;
        });
    const Tensor visual = model.project_visual(z);
    TokenSeq ids = question;
    TokenSeq answer;
    for (std::size_t step = 0; step < model.config().max_answer_len; ++step) {
        Tensor text = model.embed_tokens(ids);
        if (pair.config().prefix_len > 0) text = concat_rows({pair.prefix(), text});
        Tensor logits = model.forward_logits(visual, text);
        const int next = static_cast<int>(argmax_row(logits, logits.rows() - 1));
        if (next == end_token) break;
        answer.push_back(next);
        ids.push_back(next);
    }
    return answer;
}

// Hard-routing evaluation via the inline build; routing decisions mirror
// evaluate()'s hard policy exactly (argmax over the registry's domains).
inline EvalReport evaluate_inline_hard(const Backbone& model, const AdapterRegistry& registry,
                                       const DomainClassifier& classifier,
                                       const std::vector<VqaSample>& samples,
                                       std::vector<TokenSeq>* out_predictions = nullptr) {
    const std::vector<std::string> available = registry.names();
    if (available.empty()) throw ContractError("inline evaluation needs a non-empty adapter registry");
    std::vector<TokenSeq> preds(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const VqaSample& s = samples[i];
        const std::vector<double> probs = classifier.classify(s.image);
        double best = -1.0;
        std::size_t best_idx = 0;
        for (std::size_t k = 0; k < available.size(); ++k) {
            const double p = probs[classifier.domain_index(available[k])];
            if (p > best) {
                best = p;
                best_idx = k;
            }
        }
        preds[i] = generate_inline(model, registry.at(available[best_idx]), s.image, s.question,
                                   vocab::end);
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
    report.config_echo = {{"policy", "hard"}, {"mechanism", "inline"}, {"samples", samples.size()}};
    return report;
}

// ---- sweep presets ----

// Named injection-layer presets scaled to the backbone depth. At the default
// 12-layer depth these are early {2,4}, mid {4,8}, late {10,12}, all {1..12}.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> layer_sweep_presets(
    std::size_t vision_layers) {
    const double L = static_cast<double>(vision_layers);
    auto at = [&](double fraction) {
        auto l = static_cast<std::size_t>(std::llround(fraction * L));
        return std::clamp<std::size_t>(l, 1, vision_layers);
    };
    auto dedupe = [](std::vector<std::size_t> v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    };
    std::vector<std::size_t> all(vision_layers);
    for (std::size_t i = 0; i < vision_layers; ++i) all[i] = i + 1;
    return {{"early", dedupe({at(1.0 / 6.0), at(1.0 / 3.0)})},
            {"mid", dedupe({at(1.0 / 3.0), at(2.0 / 3.0)})},
            {"late", dedupe({at(5.0 / 6.0), at(1.0)})},
            {"all", all}};
}

// ---- experiment commands ----
// Each command reads and writes only through the workspace directory, so the
// CLI verbs and in-process callers behave identically.

inline nlohmann::json cmd_gen_data(const ExperimentConfig& cfg) {
    const ExperimentPaths paths(cfg.output_dir);
    const Dataset ds =
        gen_dataset(DomainSpec::builtin(), cfg.n_per_domain, {0.8, 0.1, 0.1}, cfg.master_seed);
    const std::filesystem::path manifest = export_suite(ds, paths.data());
    return {{"verb", "gen-data"},
            {"data_dir", paths.data().string()},
            {"counts",
             {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}}},
            {"manifest_sha256", file_sha256(manifest)}};
}

inline nlohmann::json cmd_pretrain(const ExperimentConfig& cfg) {
    const ExperimentPaths paths(cfg.output_dir);
    const LoadedSuite suite = load_suite(cfg, paths);
    Backbone model(cfg.backbone, mix_seed(cfg.master_seed, "backbone"));
    const std::vector<VqaSample> train = take_per_domain(suite.ds.train, cfg.pretrain.per_domain);
    const std::vector<VqaSample> val = take_per_domain(suite.ds.val, cfg.pretrain.val_per_domain);
    PretrainConfig pcfg;
    pcfg.epochs = cfg.pretrain.epochs;
    pcfg.learning_rate = cfg.pretrain.learning_rate;
    pcfg.batch_size = cfg.pretrain.batch_size;
    pcfg.seed = mix_seed(cfg.master_seed, "pretrain");
    const TrainLog log = pretrain_backbone(model, train, val, pcfg);
    log.save_jsonl(paths.logs() / "pretrain.jsonl");
    save_backbone(model, paths.backbone_ckpt());
    return {{"verb", "pretrain"},
            {"train_samples", train.size()},
            {"epochs", log.epochs.size()},
            {"initial_val_accuracy", log.initial_val_metric},
            {"final_val_accuracy", log.epochs.empty() ? 0.0 : log.epochs.back().val_metric},
            {"frozen_checksum", log.frozen_checksums.at("backbone")},
            {"checkpoint", paths.backbone_ckpt().string()},
            {"checkpoint_sha256", file_sha256(paths.backbone_ckpt())}};
}

inline nlohmann::json cmd_train_classifier(const ExperimentConfig& cfg) {
    const ExperimentPaths paths(cfg.output_dir);
    const LoadedSuite suite = load_suite(cfg, paths);
    TrainClassifierOptions opts;
    opts.epochs = cfg.classifier.epochs;
    opts.lr = cfg.classifier.learning_rate;
    opts.batch_size = cfg.classifier.batch_size;
    opts.hidden = cfg.classifier.hidden;
    opts.seed = mix_seed(cfg.master_seed, "classifier");
    std::vector<double> epoch_losses;
    const DomainClassifier clf = train_classifier(suite.ds.train, opts, &epoch_losses);
    const double held_out = classifier_accuracy(clf, suite.ds.val);
    clf.save(paths.classifier_ckpt());

    {
        std::filesystem::create_directories(paths.logs());
        std::ofstream out(paths.logs() / "classifier.jsonl", std::ios::trunc);
        if (!out) throw FileError("cannot write classifier log");
        for (std::size_t e = 0; e < epoch_losses.size(); ++e) {
            out << nlohmann::json{{"event", "epoch"}, {"epoch", e + 1}, {"train_loss", epoch_losses[e]}}
                       .dump()
                << '\n';
        }
        out << nlohmann::json{{"event", "summary"}, {"held_out_accuracy", held_out}}.dump() << '\n';
    }

    RegistryManifest manifest;
    manifest.domains = clf.config().domains;
    manifest.classifier_path = "checkpoints/classifier.ckpt";
    if (std::filesystem::exists(paths.adapters_dir())) {
        for (const auto& entry : std::filesystem::directory_iterator(paths.adapters_dir())) {
            if (entry.path().extension() == ".ckpt") {
                manifest.adapter_paths[entry.path().stem().string()] =
                    "checkpoints/adapters/" + entry.path().filename().string();
            }
        }
    }
    manifest.prototypes = compute_prototypes(clf, suite.ds.train);
    manifest.save(paths.registry_manifest());

    return {{"verb", "train-classifier"},
            {"domains", clf.config().domains},
            {"train_samples", suite.ds.train.size()},
            {"held_out_accuracy", held_out},
            {"checkpoint", paths.classifier_ckpt().string()},
            {"checkpoint_sha256", file_sha256(paths.classifier_ckpt())}};
}

inline nlohmann::json cmd_train_adapters(const ExperimentConfig& cfg, const std::string& domain_arg) {
    const ExperimentPaths paths(cfg.output_dir);
    const LoadedSuite suite = load_suite(cfg, paths);
    Backbone model = load_backbone_artifact(cfg, paths);

    std::vector<std::string> domains;
    if (domain_arg == "all") {
        for (const DomainSpec& s : DomainSpec::builtin()) domains.push_back(s.name);
        std::sort(domains.begin(), domains.end());
    } else {
        DomainSpec::by_name(domain_arg);  // validates the name
        domains.push_back(domain_arg);
    }

    nlohmann::json per_domain = nlohmann::json::object();
    for (const std::string& d : domains) {
        const std::vector<VqaSample> train = filter_domain(suite.ds.train, d);
        const std::vector<VqaSample> val = filter_domain(suite.ds.val, d);
        TrainConfig tcfg;
        tcfg.learning_rate = cfg.adapter.learning_rate;
        tcfg.batch_size = cfg.adapter.batch_size;
        tcfg.max_epochs = cfg.adapter.max_epochs;
        tcfg.patience = cfg.adapter.patience;
        tcfg.eval_metric = default_metric_for(train);
        tcfg.seed = mix_seed(cfg.master_seed, "adapters");
        AdapterTrainResult result = train_adapter_pair(model, train, val, cfg.adapter_config(), tcfg);
        result.log.save_jsonl(paths.logs() / ("adapter_" + d + ".jsonl"));
        result.pair.save(paths.adapter_ckpt(d));
        double best_val = result.log.initial_val_metric;
        for (const EpochEntry& e : result.log.epochs) best_val = std::max(best_val, e.val_metric);
        per_domain[d] = {{"epochs_run", result.log.epochs.size()},
                         {"best_epoch", result.log.best_epoch},
                         {"best_val_metric", best_val},
                         {"eval_metric", metric_name(tcfg.eval_metric)},
                         {"stopping_reason", result.log.stopping_reason},
                         {"checkpoint_sha256", file_sha256(paths.adapter_ckpt(d))}};
    }

    // keep the registry manifest's adapter index current if one exists
    if (std::filesystem::exists(paths.registry_manifest())) {
        RegistryManifest manifest = RegistryManifest::load(paths.registry_manifest());
        for (const std::string& d : domains) {
            manifest.adapter_paths[d] = "checkpoints/adapters/" + d + ".ckpt";
        }
        manifest.save(paths.registry_manifest());
    }

    return {{"verb", "train-adapters"}, {"domains", domains}, {"results", per_domain}};
}

// Shared frozen-vs-routed comparison: the "main result" is this command with
// the hard policy. Reports land in reports/eval_<policy>.{json,txt}.
inline nlohmann::json cmd_eval(const ExperimentConfig& cfg, const std::string& policy_name) {
    const ExperimentPaths paths(cfg.output_dir);
    const LoadedSuite suite = load_suite(cfg, paths);
    Backbone model = load_backbone_artifact(cfg, paths);
    const AdapterRegistry registry = load_registry_artifact(paths, cfg.backbone);

    EvalPolicy policy;
    std::optional<DomainClassifier> classifier;
    std::map<std::string, std::vector<double>> prototypes;
    if (policy_name == "hard") {
        policy = EvalPolicy::hard();
        classifier.emplace(load_classifier_artifact(paths));
    } else if (policy_name == "soft") {
        policy = EvalPolicy::soft(cfg.routing.temperature);
        classifier.emplace(load_classifier_artifact(paths));
        prototypes = load_prototypes_artifact(paths);
    } else if (policy_name == "random") {
        policy = EvalPolicy::random(mix_seed(cfg.master_seed, "eval-random"));
    } else if (policy_name == "oracle") {
        policy = EvalPolicy::oracle();
    } else {
        throw ConfigError("unknown eval policy '" + policy_name +
                          "' (expected hard|soft|random|oracle)");
    }

    const EvalReport frozen =
        evaluate(model, nullptr, nullptr, nullptr, suite.ds.test, EvalPolicy::frozen());
    std::vector<RoutingDecision> decisions;
    const EvalReport routed =
        evaluate(model, &registry, classifier ? &*classifier : nullptr,
                 prototypes.empty() ? nullptr : &prototypes, suite.ds.test, policy, &decisions);

    const std::vector<std::string> domains = detail::sorted_domains(routed);
    nlohmann::json improvement = nlohmann::json::object();
    bool improves_everywhere = true;
    for (const std::string& d : domains) {
        const double delta =
            detail::pts(routed.per_domain.at(d).accuracy - frozen.per_domain.at(d).accuracy);
        improvement[d] = delta;
        improves_everywhere = improves_everywhere && delta > 0.0;
    }
    const double mean_improvement = detail::pts(routed.overall.accuracy - frozen.overall.accuracy);

    nlohmann::json routing_counts = nlohmann::json::object();
    const std::vector<std::string> available = registry.names();
    for (const RoutingDecision& dec : decisions) {
        const std::string& name = available.at(dec.selected);
        routing_counts[name] = routing_counts.value(name, 0) + 1;
    }

    nlohmann::json body;
    body["experiment"] = "eval";
    body["policy"] = policy_name;
    body["baseline"] = report_to_json(frozen);
    body["routed"] = report_to_json(routed);
    body["improvement"] = {{"per_domain_points", improvement}, {"mean_points", mean_improvement}};
    body["checks"] = {{"routed_beats_baseline_on_every_domain", improves_everywhere},
                      {"mean_improvement_points", mean_improvement}};
    body["routing_counts"] = routing_counts;

    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{"system"};
    header.insert(header.end(), domains.begin(), domains.end());
    header.push_back("mean");
    grid.push_back(header);
    grid.push_back(detail::accuracy_cells("frozen baseline", frozen, domains));
    grid.push_back(detail::accuracy_cells("adapted (" + policy_name + " routing)", routed, domains,
                                          &frozen));
    std::string text = "frozen baseline vs adapted model, accuracy in points (x100)\n" +
                       detail::render_grid(grid) + "mean improvement: " +
                       detail::fmt2_signed(mean_improvement) + " points\n\nfull metric grids\n" +
                       "-- frozen baseline --\n" + report_to_table(frozen) +
                       "-- adapted (" + policy_name + " routing) --\n" + report_to_table(routed);

    write_report(paths, "eval_" + policy_name, body, make_footer(cfg, suite.manifest_sha256,
                 checkpoint_ids(paths, true, classifier.has_value(), available)), text);
    return {{"verb", "eval"},
            {"policy", policy_name},
            {"report", paths.report_json("eval_" + policy_name).string()},
            {"mean_improvement_points", mean_improvement}};
}

inline nlohmann::json cmd_ablate(const ExperimentConfig& cfg) {
    const ExperimentPaths paths(cfg.output_dir);
    const LoadedSuite suite = load_suite(cfg, paths);
    Backbone model = load_backbone_artifact(cfg, paths);
    const AdapterRegistry registry = load_registry_artifact(paths, cfg.backbone);
    const DomainClassifier classifier = load_classifier_artifact(paths);
    const std::vector<std::string> available = registry.names();
    const std::vector<VqaSample>& test = suite.ds.test;

    std::vector<TokenSeq> preds_full;
    const EvalReport full = evaluate(model, &registry, &classifier, nullptr, test,
                                     EvalPolicy::hard(), nullptr, &preds_full);

    EvalPolicy wo_prompt_policy = EvalPolicy::hard();
    wo_prompt_policy.use_prompt = false;
    const EvalReport wo_prompt =
        evaluate(model, &registry, &classifier, nullptr, test, wo_prompt_policy);

    EvalPolicy wo_visual_policy = EvalPolicy::hard();
    wo_visual_policy.use_visual = false;
    const EvalReport wo_visual =
        evaluate(model, &registry, &classifier, nullptr, test, wo_visual_policy);

    // Without the domain classifier every input flows through one fixed
    // default adapter; the routing log proves exactly one pair was used.
    const std::string fixed_domain = available.front();
    std::vector<RoutingDecision> fixed_decisions;
    const EvalReport wo_classifier = evaluate(model, &registry, nullptr, nullptr, test,
                                              EvalPolicy::fixed(fixed_domain), &fixed_decisions);
    bool single_adapter = !fixed_decisions.empty();
    for (const RoutingDecision& d : fixed_decisions) {
        single_adapter = single_adapter && available.at(d.selected) == fixed_domain;
    }

    std::vector<TokenSeq> preds_inline;
    const EvalReport wo_hooks =
        evaluate_inline_hard(model, registry, classifier, test, &preds_inline);
    const bool bit_identical = preds_full == preds_inline;

    const std::string footnote =
        "w/o hook injection rebuilds the adapted forward pass inline, without the hook engine. "
        "Because injection is an exact additive mechanism and both builds share the same operation "
        "sequence, the row matches the full system bit for bit (drop 0.00). Reimplementation-style "
        "baselines in the literature often lose a small margin (around one point) to operator-order "
        "drift; that drift cannot occur here by construction.";

    const std::vector<std::string> domains = detail::sorted_domains(full);
    struct Variant {
        std::string key;
        std::string display;
        const EvalReport* report;
    };
    const std::vector<Variant> variants{{"full", "full", &full},
                                        {"wo_prompt_adapter", "w/o prompt adapter", &wo_prompt},
                                        {"wo_visual_adapter", "w/o visual adapter", &wo_visual},
                                        {"wo_domain_classifier", "w/o domain classifier", &wo_classifier},
                                        {"wo_hook_injection", "w/o hook injection", &wo_hooks}};

    nlohmann::json variants_json = nlohmann::json::object();
    nlohmann::json drops_json = nlohmann::json::object();
    double prompt_max_drop = 0.0, visual_max_drop = 0.0;
    for (const Variant& v : variants) {
        variants_json[v.key] = {{"display", v.display}, {"report", report_to_json(*v.report)}};
        nlohmann::json drop = nlohmann::json::object();
        for (const std::string& d : domains) {
            drop[d] = detail::pts(full.per_domain.at(d).accuracy - v.report->per_domain.at(d).accuracy);
        }
        drop["mean"] = detail::pts(full.overall.accuracy - v.report->overall.accuracy);
        drops_json[v.key] = drop;
        for (const std::string& d : domains) {
            const double dd = drops_json[v.key][d].get<double>();
            if (v.key == "wo_prompt_adapter") prompt_max_drop = std::max(prompt_max_drop, dd);
            if (v.key == "wo_visual_adapter") visual_max_drop = std::max(visual_max_drop, dd);
        }
    }
    const double classifier_mean_drop = drops_json["wo_domain_classifier"]["mean"].get<double>();

    nlohmann::json body;
    body["experiment"] = "ablation";
    body["fixed_domain"] = fixed_domain;
    body["variants"] = variants_json;
    body["drops_points"] = drops_json;
    body["checks"] = {{"prompt_removal_max_drop_points", prompt_max_drop},
                      {"visual_removal_max_drop_points", visual_max_drop},
                      {"classifier_removal_mean_drop_points", classifier_mean_drop},
                      {"fixed_adapter_used_for_all_inputs", single_adapter},
                      {"inline_build_bit_identical", bit_identical}};
    body["footnote"] = footnote;

    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{"variant"};
    header.insert(header.end(), domains.begin(), domains.end());
    header.push_back("mean");
    grid.push_back(header);
    for (const Variant& v : variants) {
        grid.push_back(detail::accuracy_cells(v.display, *v.report, domains,
                                              v.key == "full" ? nullptr : &full));
    }
    std::string text = "component removal study, accuracy in points (change vs full in parentheses)\n" +
                       detail::render_grid(grid) + "\nnote: " + footnote + "\n";

    write_report(paths, "ablation", body, make_footer(cfg, suite.manifest_sha256,
                 checkpoint_ids(paths, true, true, available)), text);
    return {{"verb", "ablate"},
            {"report", paths.report_json("ablation").string()},
            {"inline_build_bit_identical", bit_identical},
            {"fixed_adapter_used_for_all_inputs", single_adapter}};
}

inline nlohmann::json cmd_crossdomain(const ExperimentConfig& cfg) {
    const ExperimentPaths paths(cfg.output_dir);
    const LoadedSuite suite = load_suite(cfg, paths);
    Backbone model = load_backbone_artifact(cfg, paths);
    const DomainClassifier classifier = load_classifier_artifact(paths);
    const std::map<std::string, std::vector<double>> prototypes = load_prototypes_artifact(paths);

    // in-training reference: the hard-routing scores of the main comparison
    require_artifact(paths.report_json("eval_hard"), "eval --policy hard");
    nlohmann::json main_report;
    {
        std::ifstream in(paths.report_json("eval_hard"));
        if (!in) throw FileError("cannot open " + paths.report_json("eval_hard").string());
        try {
            in >> main_report;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("main report is not valid JSON: " + std::string(e.what()));
        }
    }

    // the full registry must cover every domain before a leave-one-out run
    const AdapterRegistry full_registry = load_registry_artifact(paths, cfg.backbone);
    std::vector<std::string> domains;
    for (const DomainSpec& s : DomainSpec::builtin()) domains.push_back(s.name);
    std::sort(domains.begin(), domains.end());
    for (const std::string& d : domains) {
        if (!full_registry.contains(d)) {
            throw FileError("leave-one-out needs an adapter for every domain but '" + d +
                            "' is missing; run: davqa train-adapters --domain all");
        }
    }

    nlohmann::json runs = nlohmann::json::object();
    nlohmann::json checks = nlohmann::json::object();
    std::map<std::string, double> soft_scores, misroute_scores, random_baselines, in_training;
    bool all_above_random = true, all_below_in_training = true;
    for (const std::string& held_out : domains) {
        const AdapterRegistry registry = load_registry_artifact(paths, cfg.backbone, {held_out});
        const std::vector<VqaSample> test_h = filter_domain(suite.ds.test, held_out);
        const EvalReport soft = evaluate(model, &registry, &classifier, &prototypes, test_h,
                                         EvalPolicy::soft(cfg.routing.temperature));
        const EvalReport misroute =
            evaluate(model, &registry, &classifier, nullptr, test_h, EvalPolicy::hard());

        const double baseline = 1.0 / static_cast<double>(DomainSpec::by_name(held_out).answer_variants);
        const double reference =
            main_report.at("routed").at("per_domain").at(held_out).at("accuracy").get<double>();
        soft_scores[held_out] = soft.overall.accuracy;
        misroute_scores[held_out] = misroute.overall.accuracy;
        random_baselines[held_out] = baseline;
        in_training[held_out] = reference;

        const bool above = soft.overall.accuracy > baseline;
        const bool below = soft.overall.accuracy < reference;
        all_above_random = all_above_random && above;
        all_below_in_training = all_below_in_training && below;
        runs[held_out] = {{"excluded", held_out},
                          {"adapters_used", registry.names()},
                          {"soft", report_to_json(soft)},
                          {"hard_misroute", report_to_json(misroute)},
                          {"random_answer_baseline", baseline},
                          {"in_training_accuracy", reference}};
        checks[held_out] = {{"above_random_baseline", above}, {"below_in_training", below}};
    }

    nlohmann::json body;
    body["experiment"] = "crossdomain";
    body["runs_completed"] = domains.size();
    body["runs"] = runs;
    body["checks"] = checks;
    body["checks_overall"] = {{"all_above_random_baseline", all_above_random},
                              {"all_below_in_training", all_below_in_training}};
    body["serving_policy"] =
        "held-out domain served by soft routing over the three available adapters; the hard-misroute "
        "row shows the argmax-over-available alternative";

    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{"row"};
    header.insert(header.end(), domains.begin(), domains.end());
    grid.push_back(header);
    auto score_row = [&](const std::string& label, const std::map<std::string, double>& vals) {
        std::vector<std::string> row{label};
        for (const std::string& d : domains) row.push_back(detail::fmt2(detail::pts(vals.at(d))));
        return row;
    };
    grid.push_back(score_row("held-out (soft routing)", soft_scores));
    grid.push_back(score_row("held-out (hard misroute)", misroute_scores));
    grid.push_back(score_row("random-answer baseline", random_baselines));
    grid.push_back(score_row("in-training reference", in_training));
    const std::string text =
        "leave-one-out transfer: each column's domain was excluded from adapter training, accuracy "
        "in points\n" +
        detail::render_grid(grid);

    std::vector<std::string> all_adapters = full_registry.names();
    write_report(paths, "crossdomain", body, make_footer(cfg, suite.manifest_sha256,
                 checkpoint_ids(paths, true, true, all_adapters)), text);
    return {{"verb", "crossdomain"},
            {"report", paths.report_json("crossdomain").string()},
            {"all_above_random_baseline", all_above_random},
            {"all_below_in_training", all_below_in_training}};
}

inline nlohmann::json cmd_routing(const ExperimentConfig& cfg) {
    const ExperimentPaths paths(cfg.output_dir);
    const LoadedSuite suite = load_suite(cfg, paths);
    Backbone model = load_backbone_artifact(cfg, paths);
    const AdapterRegistry registry = load_registry_artifact(paths, cfg.backbone);
    const DomainClassifier classifier = load_classifier_artifact(paths);
    const std::map<std::string, std::vector<double>> prototypes = load_prototypes_artifact(paths);
    const std::vector<VqaSample>& test = suite.ds.test;
    const std::vector<std::string> available = registry.names();

    const EvalReport hard =
        evaluate(model, &registry, &classifier, nullptr, test, EvalPolicy::hard());
    const EvalReport soft = evaluate(model, &registry, &classifier, &prototypes, test,
                                     EvalPolicy::soft(cfg.routing.temperature));
    // temperature -> 0 turns the soft mix into a one-hot nearest-prototype pick
    const EvalReport soft_t0 =
        evaluate(model, &registry, &classifier, &prototypes, test, EvalPolicy::soft(1e-6));

    std::vector<EvalReport> draws;
    nlohmann::json draw_scores = nlohmann::json::array();
    for (std::size_t r = 0; r < cfg.routing.random_draws; ++r) {
        draws.push_back(evaluate(model, &registry, nullptr, nullptr, test,
                                 EvalPolicy::random(mix_seed(cfg.master_seed, {0xd7a3, r}))));
        draw_scores.push_back(draws.back().overall.accuracy);
    }
    const EvalReport random_mean = detail::average_reports(draws);

    // enumeration oracle: expected random score from the domain x adapter grid
    std::vector<std::string> domains;
    for (const auto& [name, row] : hard.per_domain) domains.push_back(name);
    nlohmann::json matrix = nlohmann::json::object();
    double expected_random = 0.0;
    std::size_t total_samples = 0;
    for (const std::string& d : domains) {
        const std::vector<VqaSample> test_d = filter_domain(test, d);
        nlohmann::json row = nlohmann::json::object();
        double mean_over_adapters = 0.0;
        for (const std::string& a : available) {
            const EvalReport fixed =
                evaluate(model, &registry, nullptr, nullptr, test_d, EvalPolicy::fixed(a));
            row[a] = fixed.overall.accuracy;
            mean_over_adapters += fixed.overall.accuracy;
        }
        mean_over_adapters /= static_cast<double>(available.size());
        matrix[d] = row;
        expected_random += mean_over_adapters * static_cast<double>(test_d.size());
        total_samples += test_d.size();
    }
    expected_random /= static_cast<double>(total_samples);

    const double hard_acc = hard.overall.accuracy;
    const double soft_acc = soft.overall.accuracy;
    const double random_acc = random_mean.overall.accuracy;
    const double soft_t0_gap = detail::pts(std::abs(hard_acc - soft_t0.overall.accuracy));
    const double random_gap = detail::pts(std::abs(random_acc - expected_random));

    nlohmann::json body;
    body["experiment"] = "routing";
    body["policies"] = {{"hard", report_to_json(hard)},
                        {"soft", report_to_json(soft)},
                        {"soft_t0", report_to_json(soft_t0)},
                        {"random", report_to_json(random_mean)}};
    body["random_draw_scores"] = draw_scores;
    body["enumeration"] = {{"matrix_accuracy", matrix}, {"expected_random_accuracy", expected_random}};
    body["checks"] = {{"hard_ge_soft", hard_acc >= soft_acc},
                      {"soft_ge_random", soft_acc >= random_acc},
                      {"hard_minus_random_points", detail::pts(hard_acc - random_acc)},
                      {"soft_t0_vs_hard_gap_points", soft_t0_gap},
                      {"random_vs_expected_gap_points", random_gap}};

    const std::vector<std::string> sorted = detail::sorted_domains(hard);
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{"policy"};
    header.insert(header.end(), sorted.begin(), sorted.end());
    header.push_back("mean");
    grid.push_back(header);
    grid.push_back(detail::accuracy_cells("hard (classifier argmax)", hard, sorted));
    grid.push_back(detail::accuracy_cells("soft (prototype mixture)", soft, sorted));
    grid.push_back(detail::accuracy_cells("soft, temperature->0", soft_t0, sorted));
    grid.push_back(detail::accuracy_cells(
        "random (mean of " + std::to_string(cfg.routing.random_draws) + " draws)", random_mean,
        sorted));
    std::string text = "routing policy comparison, accuracy in points\n" + detail::render_grid(grid);
    text += "\nexpected random score from the domain x adapter enumeration: " +
            detail::fmt2(detail::pts(expected_random)) + " (observed " +
            detail::fmt2(detail::pts(random_acc)) + ", gap " + detail::fmt2(random_gap) + ")\n";

    write_report(paths, "routing", body, make_footer(cfg, suite.manifest_sha256,
                 checkpoint_ids(paths, true, true, available)), text);
    return {{"verb", "routing"},
            {"report", paths.report_json("routing").string()},
            {"hard_minus_random_points", detail::pts(hard_acc - random_acc)},
            {"soft_t0_vs_hard_gap_points", soft_t0_gap},
            {"random_vs_expected_gap_points", random_gap}};
}

inline nlohmann::json cmd_sweep(const ExperimentConfig& cfg, const std::string& what) {
    if (what != "layers" && what != "prefix") {
        throw ConfigError("unknown sweep '" + what + "' (expected layers|prefix)");
    }
    const ExperimentPaths paths(cfg.output_dir);
    const LoadedSuite suite = load_suite(cfg, paths);
    Backbone model = load_backbone_artifact(cfg, paths);
    const DomainClassifier classifier = load_classifier_artifact(paths);

    struct Point {
        std::string label;
        AdapterConfig acfg;
    };
    std::vector<Point> points;
    if (what == "layers") {
        for (const auto& [label, layers] : layer_sweep_presets(cfg.backbone.vision_layers)) {
            AdapterConfig a = cfg.adapter_config();
            a.layers = layers;
            points.push_back({label, a});
        }
    } else {
        for (std::size_t l : cfg.sweep.prefix_lengths) {
            if (cfg.text_rows_needed(l) > cfg.backbone.max_text_len) {
                throw ConfigError("sweep prefix length " + std::to_string(l) +
                                  " cannot fit in max_text_len " +
                                  std::to_string(cfg.backbone.max_text_len));
            }
            AdapterConfig a = cfg.adapter_config();
            a.prefix_len = l;
            points.push_back({"l" + std::to_string(l), a});
        }
    }

    std::vector<std::string> domains;
    for (const DomainSpec& s : DomainSpec::builtin()) domains.push_back(s.name);
    std::sort(domains.begin(), domains.end());

    std::filesystem::create_directories(paths.logs());
    std::ofstream log(paths.logs() / ("sweep_" + what + ".jsonl"), std::ios::trunc);
    if (!log) throw FileError("cannot write sweep log");

    nlohmann::json points_json = nlohmann::json::object();
    std::vector<std::pair<std::string, EvalReport>> results;
    for (const Point& pt : points) {
        const auto t0 = std::chrono::steady_clock::now();
        AdapterRegistry registry(cfg.backbone);
        for (const std::string& d : domains) {
            const std::vector<VqaSample> train = filter_domain(suite.ds.train, d);
            const std::vector<VqaSample> val = filter_domain(suite.ds.val, d);
            TrainConfig tcfg;
            tcfg.learning_rate = cfg.adapter.learning_rate;
            tcfg.batch_size = cfg.adapter.batch_size;
            tcfg.max_epochs = cfg.adapter.max_epochs;
            tcfg.patience = cfg.adapter.patience;
            tcfg.eval_metric = default_metric_for(train);
            tcfg.seed = mix_seed(cfg.master_seed, "adapters");
            registry.add(train_adapter_pair(model, train, val, pt.acfg, tcfg).pair);
        }
        const EvalReport rep =
            evaluate(model, &registry, &classifier, nullptr, suite.ds.test, EvalPolicy::hard());
        results.emplace_back(pt.label, rep);

        nlohmann::json pj = {{"mean_accuracy", rep.overall.accuracy},
                             {"report", report_to_json(rep)}};
        if (what == "layers") pj["injection_layers"] = pt.acfg.layers;
        if (what == "prefix") pj["prefix_length"] = pt.acfg.prefix_len;
        points_json[pt.label] = pj;
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << nlohmann::json{{"event", "point"},
                              {"label", pt.label},
                              {"mean_accuracy", rep.overall.accuracy},
                              {"wall_seconds", wall}}
                   .dump()
            << '\n';
    }
    log << nlohmann::json{{"event", "summary"}, {"points", points.size()}}.dump() << '\n';

    nlohmann::json notes = nlohmann::json::object();
    if (what == "layers") {
        double mid = 0.0, late = 0.0;
        for (const auto& [label, rep] : results) {
            if (label == "mid") mid = rep.overall.accuracy;
            if (label == "late") late = rep.overall.accuracy;
        }
        notes["mid_accuracy"] = mid;
        notes["late_accuracy"] = late;
        notes["mid_ge_late"] = mid >= late;
        notes["expectation"] = "mid-depth injection is expected to score best among the presets";
    } else {
        double best = -1.0;
        std::string best_label;
        double l10 = -1.0;
        for (const auto& [label, rep] : results) {
            if (rep.overall.accuracy > best) {
                best = rep.overall.accuracy;
                best_label = label;
            }
            if (label == "l10") l10 = rep.overall.accuracy;
        }
        notes["best_point"] = best_label;
        notes["best_accuracy"] = best;
        if (l10 >= 0.0) {
            notes["l10_gap_points"] = detail::pts(best - l10);
            notes["l10_within_1_point_of_best"] = detail::pts(best - l10) <= 1.0;
        }
    }

    nlohmann::json body;
    body["experiment"] = "sweep_" + what;
    body["points"] = points_json;
    body["notes"] = notes;

    const std::vector<std::string> sorted = detail::sorted_domains(results.front().second);
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> header{"point"};
    header.insert(header.end(), sorted.begin(), sorted.end());
    header.push_back("mean");
    grid.push_back(header);
    for (const auto& [label, rep] : results) grid.push_back(detail::accuracy_cells(label, rep, sorted));
    std::string text = (what == "layers" ? std::string("injection-layer sweep")
                                         : std::string("prompt prefix-length sweep")) +
                       ", adapters retrained per point, accuracy in points\n" +
                       detail::render_grid(grid) + "\nnotes: " + notes.dump() + "\n";

    write_report(paths, "sweep_" + what, body, make_footer(cfg, suite.manifest_sha256,
                 checkpoint_ids(paths, true, true, {})), text);
    return {{"verb", "sweep"},
            {"what", what},
            {"points", points.size()},
            {"report", paths.report_json("sweep_" + what).string()}};
}

// Collates every report in the workspace into summary.{json,txt}.
inline nlohmann::json cmd_report(const ExperimentConfig& cfg) {
    const ExperimentPaths paths(cfg.output_dir);
    std::vector<std::filesystem::path> files;
    if (std::filesystem::exists(paths.reports())) {
        for (const auto& entry : std::filesystem::directory_iterator(paths.reports())) {
            if (entry.path().extension() == ".json" && entry.path().stem() != "summary") {
                files.push_back(entry.path());
            }
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw FileError("no reports under " + paths.reports().string() +
                        "; run: davqa eval --policy hard (or ablate, crossdomain, routing, sweep)");
    }

    nlohmann::json reports = nlohmann::json::object();
    std::string text;
    for (const auto& f : files) {
        std::ifstream in(f);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("report " + f.string() + " is not valid JSON: " + e.what());
        }
        reports[f.stem().string()] = std::move(j);
        const std::filesystem::path txt = f.parent_path() / (f.stem().string() + ".txt");
        text += "==== " + f.stem().string() + " ====\n";
        if (std::filesystem::exists(txt)) {
            std::ifstream tin(txt);
            text.append(std::istreambuf_iterator<char>(tin), std::istreambuf_iterator<char>());
        } else {
            text += "(no text rendering present)\n";
        }
        text += "\n";
    }

    nlohmann::json body;
    body["experiment"] = "summary";
    body["reports"] = std::move(reports);
    const ReportFooter footer = make_footer(cfg, "", {});
    write_report(paths, "summary", body, footer, text);
    return {{"verb", "report"},
            {"collated", files.size()},
            {"summary_json", paths.report_json("summary").string()},
            {"summary_text", paths.report_text("summary").string()}};
}

}  // namespace davqa
