// davqa — experiment harness for domain-adaptive visual question answering.
//
// Every verb works on one workspace directory (data/, checkpoints/, logs/,
// reports/). Verbs print a small JSON status object on success and exit 0; on
// failure they print a machine-readable error object to stderr and exit
// nonzero. All randomness derives from the single master seed, so a rerun of
// any verb with the same config is byte-identical in reports/.

#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "davqa/errors.hpp"
#include "davqa/experiments.hpp"

namespace {

struct CommonArgs {
    std::optional<std::string> config_path;
    std::optional<std::string> output_dir;
    std::optional<std::uint64_t> master_seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option_function<std::string>(
           "--config", [&args](const std::string& v) { args.config_path = v; },
           "JSON config file (defaults are used for anything unset)")
        ->check(CLI::ExistingFile);
    cmd->add_option_function<std::string>(
        "--out", [&args](const std::string& v) { args.output_dir = v; },
        "workspace directory (overrides config file and DAVQA_OUT)");
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&args](std::uint64_t v) { args.master_seed = v; },
        "master seed (overrides the config file)");
}

davqa::ExperimentConfig effective_config(const CommonArgs& args) {
    davqa::ExperimentConfig cfg = davqa::load_config(args.config_path, args.output_dir);
    if (args.master_seed) {
        cfg.master_seed = *args.master_seed;
        cfg.validate();
    }
    return cfg;
}

void print_status(const nlohmann::json& status) { std::cout << status.dump(2) << '\n'; }

void print_error(const std::string& type, const std::string& message) {
    nlohmann::json err = {{"error", {{"type", type}, {"message", message}}}};
    std::cerr << err.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"domain-adaptive VQA experiment harness"};
    app.require_subcommand(1);
    CommonArgs args;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the four-domain synthetic dataset");
    add_common(gen, args);

    CLI::App* pre = app.add_subcommand("pretrain", "train and freeze the backbone");
    add_common(pre, args);

    CLI::App* clf = app.add_subcommand(
        "train-classifier", "train the domain classifier and write the adapter registry manifest");
    add_common(clf, args);

    CLI::App* ada =
        app.add_subcommand("train-adapters", "train per-domain adapters against the frozen backbone");
    add_common(ada, args);
    std::string domain = "all";
    ada->add_option("--domain", domain, "domain name or 'all'")->capture_default_str();

    CLI::App* eva = app.add_subcommand(
        "eval", "compare the frozen baseline against the adapted model on the test split");
    add_common(eva, args);
    std::string policy = "hard";
    eva->add_option("--policy", policy, "routing policy: hard|soft|random|oracle")
        ->capture_default_str();

    CLI::App* abl = app.add_subcommand("ablate", "component-removal study over the adapted model");
    add_common(abl, args);

    CLI::App* cross = app.add_subcommand(
        "crossdomain", "leave-one-out transfer: serve each domain without its own adapter");
    add_common(cross, args);

    CLI::App* rout =
        app.add_subcommand("routing", "compare hard, soft, and random routing policies");
    add_common(rout, args);

    CLI::App* sweep = app.add_subcommand("sweep", "retrain adapters across a hyperparameter grid");
    add_common(sweep, args);
    std::string what;
    sweep->add_option("--what", what, "grid to sweep: layers|prefix")->required();

    CLI::App* rep = app.add_subcommand("report", "collate all reports into summary.{json,txt}");
    add_common(rep, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        print_error("UsageError", e.what());
        return 2;
    }

    try {
        const davqa::ExperimentConfig cfg = effective_config(args);
        if (gen->parsed()) {
            print_status(davqa::cmd_gen_data(cfg));
        } else if (pre->parsed()) {
            print_status(davqa::cmd_pretrain(cfg));
        } else if (clf->parsed()) {
            print_status(davqa::cmd_train_classifier(cfg));
        } else if (ada->parsed()) {
            print_status(davqa::cmd_train_adapters(cfg, domain));
        } else if (eva->parsed()) {
            print_status(davqa::cmd_eval(cfg, policy));
        } else if (abl->parsed()) {
            print_status(davqa::cmd_ablate(cfg));
        } else if (cross->parsed()) {
            print_status(davqa::cmd_crossdomain(cfg));
        } else if (rout->parsed()) {
            print_status(davqa::cmd_routing(cfg));
        } else if (sweep->parsed()) {
            print_status(davqa::cmd_sweep(cfg, what));
        } else if (rep->parsed()) {
            nlohmann::json status = davqa::cmd_report(cfg);
            print_status(status);
            // the collated text is the human-facing product; show it too
            const std::string txt = status.at("summary_text").get<std::string>();
            std::ifstream in(txt);
            if (in) std::cout << std::string(std::istreambuf_iterator<char>(in), {});
        }
        return 0;
    } catch (const davqa::Error& e) {
        print_error(e.kind(), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("InternalError", e.what());
        return 1;
    }
}
