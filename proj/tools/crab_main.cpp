// Experiment driver for the Crab federated-learning recovery toolkit.
//
//   crab run      --config cfg.json --out dir     full pipeline
//   crab train    --config cfg.json --out dir     Stage I only
//   crab recover  --out dir [--method m]          Stage II + III on artifacts
//   crab evaluate --out dir                       metrics + bound audit
//   crab inspect  --out dir                       dump the history manifest

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "crab/errors.hpp"
#include "crab/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitIo = 2;
constexpr int kExitContract = 3;

crab::ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
    nlohmann::json j = nlohmann::json::object();
    if (!path.empty()) j = crab::detail::read_json(path);
    crab::ExperimentConfig cfg = crab::parse_config(j);
    if (seed) cfg.master_seed = *seed;
    return cfg;
}

int inspect(const std::filesystem::path& out) {
    auto manifest = crab::detail::read_json(out / "history" / "manifest.json");
    std::cout << "format: " << manifest.at("format").get<std::string>() << '\n';
    std::cout << "arch: " << manifest.at("arch").dump() << '\n';
    const auto& cfg = manifest.at("config");
    std::cout << "alpha " << cfg.at("alpha") << "  lambda " << cfg.at("round_ratio") << "  delta "
              << cfg.at("client_ratio") << "  refset " << cfg.at("refset").at("labels").size()
              << " samples\n";
    std::size_t entries = 0;
    for (const auto& r : manifest.at("records")) {
        std::cout << "round " << r.at("round") << "  kl_score " << r.at("kl_score") << "  clients";
        for (const auto& c : r.at("clients")) std::cout << ' ' << c.at("id");
        std::cout << '\n';
        entries += r.at("clients").size();
    }
    std::cout << manifest.at("records").size() << " stored rounds, " << entries
              << " client entries\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Crab: selective-history federated learning recovery"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
    std::string method;
    bool quiet = false;

    for (const char* name : {"run", "train", "recover", "evaluate", "inspect"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "experiment config (JSON)");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed, "override master seed");
        if (std::string(name) == "recover")
            sub->add_option("--method", method, "run a single method: crab|retrain|federaser");
        sub->add_flag("--quiet", quiet, "suppress per-round logs");
    }

    CLI11_PARSE(app, argc, argv);
    const std::string cmd = app.get_subcommands().front()->get_name();
    std::ostream* log = quiet ? nullptr : &std::cerr;

    try {
        if (cmd == "inspect") return inspect(out_dir);
        if (cmd == "train") {
            crab::stage_train(load_config(config_path, seed), out_dir, log);
            return kExitOk;
        }
        if (cmd == "recover") {
            if (!method.empty()) {
                // narrow the stored config to one method for this invocation
                auto j = crab::detail::read_json(std::filesystem::path(out_dir) / "config.json");
                j["recovery"]["methods"] = {method};
                crab::detail::write_json(std::filesystem::path(out_dir) / "config.json", j);
            }
            crab::stage_recover(out_dir, log);
            return kExitOk;
        }
        if (cmd == "evaluate") {
            auto report = crab::stage_evaluate(out_dir);
            std::cout << report.dump(2) << '\n';
            return kExitOk;
        }
        // run
        auto report = crab::run_experiment(load_config(config_path, seed), out_dir, log);
        std::cout << report.dump(2) << '\n';
        return kExitOk;
    } catch (const crab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const crab::IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitContract;
    }
}
