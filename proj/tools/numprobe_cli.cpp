#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "numprobe/cli.hpp"

using namespace numprobe;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t jobs = 1;
    std::vector<std::string> sets;
    // flag name -> raw value, mapped onto config keys
    std::map<std::string, std::string> scalars;
    std::map<std::string, std::vector<std::string>> lists;
};

struct Flag {
    std::string name;  // without dashes; config key with '-' -> '_'
    bool list = false;
    std::string help;
};

void add_common(CLI::App* cmd, Common& c, const std::vector<Flag>& flags) {
    cmd->add_option("--config,-c", c.config, "JSON config file");
    cmd->add_option("--seed", c.seed, "Seed (overrides config)");
    cmd->add_option("--out,-o", c.out, "Output directory (overrides config)");
    cmd->add_option("--jobs,-j", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--set", c.sets, "Override a config key: path.to.key=value (JSON value)");
    for (const auto& f : flags) {
        if (f.list) {
            cmd->add_option("--" + f.name, c.lists[f.name], f.help);
        } else {
            cmd->add_option("--" + f.name, c.scalars[f.name], f.help);
        }
    }
}

nlohmann::json flag_value(const std::string& raw) {
    try {
        return nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        return raw;
    }
}

std::string key_of(std::string flag) {
    for (auto& ch : flag) {
        if (ch == '-') ch = '_';
    }
    return flag;
}

nlohmann::json build_config(const Common& c) {
    nlohmann::json cfg = c.config.empty() ? nlohmann::json::object() : load_config(c.config);
    for (const auto& [name, v] : c.scalars) {
        if (!v.empty()) {
            apply_override(cfg, key_of(name), flag_value(v));
        }
    }
    for (const auto& [name, v] : c.lists) {
        if (!v.empty()) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& e : v) {
                arr.push_back(flag_value(e));
            }
            apply_override(cfg, key_of(name), arr);
        }
    }
    for (const auto& s : c.sets) {
        const auto [k, v] = parse_assignment(s);
        apply_override(cfg, k, v);
    }
    if (c.seed) {
        cfg["seed"] = *c.seed;
    }
    if (!c.out.empty()) {
        cfg["out"] = c.out;
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Numeric-representation probing toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", numprobe_version);

    std::map<std::string, Common> commons;
    std::string selected;
    auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& command, const std::string& help,
                    const std::vector<Flag>& flags) {
        auto* cmd = parent->add_subcommand(name, help);
        add_common(cmd, commons[command], flags);
        cmd->callback([&selected, command] { selected = command; });
        return cmd;
    };

    const std::vector<Flag> layer_flags{{"dump", false, "Activation dump directory"},
                                        {"layers", true, "Layers to use"},
                                        {"kind", false, "Probe kind: sin, linear or mlp"}};
    leaf(&app, "train-toy", "train-toy", "Train the toy arithmetic model",
         {{"op", false, "Operation"}, {"templates", false, "Template directory for the vocabulary"}});
    leaf(&app, "dump-toy", "dump-toy", "Dump toy-model activations",
         {{"model", false, "Checkpoint directory"}, {"target", false, "operand1, operand2, result or embedding"},
          {"op", false, "Operation"}, {"n-prompts", false, "Number of prompts"}});
    auto* probe = app.add_subcommand("probe", "Probe training and evaluation");
    probe->require_subcommand(1);
    leaf(probe, "train", "probe-train", "Fit one probe per layer", layer_flags);
    leaf(probe, "eval", "probe-eval", "Evaluate a saved probe on a dump",
         {{"probe", false, "Probe directory"}, {"dump", false, "Dump directory"}, {"layer", false, "Layer"}});
    leaf(probe, "cross-layer", "probe-cross-layer", "Cross-layer probe generalization matrix", layer_flags);
    leaf(probe, "loo", "probe-loo", "Leave-one-layer-out probes", layer_flags);
    leaf(&app, "rsa", "rsa", "RSA between embedding tables",
         {{"tables", true, "NPAD matrices or embedding dumps"}, {"permutation-rounds", false, "Null rounds"}});
    leaf(&app, "fft-iou", "fft-iou", "Fourier top-k frequency agreement",
         {{"tables", true, "NPAD matrices or embedding dumps"},
          {"k", false, "Top-k frequencies (default 63)"},
          {"pca-dims", false, "PCA components"},
          {"k-max", false, "Largest k in the sweep"}});
    leaf(&app, "multitok", "multitok", "Multi-token number recovery",
         {{"model", false, "Checkpoint directory"}, {"layer", false, "Layer"}, {"offsets", true, "Offsets"}});
    auto* trace = app.add_subcommand("trace", "Per-layer error tracing");
    trace->require_subcommand(1);
    leaf(trace, "errors", "trace-errors", "Result probing and error aggregation",
         {{"model", false, "Checkpoint directory"}, {"probes", false, "Directory of per-layer probes"},
          {"op", false, "Operation"}});
    leaf(&app, "ablate", "ablate", "Skip layers and score the answer",
         {{"model", false, "Checkpoint directory"}, {"candidates", true, "Layers to skip"}, {"op", false, "Operation"}});

    std::string report_dir;
    auto* report = app.add_subcommand("report", "Re-render figures from a results directory");
    report->add_option("dir", report_dir, "Results directory")->required();
    report->callback([&] { selected = "report"; });

    std::string run_path;
    Common run_common;
    auto* run = app.add_subcommand("run", "Run the command named in a config file");
    run->add_option("config", run_path, "Config file")->required();
    run->add_option("--seed", run_common.seed, "Seed (overrides config)");
    run->add_option("--out,-o", run_common.out, "Output directory (overrides config)");
    run->add_option("--jobs,-j", run_common.jobs, "Worker threads")->check(CLI::PositiveNumber);
    run->add_option("--set", run_common.sets, "Override a config key");
    run->callback([&] { selected = "run"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (selected == "report") {
            for (const auto& f : render_report(report_dir)) {
                std::cout << (std::filesystem::path(report_dir) / f).string() << "\n";
            }
            return 0;
        }
        std::string command = selected;
        Common c;
        if (selected == "run") {
            c = run_common;
            c.config = run_path;
            const auto file = load_config(run_path);
            if (!file.is_object() || !file.contains("command") || !file["command"].is_string()) {
                throw ConfigError("/command: required key missing");
            }
            command = file["command"].get<std::string>();
        } else {
            c = commons.at(selected);
        }
        const auto doc = run_command(command, build_config(c), c.jobs);
        std::cout << doc.at("config").at("out").get<std::string>() << "/results.json\n";
        return 0;
    } catch (const Error& e) {
        std::cerr << "numprobe: " << e.what() << "\n";
        return exit_code(e);
    } catch (const std::exception& e) {
        std::cerr << "numprobe: " << e.what() << "\n";
        return 1;
    }
}
