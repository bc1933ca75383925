// modiad: deterministic simulator and solver suite for scheduled multi-class
// cross-modal anomaly detection over synthetic streams.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "modiad/cli.hpp"
#include "modiad/config.hpp"
#include "modiad/error.hpp"
#include "modiad/scheduler.hpp"

namespace {

modiad::RunConfig load_or_default(const std::string& config_path) {
    if (config_path.empty()) {
        modiad::RunConfig cfg;
        cfg.validate();
        return cfg;
    }
    return modiad::load_config_file(config_path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modiad: scheduled multi-class anomaly detection simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> policy, out_dir, format;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file (defaults are built in)");
        sub->add_option("--seed", seed, "override seeds.master");
        sub->add_option("--out-dir", out_dir, "override output.dir");
        sub->add_option("--format", format, "round log format: csv or jsonl")
            ->check(CLI::IsMember({"csv", "jsonl"}));
    };

    auto* run = app.add_subcommand("run", "run one experiment and write its artifacts");
    add_common(run);
    run->add_option("--policy", policy, "override scheduler.policy")
        ->check(CLI::IsMember({"smg", "rs", "so", "bo", "brute"}));

    auto* compare = app.add_subcommand("compare", "run several policies on identical streams");
    add_common(compare);
    std::vector<std::string> policies = {"smg", "rs", "so", "bo"};
    int n_seeds = 0;
    compare->add_option("--policies", policies, "policies to compare");
    compare->add_option("--seeds", n_seeds, "number of seed repetitions (default from config)");

    auto* bench = app.add_subcommand("schedbench", "greedy-vs-oracle scheduling benchmark");
    add_common(bench);
    std::string instance_file;
    int gen_count = 0;
    modiad::InstanceGenParams gen;
    std::uint64_t gen_seed = 1;
    bench->add_option("--instances", instance_file, "instance file (line-delimited records)");
    bench->add_option("--gen", gen_count, "generate this many random instances instead");
    bench->add_option("--gen-clients", gen.clients, "generator: number of clients");
    bench->add_option("--gen-classes", gen.classes, "generator: number of classes");
    bench->add_option("--gen-alpha", gen.alpha, "generator: priority weight alpha");
    bench->add_option("--gen-beta", gen.beta, "generator: priority weight beta");
    bench->add_option("--gen-seed", gen_seed, "generator: seed");

    auto* report = app.add_subcommand("report", "re-evaluate a saved bank snapshot");
    add_common(report);
    std::string bank_path = "out/bank.bin";
    report->add_option("--bank", bank_path, "bank snapshot produced by run");

    CLI11_PARSE(app, argc, argv);

    try {
        modiad::CliOverrides overrides{seed, policy, out_dir, format};
        if (run->parsed()) {
            modiad::RunConfig cfg = load_or_default(config_path);
            modiad::apply_overrides(cfg, overrides);
            return modiad::cmd_run(cfg);
        }
        if (compare->parsed()) {
            modiad::RunConfig cfg = load_or_default(config_path);
            modiad::apply_overrides(cfg, overrides);
            if (n_seeds == 0) n_seeds = cfg.seed_repetitions;
            return modiad::cmd_compare(cfg, policies, n_seeds);
        }
        if (bench->parsed()) {
            std::vector<modiad::SchedInstance> instances;
            if (!instance_file.empty()) {
                std::ifstream in(instance_file);
                if (!in) throw modiad::ConfigError("cannot open instance file: " + instance_file);
                instances = modiad::read_instances(in);
            } else if (gen_count > 0) {
                for (int i = 0; i < gen_count; ++i) {
                    modiad::Rng rng = modiad::substream(gen_seed, modiad::StreamTag::instance,
                                                        static_cast<std::uint64_t>(i));
                    instances.push_back(modiad::random_instance(rng, gen));
                }
            } else {
                throw modiad::ConfigError("schedbench: pass --instances FILE or --gen N");
            }
            std::string dir = out_dir.value_or("out");
            return modiad::cmd_schedbench(instances, dir);
        }
        if (report->parsed()) {
            modiad::RunConfig cfg = load_or_default(config_path);
            modiad::apply_overrides(cfg, overrides);
            return modiad::cmd_report(cfg, bank_path);
        }
    } catch (const modiad::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
