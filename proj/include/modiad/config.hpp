#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modiad/error.hpp"
#include "modiad/lora.hpp"
#include "modiad/nn.hpp"
#include "modiad/scheduler.hpp"
#include "modiad/streamgen.hpp"

namespace modiad {

enum class SchedulerPolicy { smg, rs, so, bo, brute };

inline std::string policy_name(SchedulerPolicy p) {
    switch (p) {
        case SchedulerPolicy::smg: return "smg";
        case SchedulerPolicy::rs: return "rs";
        case SchedulerPolicy::so: return "so";
        case SchedulerPolicy::bo: return "bo";
        case SchedulerPolicy::brute: return "brute";
    }
    return "?";
}

inline SchedulerPolicy parse_policy(const std::string& s) {
    if (s == "smg") return SchedulerPolicy::smg;
    if (s == "rs") return SchedulerPolicy::rs;
    if (s == "so") return SchedulerPolicy::so;
    if (s == "bo") return SchedulerPolicy::bo;
    if (s == "brute") return SchedulerPolicy::brute;
    throw ConfigError("scheduler.policy: unknown policy '" + s + "'");
}

struct TopologyConfig {
    int clients = 5;
    int classes = 10;
    int per_client = 4;       // classes held per client
    int share = 2;            // clients holding each class
};

struct StreamConfig {
    long packet_cap = 10;
    double dirichlet_alpha = 6.0;
    long pool_per_pair = 250;        // mean long-term stock per (client, class)
    double pool_heterogeneity = 0.0; // stock drawn from pool*(1 -/+ h), seeded
    ClassGeneratorConfig generator;
    DefectSpec defect;               // swap sources are filled in per class at setup
    long eval_normal = 48;           // per-class normals in each of validation/test
    long eval_anomalous = 48;
};

struct SchedulerConfig {
    SchedulerPolicy policy = SchedulerPolicy::smg;
    ScoreWeights weights;                  // alpha, beta
    double epsilon = 1e-8;
    std::vector<int> client_budget = {2};  // per-client caps; one value broadcasts to all
    int global_budget = 5;
};

struct MetricsConfig {
    std::vector<double> fpr_limits = {0.10, 0.05};
    bool score_reduction_max = true;  // image score = max over fused map (mean otherwise)
};

struct OutputConfig {
    std::string dir = "out";
    std::string format = "csv";  // csv | jsonl for the round log
};

struct RunConfig {
    TopologyConfig topology;
    StreamConfig stream;
    TrainingConfig training;
    std::size_t model_depth = 2;  // linear layers per mapper
    SchedulerConfig scheduler;
    LoraConfig lora;
    long rounds = 50;
    std::uint64_t master_seed = 1;
    int seed_repetitions = 5;
    MetricsConfig metrics;
    OutputConfig output;

    Budgets budgets() const {
        Budgets b;
        b.global = scheduler.global_budget;
        b.per_client = scheduler.client_budget;
        b.per_client.resize(static_cast<std::size_t>(topology.clients),
                            scheduler.client_budget.empty() ? 0 : scheduler.client_budget.back());
        return b;
    }

    void validate() const {
        if (topology.clients <= 0) throw ConfigError("topology.clients must be positive");
        if (topology.classes <= 0) throw ConfigError("topology.classes must be positive");
        if (topology.per_client <= 0 || topology.per_client > topology.classes)
            throw ConfigError("topology.per_client must be in [1, topology.classes]");
        if (topology.share <= 0) throw ConfigError("topology.share must be positive");
        if (static_cast<long>(topology.clients) * topology.per_client !=
            static_cast<long>(topology.classes) * topology.share)
            throw ConfigError("topology: clients*per_client must equal classes*share");
        if (stream.packet_cap < 0) throw ConfigError("stream.packet_cap must be >= 0");
        if (!(stream.dirichlet_alpha > 0)) throw ConfigError("stream.dirichlet_alpha must be > 0");
        if (stream.pool_per_pair < 0) throw ConfigError("stream.pool_per_pair must be >= 0");
        if (!(stream.pool_heterogeneity >= 0 && stream.pool_heterogeneity < 1))
            throw ConfigError("stream.pool_heterogeneity must be in [0, 1)");
        if (stream.generator.d2 < 1 || stream.generator.d3 < 1)
            throw ConfigError("stream.generator dims must be >= 1");
        if (stream.generator.grid < 1) throw ConfigError("stream.generator.grid must be >= 1");
        if (!(stream.generator.noise_sigma >= 0))
            throw ConfigError("stream.generator.noise_sigma must be >= 0");
        if (!(stream.generator.cond_bound >= 1))
            throw ConfigError("stream.generator.cond_bound must be >= 1");
        if (!(stream.generator.spectrum_decay_max >= 1))
            throw ConfigError("stream.generator.spectrum_decay_max must be >= 1");
        if (stream.defect.min_size < 1 || stream.defect.max_size < stream.defect.min_size ||
            stream.defect.max_size > stream.generator.grid)
            throw ConfigError("stream.defect sizes must satisfy 1 <= min <= max <= grid");
        if (stream.eval_normal < 1) throw ConfigError("stream.eval_normal must be >= 1");
        if (stream.eval_anomalous < 1)
            throw ConfigError("stream.eval_anomalous must be >= 1 (AUROC needs both labels)");
        training.validate();
        if (model_depth < 1) throw ConfigError("model_depth must be >= 1");
        scheduler.weights.validate();
        if (!(scheduler.epsilon > 0)) throw ConfigError("scheduler.epsilon must be > 0");
        if (scheduler.global_budget < 0) throw ConfigError("scheduler.global_budget must be >= 0");
        if (scheduler.client_budget.empty())
            throw ConfigError("scheduler.client_budget must not be empty");
        for (int v : scheduler.client_budget)
            if (v < 0) throw ConfigError("scheduler.client_budget entries must be >= 0");
        lora.validate();
        if (lora.enabled) {
            // Every adapted layer needs rank < min(d_out, d_in).
            const std::size_t hidden =
                default_hidden_dim(stream.generator.d2, stream.generator.d3);
            const std::size_t min_dim =
                std::min({stream.generator.d2, stream.generator.d3, hidden});
            if (lora.rank >= min_dim)
                throw ConfigError("lora.rank must be < " + std::to_string(min_dim) +
                                  " for the configured feature dims");
        }
        if (rounds < 0) throw ConfigError("rounds must be >= 0");
        if (seed_repetitions < 1) throw ConfigError("seeds.repetitions must be >= 1");
        for (double l : metrics.fpr_limits)
            if (!(l > 0 && l <= 1)) throw ConfigError("metrics.fpr_limits entries must be in (0, 1]");
        if (metrics.fpr_limits.empty()) throw ConfigError("metrics.fpr_limits must not be empty");
        if (output.format != "csv" && output.format != "jsonl")
            throw ConfigError("output.format must be csv or jsonl");
    }
};

}  // namespace modiad
