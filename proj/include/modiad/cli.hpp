#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "modiad/config.hpp"
#include "modiad/error.hpp"
#include "modiad/protocol.hpp"
#include "modiad/scheduler.hpp"

namespace modiad {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config <-> JSON (strict: unknown keys are rejected with their path)
// ---------------------------------------------------------------------------

namespace detail {

class StrictSection {
public:
    StrictSection(json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        const auto it = j_.find(key);
        if (it == j_.end()) return;  // optional: keep default
        consumed_.insert(key);
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong value type");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    json child(const char* key) {
        consumed_.insert(key);
        return j_.value(key, json::object());
    }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!consumed_.count(key))
                throw ConfigError(path_ + "." + key + ": unknown key");
    }

private:
    json j_;
    std::string path_;
    std::set<std::string> consumed_;
};

inline DefectKind parse_defect_kind(const std::string& s) {
    if (s == "relation_swap") return DefectKind::relation_swap;
    if (s == "additive_offset") return DefectKind::additive_offset;
    if (s == "mixed") return DefectKind::mixed;
    throw ConfigError("stream.defect.kind: unknown kind '" + s + "'");
}

inline std::string defect_kind_name(DefectKind k) {
    switch (k) {
        case DefectKind::relation_swap: return "relation_swap";
        case DefectKind::additive_offset: return "additive_offset";
        case DefectKind::mixed: return "mixed";
    }
    return "?";
}

}  // namespace detail

inline RunConfig config_from_json(const json& j) {
    RunConfig cfg;
    detail::StrictSection root(j, "config");

    {
        detail::StrictSection s(root.child("topology"), "topology");
        s.get("clients", cfg.topology.clients);
        s.get("classes", cfg.topology.classes);
        s.get("per_client", cfg.topology.per_client);
        s.get("share", cfg.topology.share);
        s.finish();
    }
    {
        detail::StrictSection s(root.child("stream"), "stream");
        s.get("packet_cap", cfg.stream.packet_cap);
        s.get("dirichlet_alpha", cfg.stream.dirichlet_alpha);
        s.get("pool_per_pair", cfg.stream.pool_per_pair);
        s.get("pool_heterogeneity", cfg.stream.pool_heterogeneity);
        s.get("eval_normal", cfg.stream.eval_normal);
        s.get("eval_anomalous", cfg.stream.eval_anomalous);
        {
            detail::StrictSection g(s.child("generator"), "stream.generator");
            g.get("d2", cfg.stream.generator.d2);
            g.get("d3", cfg.stream.generator.d3);
            g.get("grid", cfg.stream.generator.grid);
            g.get("noise_sigma", cfg.stream.generator.noise_sigma);
            g.get("cond_bound", cfg.stream.generator.cond_bound);
            g.get("spectrum_decay_max", cfg.stream.generator.spectrum_decay_max);
            g.get("mean_scale", cfg.stream.generator.mean_scale);
            g.get("feature_scale", cfg.stream.generator.feature_scale);
            g.get("offset_scale", cfg.stream.generator.offset_scale);
            g.finish();
        }
        {
            detail::StrictSection d(s.child("defect"), "stream.defect");
            std::string kind = detail::defect_kind_name(cfg.stream.defect.kind);
            d.get("kind", kind);
            cfg.stream.defect.kind = detail::parse_defect_kind(kind);
            d.get("min_size", cfg.stream.defect.min_size);
            d.get("max_size", cfg.stream.defect.max_size);
            d.get("offset_magnitude", cfg.stream.defect.offset_magnitude);
            d.finish();
        }
        s.finish();
    }
    {
        detail::StrictSection s(root.child("training"), "training");
        s.get("eta", cfg.training.eta);
        s.get("tau_max", cfg.training.tau_max);
        s.get("batch", cfg.training.batch);
        s.get("depth", cfg.model_depth);
        s.finish();
    }
    {
        detail::StrictSection s(root.child("scheduler"), "scheduler");
        std::string policy = policy_name(cfg.scheduler.policy);
        s.get("policy", policy);
        cfg.scheduler.policy = parse_policy(policy);
        s.get("alpha", cfg.scheduler.weights.alpha);
        s.get("beta", cfg.scheduler.weights.beta);
        s.get("epsilon", cfg.scheduler.epsilon);
        if (s.has("client_budget")) {
            const json cb = s.child("client_budget");
            cfg.scheduler.client_budget.clear();
            if (cb.is_number_integer())
                cfg.scheduler.client_budget.push_back(cb.get<int>());
            else if (cb.is_array())
                for (const auto& v : cb) cfg.scheduler.client_budget.push_back(v.get<int>());
            else
                throw ConfigError("scheduler.client_budget: expected integer or array");
        }
        s.get("global_budget", cfg.scheduler.global_budget);
        s.finish();
    }
    {
        detail::StrictSection s(root.child("lora"), "lora");
        s.get("enabled", cfg.lora.enabled);
        s.get("t_warm", cfg.lora.t_warm);
        s.get("gamma", cfg.lora.gamma);
        s.get("rank", cfg.lora.rank);
        s.get("adapt_biases", cfg.lora.adapt_biases);
        s.finish();
    }
    root.get("rounds", cfg.rounds);
    {
        detail::StrictSection s(root.child("seeds"), "seeds");
        s.get("master", cfg.master_seed);
        s.get("repetitions", cfg.seed_repetitions);
        s.finish();
    }
    {
        detail::StrictSection s(root.child("metrics"), "metrics");
        s.get("fpr_limits", cfg.metrics.fpr_limits);
        std::string reduction = cfg.metrics.score_reduction_max ? "max" : "mean";
        s.get("score_reduction", reduction);
        if (reduction != "max" && reduction != "mean")
            throw ConfigError("metrics.score_reduction must be max or mean");
        cfg.metrics.score_reduction_max = reduction == "max";
        s.finish();
    }
    {
        detail::StrictSection s(root.child("output"), "output");
        s.get("dir", cfg.output.dir);
        s.get("format", cfg.output.format);
        s.finish();
    }
    root.finish();
    cfg.validate();
    return cfg;
}

inline json config_to_json(const RunConfig& cfg) {
    json j;
    j["topology"] = {{"clients", cfg.topology.clients},
                     {"classes", cfg.topology.classes},
                     {"per_client", cfg.topology.per_client},
                     {"share", cfg.topology.share}};
    j["stream"] = {
        {"packet_cap", cfg.stream.packet_cap},
        {"dirichlet_alpha", cfg.stream.dirichlet_alpha},
        {"pool_per_pair", cfg.stream.pool_per_pair},
        {"pool_heterogeneity", cfg.stream.pool_heterogeneity},
        {"eval_normal", cfg.stream.eval_normal},
        {"eval_anomalous", cfg.stream.eval_anomalous},
        {"generator",
         {{"d2", cfg.stream.generator.d2},
          {"d3", cfg.stream.generator.d3},
          {"grid", cfg.stream.generator.grid},
          {"noise_sigma", cfg.stream.generator.noise_sigma},
          {"cond_bound", cfg.stream.generator.cond_bound},
          {"spectrum_decay_max", cfg.stream.generator.spectrum_decay_max},
          {"mean_scale", cfg.stream.generator.mean_scale},
          {"feature_scale", cfg.stream.generator.feature_scale},
          {"offset_scale", cfg.stream.generator.offset_scale}}},
        {"defect",
         {{"kind", detail::defect_kind_name(cfg.stream.defect.kind)},
          {"min_size", cfg.stream.defect.min_size},
          {"max_size", cfg.stream.defect.max_size},
          {"offset_magnitude", cfg.stream.defect.offset_magnitude}}}};
    j["training"] = {{"eta", cfg.training.eta},
                     {"tau_max", cfg.training.tau_max},
                     {"batch", cfg.training.batch},
                     {"depth", cfg.model_depth}};
    json client_budget;
    if (cfg.scheduler.client_budget.size() == 1)
        client_budget = cfg.scheduler.client_budget.front();
    else
        client_budget = cfg.scheduler.client_budget;
    j["scheduler"] = {{"policy", policy_name(cfg.scheduler.policy)},
                      {"alpha", cfg.scheduler.weights.alpha},
                      {"beta", cfg.scheduler.weights.beta},
                      {"epsilon", cfg.scheduler.epsilon},
                      {"client_budget", client_budget},
                      {"global_budget", cfg.scheduler.global_budget}};
    j["lora"] = {{"enabled", cfg.lora.enabled},
                 {"t_warm", cfg.lora.t_warm},
                 {"gamma", cfg.lora.gamma},
                 {"rank", cfg.lora.rank},
                 {"adapt_biases", cfg.lora.adapt_biases}};
    j["rounds"] = cfg.rounds;
    j["seeds"] = {{"master", cfg.master_seed}, {"repetitions", cfg.seed_repetitions}};
    j["metrics"] = {{"fpr_limits", cfg.metrics.fpr_limits},
                    {"score_reduction", cfg.metrics.score_reduction_max ? "max" : "mean"}};
    j["output"] = {{"dir", cfg.output.dir}, {"format", cfg.output.format}};
    return j;
}

inline std::string canonical_config_text(const RunConfig& cfg) {
    return config_to_json(cfg).dump(2) + "\n";
}

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

// Atomic write: temp file in the same directory, then rename over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << contents;
        out.flush();
        if (!out) throw std::runtime_error("write failed on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path,
                              const std::vector<std::uint8_t>& bytes) {
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9f", v);
    return buf;
}

inline std::string pairs_field(const Schedule& sched) {
    std::string s;
    for (const auto& [k, c] : sched.selection_order) {
        if (!s.empty()) s += ";";
        s += std::to_string(k) + ":" + std::to_string(c);
    }
    return s;
}

}  // namespace detail

inline std::string rounds_csv(const std::vector<RoundRecord>& rounds, std::size_t n_classes) {
    std::ostringstream os;
    os << "round,policy";
    for (std::size_t c = 0; c < n_classes; ++c) os << ",q_" << c;
    os << ",mean_q,selected,uplink,downlink,train_param_steps,"
          "cum_uplink,cum_downlink,cum_train_param_steps\n";
    for (const auto& r : rounds) {
        os << r.round << "," << r.policy;
        for (double q : r.quality) os << "," << detail::fmt(q);
        os << "," << detail::fmt(r.mean_quality) << "," << detail::pairs_field(r.schedule) << ","
           << r.costs.uplink_params << "," << r.costs.downlink_params << ","
           << r.costs.train_param_steps << "," << r.cumulative.uplink_params << ","
           << r.cumulative.downlink_params << "," << r.cumulative.train_param_steps << "\n";
    }
    return os.str();
}

inline json round_record_to_json(const RoundRecord& r) {
    json pairs = json::array();
    for (const auto& [k, c] : r.schedule.selection_order) pairs.push_back({k, c});
    json modes = json::array();
    for (auto m : r.modes) modes.push_back(m == UpdateMode::low_rank ? 1 : 0);
    return json{{"round", r.round},
                {"policy", r.policy},
                {"selected", pairs},
                {"objective", r.schedule.objective},
                {"quality", r.quality},
                {"mean_quality", r.mean_quality},
                {"modes", modes},
                {"uplink", r.costs.uplink_params},
                {"downlink", r.costs.downlink_params},
                {"train_param_steps", r.costs.train_param_steps},
                {"cum_uplink", r.cumulative.uplink_params},
                {"cum_downlink", r.cumulative.downlink_params},
                {"cum_train_param_steps", r.cumulative.train_param_steps}};
}

inline std::string rounds_jsonl(const std::vector<RoundRecord>& rounds) {
    std::string out;
    for (const auto& r : rounds) out += round_record_to_json(r).dump() + "\n";
    return out;
}

inline std::string report_csv(const MetricsReport& report) {
    std::ostringstream os;
    os << "class,i_auroc";
    for (double l : report.fpr_limits) os << ",aupro@" << detail::fmt(l);
    os << "\n";
    for (std::size_t i = 0; i < report.class_ids.size(); ++i) {
        os << report.class_ids[i] << "," << detail::fmt(report.per_class[i].i_auroc);
        for (double v : report.per_class[i].aupro_at) os << "," << detail::fmt(v);
        os << "\n";
    }
    os << "mean," << detail::fmt(report.mean.i_auroc);
    for (double v : report.mean.aupro_at) os << "," << detail::fmt(v);
    os << "\n";
    return os.str();
}

inline std::string summary_line(const std::string& tag, const RunConfig& cfg,
                                const RunResult& result) {
    std::ostringstream os;
    os << tag << " policy=" << policy_name(cfg.scheduler.policy) << " rounds=" << cfg.rounds
       << " seed=" << cfg.master_seed << " mean_i_auroc=" << detail::fmt(result.report.mean.i_auroc);
    for (std::size_t i = 0; i < result.report.fpr_limits.size(); ++i)
        os << " mean_aupro@" << result.report.fpr_limits[i] << "="
           << detail::fmt(result.report.mean.aupro_at[i]);
    os << " cum_uplink=" << result.final_state.ledger.cumulative.uplink_params;
    return os.str();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct CliOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> policy;
    std::optional<std::string> out_dir;
    std::optional<std::string> format;
};

inline void apply_overrides(RunConfig& cfg, const CliOverrides& o) {
    if (o.seed) cfg.master_seed = *o.seed;
    if (o.policy) cfg.scheduler.policy = parse_policy(*o.policy);
    if (o.out_dir) cfg.output.dir = *o.out_dir;
    if (o.format) cfg.output.format = *o.format;
    cfg.validate();
}

// run: execute the experiment and write rounds.csv, rounds.jsonl, report.csv
// and bank.bin under the output directory.
inline int cmd_run(const RunConfig& cfg, std::ostream& out = std::cout) {
    const RunResult result = run_experiment(cfg);
    const std::filesystem::path dir(cfg.output.dir);
    write_file_atomic(dir / "rounds.csv",
                      rounds_csv(result.rounds, static_cast<std::size_t>(cfg.topology.classes)));
    write_file_atomic(dir / "rounds.jsonl", rounds_jsonl(result.rounds));
    write_file_atomic(dir / "report.csv", report_csv(result.report));
    write_file_atomic(dir / "bank.bin", serialize_bank(result.final_state.bank));
    out << summary_line("run", cfg, result) << "\n";
    return 0;
}

// compare: identical seed-derived streams per policy arm, n_seeds repetitions.
inline int cmd_compare(const RunConfig& base_cfg, const std::vector<std::string>& policies,
                       int n_seeds, std::ostream& out = std::cout) {
    if (policies.empty()) throw ConfigError("compare: need at least one policy");
    if (n_seeds < 1) throw ConfigError("compare: need at least one seed");

    struct Row {
        std::string policy;
        std::uint64_t seed;
        MetricsReport report;
        std::uint64_t cum_uplink;
    };
    std::vector<Row> rows;
    for (const auto& pol : policies) {
        for (int rep = 0; rep < n_seeds; ++rep) {
            RunConfig cfg = base_cfg;
            cfg.scheduler.policy = parse_policy(pol);
            cfg.master_seed = base_cfg.master_seed + static_cast<std::uint64_t>(rep);
            cfg.validate();
            const RunResult res = run_experiment(cfg);
            rows.push_back({pol, cfg.master_seed, res.report,
                            res.final_state.ledger.cumulative.uplink_params});
        }
    }

    // Per-class detail rows.
    std::ostringstream detail_csv;
    detail_csv << "policy,seed,class,i_auroc";
    for (double l : base_cfg.metrics.fpr_limits) detail_csv << ",aupro@" << detail::fmt(l);
    detail_csv << "\n";
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.report.class_ids.size(); ++i) {
            detail_csv << r.policy << "," << r.seed << "," << r.report.class_ids[i] << ","
                       << detail::fmt(r.report.per_class[i].i_auroc);
            for (double v : r.report.per_class[i].aupro_at) detail_csv << "," << detail::fmt(v);
            detail_csv << "\n";
        }
        detail_csv << r.policy << "," << r.seed << ",mean,"
                   << detail::fmt(r.report.mean.i_auroc);
        for (double v : r.report.mean.aupro_at) detail_csv << "," << detail::fmt(v);
        detail_csv << "\n";
    }

    // Win counts: per seed, the listed policy with the highest mean I-AUROC.
    std::map<std::string, int> wins;
    std::map<std::string, double> sum_auroc, sum_uplink;
    std::map<std::string, int> n_rows;
    for (int rep = 0; rep < n_seeds; ++rep) {
        std::string best;
        double best_v = -1.0;
        for (const auto& r : rows) {
            if (r.seed != base_cfg.master_seed + static_cast<std::uint64_t>(rep)) continue;
            sum_auroc[r.policy] += r.report.mean.i_auroc;
            sum_uplink[r.policy] += static_cast<double>(r.cum_uplink);
            n_rows[r.policy]++;
            if (r.report.mean.i_auroc > best_v) {
                best_v = r.report.mean.i_auroc;
                best = r.policy;
            }
        }
        wins[best]++;
    }

    std::ostringstream summary;
    std::set<std::string> emitted;
    summary << "policy,mean_i_auroc,mean_cum_uplink,wins\n";
    for (const auto& pol : policies) {
        if (!emitted.insert(pol).second) continue;  // duplicate listings collapse to one row
        summary << pol << "," << detail::fmt(sum_auroc[pol] / n_rows[pol]) << ","
                << static_cast<std::uint64_t>(sum_uplink[pol] / n_rows[pol]) << "," << wins[pol]
                << "\n";
    }

    const std::filesystem::path dir(base_cfg.output.dir);
    write_file_atomic(dir / "compare.csv", detail_csv.str());
    write_file_atomic(dir / "compare_summary.csv", summary.str());
    out << "compare seeds=" << n_seeds << "\n" << summary.str();
    return 0;
}

// schedbench: greedy-vs-oracle report over scheduling instances.
inline int cmd_schedbench(const std::vector<SchedInstance>& instances, const std::string& out_dir,
                          std::ostream& out = std::cout) {
    std::ostringstream csv;
    csv << "instance,candidates,f_greedy,f_oracle,ratio,feasible,skipped\n";
    double min_ratio = 1.0, sum_ratio = 0.0;
    std::size_t rated = 0, modular_violations = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const auto& inst = instances[i];
        const Schedule greedy =
            smg_schedule(inst.candidates, inst.balance, inst.budgets, inst.weights);
        bool feasible = static_cast<int>(greedy.size()) <= inst.budgets.global;
        for (const auto& [k, n] : greedy.per_client_sets())
            feasible = feasible && static_cast<int>(n.size()) <= inst.budgets.per_client[k];
        if (inst.candidates.size() > kBruteForceGuard) {
            out << "schedbench: instance " << i << " skipped (" << inst.candidates.size()
                << " candidates exceed the oracle guard)\n";
            csv << i << "," << inst.candidates.size() << "," << detail::fmt(greedy.objective)
                << ",,," << (feasible ? 1 : 0) << ",1\n";
            continue;
        }
        const Schedule oracle =
            brute_force_schedule(inst.candidates, inst.balance, inst.budgets, inst.weights);
        const double ratio = oracle.objective > 0 ? greedy.objective / oracle.objective
                                                  : (greedy.objective == oracle.objective ? 1.0 : 0.0);
        min_ratio = std::min(min_ratio, ratio);
        sum_ratio += ratio;
        ++rated;
        if (inst.weights.beta == 0.0 && std::abs(greedy.objective - oracle.objective) > 1e-12)
            ++modular_violations;
        csv << i << "," << inst.candidates.size() << "," << detail::fmt(greedy.objective) << ","
            << detail::fmt(oracle.objective) << "," << detail::fmt(ratio) << ","
            << (feasible ? 1 : 0) << ",0\n";
    }
    write_file_atomic(std::filesystem::path(out_dir) / "schedbench.csv", csv.str());
    if (rated > 0)
        out << "schedbench instances=" << instances.size() << " min_ratio="
            << detail::fmt(min_ratio) << " mean_ratio=" << detail::fmt(sum_ratio / rated) << "\n";
    else
        out << "schedbench instances=" << instances.size() << " (no rated instances)\n";
    if (modular_violations > 0) {
        out << "schedbench: FAILED modular-case exactness on " << modular_violations
            << " instances\n";
        return 3;
    }
    return 0;
}

// report: re-evaluate a saved bank snapshot against the config's test sets.
inline int cmd_report(const RunConfig& cfg, const std::string& bank_path,
                      std::ostream& out = std::cout) {
    std::ifstream in(bank_path, std::ios::binary);
    if (!in) throw ConfigError("cannot open bank snapshot: " + bank_path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    const ModelBank bank = deserialize_bank(bytes);
    if (bank.models.size() != static_cast<std::size_t>(cfg.topology.classes))
        throw ConfigError("bank snapshot holds " + std::to_string(bank.models.size()) +
                          " classes but the config expects " +
                          std::to_string(cfg.topology.classes));
    const ExperimentContext ctx = make_context(cfg);
    const MetricsReport report = per_class_report(bank, ctx.eval.test, cfg.metrics.fpr_limits,
                                                  cfg.metrics.score_reduction_max);
    write_file_atomic(std::filesystem::path(cfg.output.dir) / "report.csv", report_csv(report));
    out << "report mean_i_auroc=" << detail::fmt(report.mean.i_auroc) << "\n";
    return 0;
}

}  // namespace modiad
