#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "modiad/config.hpp"
#include "modiad/error.hpp"
#include "modiad/lora.hpp"
#include "modiad/matrix.hpp"
#include "modiad/metrics.hpp"
#include "modiad/nn.hpp"
#include "modiad/rng.hpp"
#include "modiad/scheduler.hpp"
#include "modiad/streamgen.hpp"

namespace modiad {

// Server-held model bank: one global model per class plus an optional
// in-flight adapter slot. Adapters are consumed at aggregation (the mean
// residual is merged into the base), so the slot is empty between rounds.
struct ModelBank {
    std::vector<ClassModel> models;
    std::vector<std::optional<LoraAdapter>> adapters;

    std::size_t num_classes() const { return models.size(); }
};

// Lightweight per-round client message: class-wise sample counts for the
// locally available classes.
struct StatusReport {
    int client = 0;
    long round = 0;
    std::map<int, long> counts;  // class -> N, only entries with N > 0
};

struct CostEntry {
    std::uint64_t uplink_params = 0;
    std::uint64_t downlink_params = 0;
    std::uint64_t train_param_steps = 0;  // trainable params x steps x batch size

    CostEntry& operator+=(const CostEntry& o) {
        uplink_params += o.uplink_params;
        downlink_params += o.downlink_params;
        train_param_steps += o.train_param_steps;
        return *this;
    }
};

struct CostLedger {
    std::vector<CostEntry> per_round;
    CostEntry cumulative;

    void add_round(const CostEntry& e) {
        per_round.push_back(e);
        cumulative += e;
    }
};

struct RoundRecord {
    long round = 0;
    std::string policy;
    Schedule schedule;
    std::vector<double> quality;       // post-aggregation validation Q_c
    double mean_quality = 0.0;
    std::vector<UpdateMode> modes;     // update mode used this round per class
    CostEntry costs;                   // this round only
    CostEntry cumulative;              // ledger state after this round
};

// Everything immutable over a run: validated config, planted generators,
// the client/class assignment and the held-out evaluation sets.
struct ExperimentContext {
    RunConfig cfg;
    std::vector<ClassGenerator> generators;
    Assignment assignment;
    EvalSets eval;
};

// Full mutable simulation state; value-semantic so snapshots are plain copies.
struct SimState {
    long round = 0;
    ModelBank bank;
    ModeState modes;
    BalanceState balance;
    CostLedger ledger;
    std::vector<ClientPool> pools;                 // per client
    std::vector<std::map<int, long>> base_cache;   // per client: class -> cached base version
};

inline ExperimentContext make_context(const RunConfig& cfg) {
    cfg.validate();
    ExperimentContext ctx;
    ctx.cfg = cfg;
    for (int c = 0; c < cfg.topology.classes; ++c) {
        Rng rng = substream(cfg.master_seed, StreamTag::generator, static_cast<std::uint64_t>(c));
        ctx.generators.emplace_back(c, cfg.stream.generator, rng);
    }
    Rng arng = substream(cfg.master_seed, StreamTag::assignment);
    ctx.assignment = assign_classes(cfg.topology.clients, cfg.topology.classes,
                                    cfg.topology.per_client, cfg.topology.share, arng);
    ctx.eval = build_eval_sets(ctx.generators, cfg.stream.defect, cfg.stream.eval_normal,
                               cfg.stream.eval_anomalous, cfg.master_seed);
    return ctx;
}

inline SimState initial_state(const ExperimentContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    SimState st;
    for (int c = 0; c < cfg.topology.classes; ++c) {
        Rng rng = substream(cfg.master_seed, StreamTag::model_init, static_cast<std::uint64_t>(c));
        st.bank.models.push_back(make_class_model(c, cfg.stream.generator.d2,
                                                  cfg.stream.generator.d3, rng, cfg.model_depth));
    }
    st.bank.adapters.assign(st.bank.models.size(), std::nullopt);
    st.modes = ModeState(st.bank.models.size());
    st.balance.b_cum.assign(st.bank.models.size(), 0);
    st.balance.epsilon = cfg.scheduler.epsilon;
    st.pools.resize(static_cast<std::size_t>(cfg.topology.clients));
    st.base_cache.resize(static_cast<std::size_t>(cfg.topology.clients));
    for (int k = 0; k < cfg.topology.clients; ++k) {
        for (int c : ctx.assignment.client_classes[static_cast<std::size_t>(k)]) {
            auto& cp = st.pools[static_cast<std::size_t>(k)].classes[c];
            // Long-term stock with seeded per-pair heterogeneity: data-rich
            // and data-poor client-class pairs coexist.
            const double h = cfg.stream.pool_heterogeneity;
            Rng prng = substream(cfg.master_seed, StreamTag::pool_size,
                                 static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(c));
            const double factor = h > 0 ? prng.uniform(1.0 - h, 1.0 + h) : 1.0;
            cp.remaining = std::max<long>(
                cfg.stream.pool_per_pair > 0 ? 1 : 0,
                std::llround(static_cast<double>(cfg.stream.pool_per_pair) * factor));
            cp.generator = &ctx.generators[static_cast<std::size_t>(c)];
            st.base_cache[static_cast<std::size_t>(k)][c] = -1;  // nothing cached yet
        }
    }
    return st;
}

// ---------------------------------------------------------------------------
// Anomaly maps and scoring
// ---------------------------------------------------------------------------

struct AnomalyMaps {
    Matrix psi2d;   // [P x P]
    Matrix psi3d;
    Matrix fused;   // elementwise product
};

namespace detail {

// Chord distance between L2-normalized rows; zero rows normalize to zero.
inline double normalized_row_distance(const double* a, const double* b, std::size_t n) {
    const double na = norm2(a, n);
    const double nb = norm2(b, n);
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double va = na > kCosineGuard ? a[i] / na : 0.0;
        const double vb = nb > kCosineGuard ? b[i] / nb : 0.0;
        d += (va - vb) * (va - vb);
    }
    return std::sqrt(d);
}

}  // namespace detail

// Per-patch discrepancy maps from observed vs cross-modal predicted features,
// reshaped to the grid; the fused map is the pixel-wise product of the two.
inline AnomalyMaps anomaly_map(const ClassModel& model, const FeatureSample& sample) {
    const std::size_t patches = sample.e2d.rows();
    const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
    if (grid * grid != patches)
        throw InvalidInputError("anomaly_map: patch count is not a square grid");
    const Matrix pred3d = mapper_forward(model.map_2d_to_3d, sample.e2d);
    const Matrix pred2d = mapper_forward(model.map_3d_to_2d, sample.e3d);

    AnomalyMaps maps{Matrix(grid, grid), Matrix(grid, grid), Matrix(grid, grid)};
    for (std::size_t p = 0; p < patches; ++p) {
        const double d2 = detail::normalized_row_distance(sample.e2d.row_ptr(p),
                                                          pred2d.row_ptr(p), sample.e2d.cols());
        const double d3 = detail::normalized_row_distance(sample.e3d.row_ptr(p),
                                                          pred3d.row_ptr(p), sample.e3d.cols());
        maps.psi2d.data()[p] = d2;
        maps.psi3d.data()[p] = d3;
        maps.fused.data()[p] = d2 * d3;
    }
    return maps;
}

inline AnomalyMaps anomaly_map(const ClassModel& model, const LoraAdapter& adapter,
                               const FeatureSample& sample) {
    return anomaly_map(merged_model(model, adapter), sample);
}

inline double image_score(const AnomalyMaps& maps, bool reduce_max = true) {
    const auto& v = maps.fused.data();
    if (v.empty()) return 0.0;
    if (reduce_max) {
        double m = v.front();
        for (double x : v) m = std::max(m, x);
        return m;
    }
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Evaluation against held-out sets
// ---------------------------------------------------------------------------

inline double evaluate_class_quality(const ClassModel& model,
                                     const std::vector<FeatureSample>& samples, bool reduce_max) {
    ScoredSet set;
    for (const auto& s : samples) {
        set.scores.push_back(image_score(anomaly_map(model, s), reduce_max));
        set.labels.push_back(s.is_anomalous ? 1 : 0);
    }
    return auroc(set);
}

// Per-class I-AUROC and AUPRO on the given per-class sets, plus the class mean.
inline MetricsReport per_class_report(const ModelBank& bank,
                                      const std::map<int, std::vector<FeatureSample>>& sets,
                                      const std::vector<double>& fpr_limits,
                                      bool reduce_max = true) {
    std::map<int, ScoredSet> scored;
    std::map<int, SegmentationSet> segmented;
    for (const auto& [class_id, samples] : sets) {
        if (class_id < 0 || class_id >= static_cast<int>(bank.models.size()))
            throw InvalidInputError("per_class_report: class " + std::to_string(class_id) +
                                    " not present in the bank");
        const ClassModel& model = bank.models[static_cast<std::size_t>(class_id)];
        auto& sc = scored[class_id];
        auto& seg = segmented[class_id];
        for (const auto& s : samples) {
            AnomalyMaps maps = anomaly_map(model, s);
            sc.scores.push_back(image_score(maps, reduce_max));
            sc.labels.push_back(s.is_anomalous ? 1 : 0);
            seg.samples.push_back({std::move(maps.fused), s.mask});
        }
    }
    return metrics_report(scored, segmented, fpr_limits);
}

// ---------------------------------------------------------------------------
// The round engine
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<StatusReport> collect_reports(const SimState& st, long round) {
    std::vector<StatusReport> reports;
    for (std::size_t k = 0; k < st.pools.size(); ++k) {
        StatusReport r;
        r.client = static_cast<int>(k);
        r.round = round;
        for (const auto& [c, cp] : st.pools[k].classes)
            if (!cp.samples.empty()) r.counts[c] = static_cast<long>(cp.samples.size());
        reports.push_back(std::move(r));
    }
    return reports;
}

inline std::vector<Candidate> candidates_from_reports(const std::vector<StatusReport>& reports) {
    std::vector<Candidate> cands;
    for (const auto& r : reports)
        for (const auto& [c, n] : r.counts) cands.push_back({r.client, c, n});
    return cands;
}

struct PacketUndo {
    std::size_t client;
    int class_id;
    long count;
};

}  // namespace detail

// Executes one full round in place. Any failure rolls the state back to its
// pre-round value and rethrows with (round, client, class) context.
inline RoundRecord run_round(const ExperimentContext& ctx, SimState& st) {
    const RunConfig& cfg = ctx.cfg;
    const long t = st.round;

    // Step 1: online data arrival. The only in-place mutation before commit;
    // undo records make the round atomic on failure.
    std::vector<detail::PacketUndo> undo;
    for (std::size_t k = 0; k < st.pools.size(); ++k) {
        Rng rng = substream(cfg.master_seed, StreamTag::client_round, k,
                            static_cast<std::uint64_t>(t));
        for (const auto& [c, n] : draw_packet(st.pools[k], cfg.stream.dirichlet_alpha,
                                              cfg.stream.packet_cap, rng))
            undo.push_back({k, c, n});
    }
    auto rollback = [&]() {
        for (auto it = undo.rbegin(); it != undo.rend(); ++it) {
            auto& cp = st.pools[it->client].classes.at(it->class_id);
            cp.samples.resize(cp.samples.size() - static_cast<std::size_t>(it->count));
            cp.remaining += it->count;
        }
    };

    try {
        // Step 2: status reports.
        const auto reports = detail::collect_reports(st, t);
        const auto candidates = detail::candidates_from_reports(reports);

        // Step 3: update modes, then schedule.
        std::vector<std::optional<double>> q_smooth;
        for (const auto& cm : st.modes.classes) q_smooth.push_back(cm.q_smooth);
        std::vector<UpdateMode> modes(st.bank.num_classes(), UpdateMode::full);
        if (cfg.lora.enabled) modes = decide_mode(q_smooth, t, cfg.lora.t_warm);

        // A class flipping back to full first folds any outstanding adapter
        // into its base so no adapted behavior is lost.
        ModelBank staged_bank = st.bank;
        for (std::size_t c = 0; c < modes.size(); ++c) {
            if (modes[c] == UpdateMode::full && staged_bank.adapters[c]) {
                staged_bank.models[c] = merged_model(staged_bank.models[c],
                                                     *staged_bank.adapters[c]);
                staged_bank.adapters[c].reset();
            }
        }

        const Budgets budgets = cfg.budgets();
        Schedule schedule;
        if (!candidates.empty()) {
            switch (cfg.scheduler.policy) {
                case SchedulerPolicy::smg:
                    schedule = smg_schedule(candidates, st.balance, budgets,
                                            cfg.scheduler.weights);
                    break;
                case SchedulerPolicy::brute:
                    schedule = brute_force_schedule(candidates, st.balance, budgets,
                                                    cfg.scheduler.weights);
                    break;
                case SchedulerPolicy::rs:
                case SchedulerPolicy::so:
                case SchedulerPolicy::bo: {
                    Rng rng = substream(cfg.master_seed, StreamTag::baseline,
                                        static_cast<std::uint64_t>(t));
                    const auto policy = cfg.scheduler.policy == SchedulerPolicy::rs
                                            ? BaselinePolicy::rs
                                            : (cfg.scheduler.policy == SchedulerPolicy::so
                                                   ? BaselinePolicy::so
                                                   : BaselinePolicy::bo);
                    schedule = baseline_schedule(policy, candidates, st.balance, budgets, rng);
                    break;
                }
            }
        }

        // Steps 3-6: broadcast, local training, upload.
        CostEntry costs;
        std::vector<std::tuple<std::size_t, int, long>> cache_updates;  // client, class, version
        std::map<int, std::vector<ClassModel>> full_uploads;
        std::map<int, std::vector<LoraAdapter>> lora_uploads;
        std::map<int, LoraAdapter> issued_adapters;  // one fresh adapter per low-rank class

        for (const auto& [client, class_id] : schedule.sorted_pairs()) {
            const auto k = static_cast<std::size_t>(client);
            const auto c = static_cast<std::size_t>(class_id);
            try {
                const ClassModel& global = staged_bank.models[c];
                // Broadcast: the base is re-sent only when the cached version
                // is stale; adapters are issued from a shared seed at no
                // ledgered cost.
                const long cached = st.base_cache[k].at(class_id);
                if (cached != global.version) {
                    costs.downlink_params += global.param_count();
                    cache_updates.emplace_back(k, class_id, global.version);
                }

                const auto& samples = st.pools[k].classes.at(class_id).samples;
                Rng train_rng = substream(cfg.master_seed, StreamTag::train,
                                          static_cast<std::uint64_t>(t),
                                          (static_cast<std::uint64_t>(k) << 32) |
                                              static_cast<std::uint64_t>(class_id));
                const std::size_t batch_used = std::min(cfg.training.batch, samples.size());
                if (modes[c] == UpdateMode::full) {
                    auto [trained, steps] = local_train(global, samples, cfg.training, train_rng);
                    full_uploads[class_id].push_back(std::move(trained));
                    costs.uplink_params += uploaded_param_count(architecture_of(global),
                                                                UpdateMode::full, cfg.lora.rank,
                                                                cfg.lora.adapt_biases);
                    costs.train_param_steps += global.param_count() *
                                               static_cast<std::uint64_t>(steps) * batch_used;
                } else {
                    auto it = issued_adapters.find(class_id);
                    if (it == issued_adapters.end()) {
                        Rng arng = substream(cfg.master_seed, StreamTag::adapter_init,
                                             static_cast<std::uint64_t>(t),
                                             static_cast<std::uint64_t>(class_id));
                        it = issued_adapters.emplace(class_id,
                                                     make_adapter(global, cfg.lora, arng)).first;
                    }
                    LoraAdapter trained =
                        lora_train(global, it->second, samples, cfg.training, train_rng);
                    lora_uploads[class_id].push_back(std::move(trained));
                    const auto count = uploaded_param_count(architecture_of(global),
                                                            UpdateMode::low_rank, cfg.lora.rank,
                                                            cfg.lora.adapt_biases);
                    costs.uplink_params += count;
                    costs.train_param_steps +=
                        count * static_cast<std::uint64_t>(cfg.training.tau_max) * batch_used;
                }
            } catch (const DivergedError& e) {
                throw DivergedError("round " + std::to_string(t) + " client " +
                                        std::to_string(client) + " class " +
                                        std::to_string(class_id) + ": " + e.what(),
                                    e.step);
            } catch (const InvalidInputError& e) {
                throw InvalidInputError("round " + std::to_string(t) + " client " +
                                        std::to_string(client) + " class " +
                                        std::to_string(class_id) + ": " + e.what());
            }
        }

        // Step 7: class-wise aggregation. Classes without uploads keep the
        // previous global model untouched.
        for (auto& [class_id, uploads] : full_uploads) {
            ClassModel merged = mean_models(uploads);
            merged.class_id = class_id;
            merged.version = t + 1;
            staged_bank.models[static_cast<std::size_t>(class_id)] = std::move(merged);
        }
        for (auto& [class_id, uploads] : lora_uploads) {
            const auto c = static_cast<std::size_t>(class_id);
            // mean over clients of (base + H_k J_k) = base + mean residual
            std::vector<ClassModel> merged;
            merged.reserve(uploads.size());
            for (const auto& a : uploads) merged.push_back(merged_model(staged_bank.models[c], a));
            ClassModel agg = mean_models(merged);
            agg.class_id = class_id;
            agg.version = t + 1;
            staged_bank.models[c] = std::move(agg);
            staged_bank.adapters[c].reset();  // consumed; next round issues fresh factors
        }

        // Server-side quality evaluation on the validation sets.
        std::vector<double> quality(st.bank.num_classes(), 0.0);
        std::vector<std::optional<double>> new_q_smooth(st.bank.num_classes());
        for (std::size_t c = 0; c < st.bank.num_classes(); ++c) {
            const auto it = ctx.eval.validation.find(static_cast<int>(c));
            if (it == ctx.eval.validation.end())
                throw InvalidInputError("run_round: missing validation set for class " +
                                        std::to_string(c));
            quality[c] = evaluate_class_quality(staged_bank.models[c], it->second,
                                                cfg.metrics.score_reduction_max);
            new_q_smooth[c] =
                smooth_quality(quality[c], st.modes.classes[c].q_smooth, cfg.lora.gamma);
        }

        BalanceState new_balance = advance_balance(st.balance, schedule);

        // Commit. Nothing below throws.
        st.bank = std::move(staged_bank);
        for (const auto& [k, class_id, version] : cache_updates)
            st.base_cache[k][class_id] = version;
        for (std::size_t c = 0; c < st.modes.classes.size(); ++c) {
            st.modes.classes[c].mode = modes[c];
            st.modes.classes[c].base_frozen = modes[c] == UpdateMode::low_rank;
            st.modes.classes[c].q_smooth = new_q_smooth[c];
        }
        st.balance = std::move(new_balance);
        st.ledger.add_round(costs);
        st.round = t + 1;

        RoundRecord rec;
        rec.round = t;
        rec.policy = policy_name(cfg.scheduler.policy);
        rec.schedule = std::move(schedule);
        rec.quality = std::move(quality);
        double mq = 0.0;
        for (double q : rec.quality) mq += q;
        rec.mean_quality = rec.quality.empty() ? 0.0 : mq / static_cast<double>(rec.quality.size());
        rec.modes = std::move(modes);
        rec.costs = costs;
        rec.cumulative = st.ledger.cumulative;
        return rec;
    } catch (...) {
        rollback();
        throw;
    }
}

struct RunResult {
    std::vector<RoundRecord> rounds;
    MetricsReport report;   // final metrics on the test sets
    SimState final_state;
};

// T rounds end to end, then the final per-class test report. Fully
// deterministic given the config's master seed.
inline RunResult run_experiment(const ExperimentContext& ctx) {
    RunResult result;
    SimState st = initial_state(ctx);
    for (long t = 0; t < ctx.cfg.rounds; ++t) result.rounds.push_back(run_round(ctx, st));
    result.report = per_class_report(st.bank, ctx.eval.test, ctx.cfg.metrics.fpr_limits,
                                     ctx.cfg.metrics.score_reduction_max);
    result.final_state = std::move(st);
    return result;
}

inline RunResult run_experiment(const RunConfig& cfg) {
    return run_experiment(make_context(cfg));
}

// ---------------------------------------------------------------------------
// Bank snapshots: versioned little-endian binary format
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_i64(std::vector<std::uint8_t>& out, std::int64_t v) {
    const auto u = static_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    static_assert(sizeof bits == sizeof v);
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

struct ByteReader {
    const std::vector<std::uint8_t>& buf;
    std::size_t at = 0;

    void need(std::size_t n) const {
        if (at + n > buf.size()) throw CorruptStreamError("bank snapshot: truncated stream");
    }
    std::uint8_t u8() {
        need(1);
        return buf[at++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[at++]) << (8 * i);
        return v;
    }
    std::int64_t i64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[at++]) << (8 * i);
        return static_cast<std::int64_t>(v);
    }
    double f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[at++]) << (8 * i);
        double d;
        std::memcpy(&d, &v, sizeof d);
        return d;
    }
};

inline void put_net(std::vector<std::uint8_t>& out, const MapperNet& net) {
    out.push_back(static_cast<std::uint8_t>(net.activation));
    put_u32(out, static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& l : net.layers) {
        put_u32(out, static_cast<std::uint32_t>(l.weight.rows()));
        put_u32(out, static_cast<std::uint32_t>(l.weight.cols()));
        for (double v : l.weight.data()) put_f64(out, v);
        for (double v : l.bias) put_f64(out, v);
    }
}

inline MapperNet get_net(ByteReader& r) {
    MapperNet net;
    const auto act = r.u8();
    if (act > 1) throw CorruptStreamError("bank snapshot: bad activation byte");
    net.activation = static_cast<Activation>(act);
    const auto n_layers = r.u32();
    if (n_layers == 0 || n_layers > 64)
        throw CorruptStreamError("bank snapshot: implausible layer count");
    std::size_t prev_out = 0;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        const auto rows = r.u32();
        const auto cols = r.u32();
        if (rows == 0 || cols == 0 || rows > 65536 || cols > 65536)
            throw CorruptStreamError("bank snapshot: implausible layer dims");
        if (l > 0 && cols != prev_out)
            throw CorruptStreamError("bank snapshot: layer dimensions do not chain");
        Layer layer;
        layer.weight = Matrix(rows, cols);
        for (auto& v : layer.weight.data()) v = r.f64();
        layer.bias.resize(rows);
        for (auto& v : layer.bias) v = r.f64();
        net.layers.push_back(std::move(layer));
        prev_out = rows;
    }
    return net;
}

inline void put_factors(std::vector<std::uint8_t>& out, const std::vector<LoraFactors>& fs) {
    put_u32(out, static_cast<std::uint32_t>(fs.size()));
    for (const auto& f : fs) {
        put_u32(out, static_cast<std::uint32_t>(f.h.rows()));
        put_u32(out, static_cast<std::uint32_t>(f.h.cols()));
        put_u32(out, static_cast<std::uint32_t>(f.j.cols()));
        for (double v : f.h.data()) put_f64(out, v);
        for (double v : f.j.data()) put_f64(out, v);
        out.push_back(f.bias_delta.empty() ? 0 : 1);
        for (double v : f.bias_delta) put_f64(out, v);
    }
}

inline std::vector<LoraFactors> get_factors(ByteReader& r) {
    std::vector<LoraFactors> fs;
    const auto n = r.u32();
    if (n > 64) throw CorruptStreamError("bank snapshot: implausible factor count");
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto d_out = r.u32();
        const auto rank = r.u32();
        const auto d_in = r.u32();
        if (d_out == 0 || rank == 0 || d_in == 0)
            throw CorruptStreamError("bank snapshot: bad factor dims");
        LoraFactors f;
        f.h = Matrix(d_out, rank);
        for (auto& v : f.h.data()) v = r.f64();
        f.j = Matrix(rank, d_in);
        for (auto& v : f.j.data()) v = r.f64();
        if (r.u8()) {
            f.bias_delta.resize(d_out);
            for (auto& v : f.bias_delta) v = r.f64();
        }
        fs.push_back(std::move(f));
    }
    return fs;
}

}  // namespace detail

inline constexpr std::uint32_t kBankMagic = 0x4b42444dU;  // "MDBK" little-endian
inline constexpr std::uint32_t kBankVersion = 1;

inline std::vector<std::uint8_t> serialize_bank(const ModelBank& bank) {
    std::vector<std::uint8_t> out;
    detail::put_u32(out, kBankMagic);
    detail::put_u32(out, kBankVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(bank.models.size()));
    for (std::size_t c = 0; c < bank.models.size(); ++c) {
        const auto& m = bank.models[c];
        detail::put_u32(out, static_cast<std::uint32_t>(m.class_id));
        detail::put_i64(out, m.version);
        detail::put_net(out, m.map_2d_to_3d);
        detail::put_net(out, m.map_3d_to_2d);
        const auto& a = bank.adapters[c];
        out.push_back(a ? 1 : 0);
        if (a) {
            detail::put_u32(out, static_cast<std::uint32_t>(a->rank));
            detail::put_factors(out, a->to_3d);
            detail::put_factors(out, a->to_2d);
        }
    }
    return out;
}

inline ModelBank deserialize_bank(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r{bytes};
    if (r.u32() != kBankMagic) throw CorruptStreamError("bank snapshot: bad magic");
    if (r.u32() != kBankVersion) throw CorruptStreamError("bank snapshot: unsupported version");
    const auto n = r.u32();
    if (n > 100000) throw CorruptStreamError("bank snapshot: implausible class count");
    ModelBank bank;
    for (std::uint32_t c = 0; c < n; ++c) {
        ClassModel m;
        m.class_id = static_cast<int>(r.u32());
        m.version = r.i64();
        m.map_2d_to_3d = detail::get_net(r);
        m.map_3d_to_2d = detail::get_net(r);
        bank.models.push_back(std::move(m));
        if (r.u8()) {
            LoraAdapter a;
            a.rank = r.u32();
            a.to_3d = detail::get_factors(r);
            a.to_2d = detail::get_factors(r);
            bank.adapters.push_back(std::move(a));
        } else {
            bank.adapters.push_back(std::nullopt);
        }
    }
    if (r.at != bytes.size()) throw CorruptStreamError("bank snapshot: trailing bytes");
    return bank;
}

}  // namespace modiad
