#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "modiad/error.hpp"
#include "modiad/rng.hpp"

namespace modiad {

using ClientClassPair = std::pair<int, int>;  // (client k, class c)

// One schedulable client-class pair and its local sample count.
struct Candidate {
    int client = 0;
    int class_id = 0;
    long n_samples = 0;
};

// Cumulative per-class update counts B_c and the stability constant used in
// the imbalance weight.
struct BalanceState {
    std::vector<long> b_cum;
    double epsilon = 1e-8;

    std::size_t num_classes() const { return b_cum.size(); }
};

struct Budgets {
    std::vector<int> per_client;  // computation cap per client
    int global = 0;               // communication cap per round

    void validate() const {
        if (global < 0) throw ConfigError("budgets.global must be >= 0");
        for (int v : per_client)
            if (v < 0) throw ConfigError("budgets.per_client entries must be >= 0");
    }
};

struct ScoreWeights {
    double alpha = 0.5;
    double beta = 0.5;

    void validate() const {
        if (alpha < 0 || beta < 0 || !(alpha + beta > 0))
            throw ConfigError("weights: alpha, beta must be >= 0 with alpha + beta > 0");
    }
};

// A selected assignment for one round, in selection order, with its objective.
struct Schedule {
    std::vector<ClientClassPair> selection_order;
    double objective = 0.0;

    std::size_t size() const { return selection_order.size(); }
    bool empty() const { return selection_order.empty(); }

    std::vector<ClientClassPair> sorted_pairs() const {
        auto p = selection_order;
        std::sort(p.begin(), p.end());
        return p;
    }

    bool contains(int client, int class_id) const {
        for (const auto& p : selection_order)
            if (p.first == client && p.second == class_id) return true;
        return false;
    }

    // C_k^t view: classes assigned per client.
    std::map<int, std::vector<int>> per_client_sets() const {
        std::map<int, std::vector<int>> sets;
        for (const auto& [k, c] : selection_order) sets[k].push_back(c);
        for (auto& [k, v] : sets) std::sort(v.begin(), v.end());
        return sets;
    }
};

// ---------------------------------------------------------------------------
// Scoring primitives
// ---------------------------------------------------------------------------

// R = ln(1 + N)
inline double data_sufficiency_score(long n) {
    if (n < 0) throw InvalidInputError("data_sufficiency_score: n must be >= 0");
    return std::log1p(static_cast<double>(n));
}

// pi_c = B_c / sum(B); uniform 1/C when no update has happened yet.
inline std::vector<double> class_update_distribution(const std::vector<long>& b_cum) {
    std::vector<double> pi(b_cum.size(), 0.0);
    long total = 0;
    for (long b : b_cum) {
        if (b < 0) throw InvalidInputError("class_update_distribution: counts must be >= 0");
        total += b;
    }
    if (total == 0) {
        std::fill(pi.begin(), pi.end(), 1.0 / static_cast<double>(b_cum.size()));
        return pi;
    }
    for (std::size_t c = 0; c < b_cum.size(); ++c)
        pi[c] = static_cast<double>(b_cum[c]) / static_cast<double>(total);
    return pi;
}

// V = ln(1 + 1/(pi + eps)); strictly decreasing in pi.
inline double class_imbalance_weight(double pi, double epsilon) {
    if (!(epsilon > 0)) throw ConfigError("class_imbalance_weight: epsilon must be > 0");
    return std::log1p(1.0 / (pi + epsilon));
}

namespace detail {

// Normalized sufficiency scores over the candidate set; all zeros when the
// maximum raw score is zero.
inline std::vector<double> r_bar_scores(const std::vector<Candidate>& candidates) {
    std::vector<double> r(candidates.size());
    double r_max = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        r[i] = data_sufficiency_score(candidates[i].n_samples);
        r_max = std::max(r_max, r[i]);
    }
    if (r_max > 0)
        for (double& v : r) v /= r_max;
    else
        std::fill(r.begin(), r.end(), 0.0);
    return r;
}

// V values for all classes given in-round selection counts kappa.
inline std::vector<double> v_values(const BalanceState& balance, const std::vector<long>& kappa) {
    std::vector<long> b = balance.b_cum;
    for (std::size_t c = 0; c < b.size(); ++c) b[c] += kappa[c];
    const auto pi = class_update_distribution(b);
    std::vector<double> v(b.size());
    for (std::size_t c = 0; c < b.size(); ++c) v[c] = class_imbalance_weight(pi[c], balance.epsilon);
    return v;
}

// Normalized imbalance weights over all C classes.
inline std::vector<double> v_bar_values(const BalanceState& balance,
                                        const std::vector<long>& kappa) {
    auto v = v_values(balance, kappa);
    double sum = 0.0;
    for (double x : v) sum += x;
    if (sum > 0)
        for (double& x : v) x /= sum;
    return v;
}

inline void validate_candidates(const std::vector<Candidate>& candidates,
                                const BalanceState& balance) {
    const int num_classes = static_cast<int>(balance.num_classes());
    std::set<ClientClassPair> seen;
    for (const auto& cand : candidates) {
        if (cand.class_id < 0 || cand.class_id >= num_classes)
            throw InvalidInputError("scheduler: candidate class " + std::to_string(cand.class_id) +
                                    " outside [0, " + std::to_string(num_classes) + ")");
        if (cand.client < 0) throw InvalidInputError("scheduler: negative client index");
        if (!seen.insert({cand.client, cand.class_id}).second)
            throw InvalidInputError("scheduler: duplicate candidate pair");
    }
}

inline double objective_from_indices(const std::vector<std::size_t>& selected,
                                     const std::vector<Candidate>& candidates,
                                     const std::vector<double>& r_bar,
                                     const BalanceState& balance, const ScoreWeights& weights) {
    std::vector<long> kappa(balance.num_classes(), 0);
    for (std::size_t i : selected) kappa[candidates[i].class_id]++;
    const auto v_bar = v_bar_values(balance, kappa);
    double f = 0.0;
    for (std::size_t i : selected)
        f += weights.alpha * r_bar[i] + weights.beta * v_bar[candidates[i].class_id];
    return f;
}

inline int client_cap(const Budgets& budgets, int client) {
    if (client < static_cast<int>(budgets.per_client.size())) return budgets.per_client[client];
    throw InvalidInputError("scheduler: client " + std::to_string(client) +
                            " has no per-client budget entry");
}

}  // namespace detail

// Priority metric U = alpha * R_bar + beta * V_bar per candidate, with V from
// the balance state at round entry.
inline std::vector<double> priority_scores(const std::vector<Candidate>& candidates,
                                           const BalanceState& balance,
                                           const ScoreWeights& weights) {
    if (candidates.empty()) throw InvalidInputError("priority_scores: no candidates");
    weights.validate();
    detail::validate_candidates(candidates, balance);
    const auto r_bar = detail::r_bar_scores(candidates);
    const auto v_bar = detail::v_bar_values(balance, std::vector<long>(balance.num_classes(), 0));
    std::vector<double> u(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        u[i] = weights.alpha * r_bar[i] + weights.beta * v_bar[candidates[i].class_id];
    return u;
}

// F(S): per-pair priority where the imbalance weights are recomputed with the
// in-round selection counts of S folded into the balance state.
inline double objective_value(const std::vector<ClientClassPair>& selected,
                              const std::vector<Candidate>& candidates,
                              const BalanceState& balance, const ScoreWeights& weights) {
    weights.validate();
    detail::validate_candidates(candidates, balance);
    const auto r_bar = detail::r_bar_scores(candidates);
    std::map<ClientClassPair, std::size_t> index;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        index[{candidates[i].client, candidates[i].class_id}] = i;
    std::vector<std::size_t> idx;
    for (const auto& p : selected) {
        auto it = index.find(p);
        if (it == index.end())
            throw InvalidInputError("objective_value: selected pair is not a candidate");
        idx.push_back(it->second);
    }
    return detail::objective_from_indices(idx, candidates, r_bar, balance, weights);
}

// Sequential marginal-gain greedy: repeatedly add the feasible pair with the
// largest exact gain F(S + pair) - F(S); ties go to the smaller (client,
// class); stops on budget exhaustion, an empty feasible set, or when the best
// gain is not positive.
inline Schedule smg_schedule(const std::vector<Candidate>& candidates,
                             const BalanceState& balance, const Budgets& budgets,
                             const ScoreWeights& weights) {
    budgets.validate();
    weights.validate();
    detail::validate_candidates(candidates, balance);
    const auto r_bar = detail::r_bar_scores(candidates);

    // Candidate evaluation order carries the lexicographic tie-break.
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::make_pair(candidates[a].client, candidates[a].class_id) <
               std::make_pair(candidates[b].client, candidates[b].class_id);
    });

    std::vector<std::size_t> selected;
    std::vector<bool> in_s(candidates.size(), false);
    std::map<int, int> per_client_count;
    double f_current = 0.0;

    while (static_cast<int>(selected.size()) < budgets.global) {
        std::optional<std::size_t> best;
        double best_delta = 0.0;
        for (std::size_t i : order) {
            if (in_s[i]) continue;
            if (per_client_count[candidates[i].client] >=
                detail::client_cap(budgets, candidates[i].client))
                continue;
            selected.push_back(i);
            const double f_next =
                detail::objective_from_indices(selected, candidates, r_bar, balance, weights);
            selected.pop_back();
            const double delta = f_next - f_current;
            if (!best || delta > best_delta) {
                best = i;
                best_delta = delta;
            }
        }
        if (!best || best_delta <= 0.0) break;
        selected.push_back(*best);
        in_s[*best] = true;
        per_client_count[candidates[*best].client]++;
        f_current += best_delta;
    }

    Schedule s;
    for (std::size_t i : selected)
        s.selection_order.push_back({candidates[i].client, candidates[i].class_id});
    s.objective = detail::objective_from_indices(selected, candidates, r_bar, balance, weights);
    return s;
}

inline constexpr std::size_t kBruteForceGuard = 22;

// Exhaustive maximizer of F over all feasible subsets. Ties resolve to the
// lexicographically smallest sorted pair list.
inline Schedule brute_force_schedule(const std::vector<Candidate>& candidates,
                                     const BalanceState& balance, const Budgets& budgets,
                                     const ScoreWeights& weights) {
    budgets.validate();
    weights.validate();
    detail::validate_candidates(candidates, balance);
    if (candidates.size() > kBruteForceGuard)
        throw InvalidInputError("brute_force_schedule: " + std::to_string(candidates.size()) +
                                " candidates exceed the enumeration guard of " +
                                std::to_string(kBruteForceGuard));
    const auto r_bar = detail::r_bar_scores(candidates);

    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::make_pair(candidates[a].client, candidates[a].class_id) <
               std::make_pair(candidates[b].client, candidates[b].class_id);
    });

    std::vector<std::size_t> current;
    std::map<int, int> per_client_count;
    double best_f = 0.0;
    std::vector<std::size_t> best_set;  // empty set has F = 0
    bool have_best = true;

    auto consider = [&](const std::vector<std::size_t>& s) {
        const double f = detail::objective_from_indices(s, candidates, r_bar, balance, weights);
        auto to_pairs = [&](const std::vector<std::size_t>& v) {
            std::vector<ClientClassPair> p;
            for (std::size_t i : v) p.push_back({candidates[i].client, candidates[i].class_id});
            std::sort(p.begin(), p.end());
            return p;
        };
        if (!have_best || f > best_f ||
            (f == best_f && to_pairs(s) < to_pairs(best_set))) {
            best_f = f;
            best_set = s;
            have_best = true;
        }
    };

    auto dfs = [&](auto&& self, std::size_t pos) -> void {
        if (pos == order.size()) {
            consider(current);
            return;
        }
        self(self, pos + 1);  // exclude
        const Candidate& cand = candidates[order[pos]];
        if (static_cast<int>(current.size()) < budgets.global &&
            per_client_count[cand.client] < detail::client_cap(budgets, cand.client)) {
            current.push_back(order[pos]);
            per_client_count[cand.client]++;
            self(self, pos + 1);  // include
            per_client_count[cand.client]--;
            current.pop_back();
        }
    };
    dfs(dfs, 0);

    Schedule s;
    std::sort(best_set.begin(), best_set.end(), [&](std::size_t a, std::size_t b) {
        return std::make_pair(candidates[a].client, candidates[a].class_id) <
               std::make_pair(candidates[b].client, candidates[b].class_id);
    });
    for (std::size_t i : best_set)
        s.selection_order.push_back({candidates[i].client, candidates[i].class_id});
    s.objective = best_f;
    return s;
}

enum class BaselinePolicy { rs, so, bo };

// Two-stage baseline selection: each client nominates up to its computation
// cap, then the server keeps up to the communication cap. RS draws uniformly,
// SO prefers large sample counts, BO prefers rarely-updated classes.
inline Schedule baseline_schedule(BaselinePolicy policy, const std::vector<Candidate>& candidates,
                                  const BalanceState& balance, const Budgets& budgets, Rng& rng) {
    budgets.validate();
    detail::validate_candidates(candidates, balance);

    std::map<int, std::vector<std::size_t>> by_client;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        by_client[candidates[i].client].push_back(i);
    for (auto& [k, v] : by_client)
        std::sort(v.begin(), v.end(),
                  [&](std::size_t a, std::size_t b) { return candidates[a].class_id < candidates[b].class_id; });

    std::vector<std::size_t> nominated;
    for (auto& [client, v] : by_client) {
        const std::size_t cap = static_cast<std::size_t>(detail::client_cap(budgets, client));
        const std::size_t take = std::min(cap, v.size());
        std::vector<std::size_t> chosen;
        switch (policy) {
            case BaselinePolicy::rs: {
                for (std::size_t pick : rng.sample_indices(v.size(), take))
                    chosen.push_back(v[pick]);
                break;
            }
            case BaselinePolicy::so: {
                auto sorted = v;
                std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
                    return candidates[a].n_samples > candidates[b].n_samples;
                });
                chosen.assign(sorted.begin(), sorted.begin() + take);
                break;
            }
            case BaselinePolicy::bo: {
                auto sorted = v;
                std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
                    return balance.b_cum[candidates[a].class_id] <
                           balance.b_cum[candidates[b].class_id];
                });
                chosen.assign(sorted.begin(), sorted.begin() + take);
                break;
            }
        }
        std::sort(chosen.begin(), chosen.end());
        nominated.insert(nominated.end(), chosen.begin(), chosen.end());
    }
    std::sort(nominated.begin(), nominated.end(), [&](std::size_t a, std::size_t b) {
        return std::make_pair(candidates[a].client, candidates[a].class_id) <
               std::make_pair(candidates[b].client, candidates[b].class_id);
    });

    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(budgets.global),
                                                   nominated.size());
    std::vector<std::size_t> selected;
    switch (policy) {
        case BaselinePolicy::rs: {
            for (std::size_t pick : rng.sample_indices(nominated.size(), take))
                selected.push_back(nominated[pick]);
            break;
        }
        case BaselinePolicy::so: {
            auto sorted = nominated;
            std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
                return candidates[a].n_samples > candidates[b].n_samples;
            });
            selected.assign(sorted.begin(), sorted.begin() + take);
            break;
        }
        case BaselinePolicy::bo: {
            auto sorted = nominated;
            std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
                return balance.b_cum[candidates[a].class_id] <
                       balance.b_cum[candidates[b].class_id];
            });
            selected.assign(sorted.begin(), sorted.begin() + take);
            break;
        }
    }

    Schedule s;
    for (std::size_t i : selected)
        s.selection_order.push_back({candidates[i].client, candidates[i].class_id});
    ScoreWeights default_weights;  // baselines do not optimize F; report it anyway
    s.objective = objective_value(s.selection_order, candidates, balance, default_weights);
    return s;
}

// B_c += number of selected pairs of class c.
inline BalanceState advance_balance(const BalanceState& balance, const Schedule& schedule) {
    BalanceState next = balance;
    for (const auto& [k, c] : schedule.selection_order) {
        if (c < 0 || c >= static_cast<int>(next.b_cum.size()))
            throw InvalidInputError("advance_balance: class index out of range");
        next.b_cum[c]++;
    }
    return next;
}

// ---------------------------------------------------------------------------
// Instance records (line-delimited) and the benchmark generator
// ---------------------------------------------------------------------------

struct SchedInstance {
    std::vector<Candidate> candidates;
    BalanceState balance;
    Budgets budgets;
    ScoreWeights weights;
};

inline void write_instance(std::ostream& os, const SchedInstance& inst) {
    char buf[96];
    os << "instance\n";
    std::snprintf(buf, sizeof buf, "weights %.17g %.17g %.17g\n", inst.weights.alpha,
                  inst.weights.beta, inst.balance.epsilon);
    os << buf;
    os << "budget global " << inst.budgets.global << "\n";
    for (std::size_t k = 0; k < inst.budgets.per_client.size(); ++k)
        os << "budget client " << k << " " << inst.budgets.per_client[k] << "\n";
    for (std::size_t c = 0; c < inst.balance.b_cum.size(); ++c)
        os << "balance " << c << " " << inst.balance.b_cum[c] << "\n";
    for (const auto& cand : inst.candidates)
        os << "candidate " << cand.client << " " << cand.class_id << " " << cand.n_samples << "\n";
    os << "end\n";
}

inline std::vector<SchedInstance> read_instances(std::istream& is) {
    std::vector<SchedInstance> out;
    std::optional<SchedInstance> cur;
    std::map<int, int> client_caps;
    std::map<int, long> balances;
    std::string line;
    int line_no = 0;

    auto finish = [&]() {
        if (!cur) return;
        int max_client = -1;
        for (const auto& [k, v] : client_caps) max_client = std::max(max_client, k);
        for (const auto& cand : cur->candidates) max_client = std::max(max_client, cand.client);
        cur->budgets.per_client.assign(static_cast<std::size_t>(max_client + 1), 0);
        for (const auto& [k, v] : client_caps) cur->budgets.per_client[k] = v;
        int max_class = -1;
        for (const auto& [c, v] : balances) max_class = std::max(max_class, c);
        for (const auto& cand : cur->candidates) max_class = std::max(max_class, cand.class_id);
        cur->balance.b_cum.assign(static_cast<std::size_t>(max_class + 1), 0);
        for (const auto& [c, v] : balances) cur->balance.b_cum[c] = v;
        out.push_back(std::move(*cur));
        cur.reset();
        client_caps.clear();
        balances.clear();
    };

    while (std::getline(is, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string tok;
        if (!(ls >> tok) || tok[0] == '#') continue;
        auto fail = [&](const std::string& why) {
            throw InvalidInputError("instance file line " + std::to_string(line_no) + ": " + why);
        };
        if (tok == "instance") {
            finish();
            cur.emplace();
        } else if (tok == "end") {
            if (!cur) fail("end outside instance");
            finish();
        } else if (!cur) {
            fail("record outside instance block: " + tok);
        } else if (tok == "weights") {
            if (!(ls >> cur->weights.alpha >> cur->weights.beta >> cur->balance.epsilon))
                fail("weights needs alpha beta epsilon");
        } else if (tok == "budget") {
            std::string kind;
            ls >> kind;
            if (kind == "global") {
                if (!(ls >> cur->budgets.global)) fail("budget global needs a value");
            } else if (kind == "client") {
                int k, cap;
                if (!(ls >> k >> cap)) fail("budget client needs index and cap");
                client_caps[k] = cap;
            } else {
                fail("unknown budget kind: " + kind);
            }
        } else if (tok == "balance") {
            int c;
            long b;
            if (!(ls >> c >> b)) fail("balance needs class and count");
            balances[c] = b;
        } else if (tok == "candidate") {
            Candidate cand;
            if (!(ls >> cand.client >> cand.class_id >> cand.n_samples))
                fail("candidate needs client class count");
            cur->candidates.push_back(cand);
        } else {
            fail("unknown record: " + tok);
        }
    }
    finish();
    return out;
}

struct InstanceGenParams {
    int clients = 3;
    int classes = 4;
    long n_max = 100;            // sample counts drawn from [1, n_max]
    long b_max = 20;             // initial per-class update counts from [0, b_max]
    int cop_max = 3;             // per-client caps from [1, cop_max]
    int com_min = 1;
    int com_max = 6;
    double alpha = 0.5;
    double beta = 0.5;
    double epsilon = 1e-8;
    double candidate_prob = 0.7;  // probability a (client, class) pair is present
};

inline SchedInstance random_instance(Rng& rng, const InstanceGenParams& p) {
    SchedInstance inst;
    inst.weights = {p.alpha, p.beta};
    inst.balance.epsilon = p.epsilon;
    inst.balance.b_cum.resize(static_cast<std::size_t>(p.classes));
    for (auto& b : inst.balance.b_cum) b = static_cast<long>(rng.below(p.b_max + 1));
    inst.budgets.global = rng.uniform_int(p.com_min, p.com_max);
    inst.budgets.per_client.resize(static_cast<std::size_t>(p.clients));
    for (auto& cap : inst.budgets.per_client) cap = rng.uniform_int(1, p.cop_max);
    for (int k = 0; k < p.clients; ++k)
        for (int c = 0; c < p.classes; ++c)
            if (rng.uniform() < p.candidate_prob)
                inst.candidates.push_back(
                    {k, c, 1 + static_cast<long>(rng.below(static_cast<std::uint64_t>(p.n_max)))});
    // Keep at least one candidate so instances are never vacuous.
    if (inst.candidates.empty())
        inst.candidates.push_back({0, 0, 1 + static_cast<long>(rng.below(p.n_max))});
    return inst;
}

}  // namespace modiad
