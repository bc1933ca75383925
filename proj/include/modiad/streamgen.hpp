#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "modiad/error.hpp"
#include "modiad/matrix.hpp"
#include "modiad/nn.hpp"
#include "modiad/rng.hpp"

namespace modiad {

struct ClassGeneratorConfig {
    std::size_t d2 = 16;
    std::size_t d3 = 12;
    std::size_t grid = 8;            // P x P patches per sample
    double noise_sigma = 0.3;        // additive noise on the 3D side
    double cond_bound = 2.0;         // bound on the relation's condition number
    double mean_scale = 1.0;         // spread of per-class 2D mean vectors
    double feature_scale = 1.0;      // per-patch spread around the class mean
    double offset_scale = 0.5;       // spread of the 3D offset
    double spectrum_decay_max = 16.0;// per-class 2D covariance condition number
                                     // drawn log-uniform in [1, this]; classes
                                     // with decayed spectra train slower
};

namespace detail {

// Random orthogonal matrix: Gram-Schmidt on Gaussian columns.
inline Matrix random_orthogonal(std::size_t n, Rng& rng) {
    Matrix q(n, n);
    for (std::size_t col = 0; col < n; ++col) {
        std::vector<double> v(n);
        for (;;) {
            for (auto& x : v) x = rng.normal();
            for (std::size_t prev = 0; prev < col; ++prev) {
                double proj = 0.0;
                for (std::size_t i = 0; i < n; ++i) proj += v[i] * q(i, prev);
                for (std::size_t i = 0; i < n; ++i) v[i] -= proj * q(i, prev);
            }
            const double nv = norm2(v.data(), n);
            if (nv > 1e-6) {
                for (std::size_t i = 0; i < n; ++i) q(i, col) = v[i] / nv;
                break;
            }
        }
    }
    return q;
}

}  // namespace detail

// Synthetic stand-in for a frozen feature-extractor pair: class-conditional
// 2D features plus a planted linear 2D->3D relation with optional noise.
class ClassGenerator {
public:
    ClassGenerator(int class_id, const ClassGeneratorConfig& cfg, Rng& rng)
        : class_id_(class_id), cfg_(cfg) {
        // relation = Q1 * S * Q2^T with singular values inside
        // [1/sqrt(bound), sqrt(bound)], so the condition number is bounded by
        // construction.
        const Matrix q1 = detail::random_orthogonal(cfg.d3, rng);
        const Matrix q2 = detail::random_orthogonal(cfg.d2, rng);
        const double lo = 1.0 / std::sqrt(cfg.cond_bound);
        const double hi = std::sqrt(cfg.cond_bound);
        Matrix s(cfg.d3, cfg.d2);
        for (std::size_t i = 0; i < std::min(cfg.d3, cfg.d2); ++i) s(i, i) = rng.uniform(lo, hi);
        relation_ = matmul(matmul(q1, s), [&] {
            Matrix q2t(cfg.d2, cfg.d2);
            for (std::size_t i = 0; i < cfg.d2; ++i)
                for (std::size_t j = 0; j < cfg.d2; ++j) q2t(i, j) = q2(j, i);
            return q2t;
        }());
        offset_.resize(cfg.d3);
        for (auto& v : offset_) v = cfg.offset_scale * rng.normal();
        mean2d_.resize(cfg.d2);
        for (auto& v : mean2d_) v = cfg.mean_scale * rng.normal();
        // Per-dimension 2D scales with a class-specific decayed spectrum,
        // normalized to unit mean square so overall feature energy is stable.
        dim_scales_.assign(cfg.d2, 1.0);
        if (cfg.spectrum_decay_max > 1.0 && cfg.d2 > 1) {
            const double decay =
                std::exp(rng.uniform(0.0, std::log(cfg.spectrum_decay_max)));
            double energy = 0.0;
            for (std::size_t j = 0; j < cfg.d2; ++j) {
                dim_scales_[j] =
                    std::pow(decay, -static_cast<double>(j) / static_cast<double>(cfg.d2 - 1));
                energy += dim_scales_[j] * dim_scales_[j];
            }
            const double rms = std::sqrt(energy / static_cast<double>(cfg.d2));
            for (auto& s : dim_scales_) s /= rms;
        }
    }

    int class_id() const { return class_id_; }
    const ClassGeneratorConfig& config() const { return cfg_; }
    const Matrix& relation() const { return relation_; }
    const std::vector<double>& offset() const { return offset_; }
    std::size_t patches() const { return cfg_.grid * cfg_.grid; }

    // 3D response of one 2D patch row under the planted relation, without noise.
    std::vector<double> map_row(const double* e2d_row) const {
        std::vector<double> out(cfg_.d3, 0.0);
        for (std::size_t i = 0; i < cfg_.d3; ++i)
            out[i] = dot(relation_.row_ptr(i), e2d_row, cfg_.d2) + offset_[i];
        return out;
    }

private:
    friend FeatureSample generate_normal(const ClassGenerator&, Rng&);
    int class_id_;
    ClassGeneratorConfig cfg_;
    Matrix relation_;                 // [d3 x d2]
    std::vector<double> offset_;      // [d3]
    std::vector<double> mean2d_;      // [d2]
    std::vector<double> dim_scales_;  // [d2]
};

inline FeatureSample generate_normal(const ClassGenerator& gen, Rng& rng) {
    const auto& cfg = gen.cfg_;
    const std::size_t n = gen.patches();
    FeatureSample s;
    s.class_id = gen.class_id();
    s.e2d = Matrix(n, cfg.d2);
    s.e3d = Matrix(n, cfg.d3);
    for (std::size_t p = 0; p < n; ++p) {
        double* row2 = s.e2d.row_ptr(p);
        for (std::size_t j = 0; j < cfg.d2; ++j)
            row2[j] = gen.mean2d_[j] + cfg.feature_scale * gen.dim_scales_[j] * rng.normal();
        const auto mapped = gen.map_row(row2);
        double* row3 = s.e3d.row_ptr(p);
        for (std::size_t j = 0; j < cfg.d3; ++j)
            row3[j] = mapped[j] + (cfg.noise_sigma > 0 ? cfg.noise_sigma * rng.normal() : 0.0);
    }
    return s;
}

enum class DefectKind { relation_swap, additive_offset, mixed };

struct DefectSpec {
    DefectKind kind = DefectKind::mixed;
    std::size_t min_size = 2;       // rectangle edge lengths, inclusive
    std::size_t max_size = 4;
    double offset_magnitude = 3.0;
    const ClassGenerator* swap_source = nullptr;  // planted relation of another class
};

// Normal sample with the planted relation broken inside one random rectangle;
// the mask marks the rectangle.
inline FeatureSample generate_anomalous(const ClassGenerator& gen, Rng& rng,
                                        const DefectSpec& defect) {
    const std::size_t grid = gen.config().grid;
    if (defect.min_size < 1 || defect.max_size < defect.min_size || defect.max_size > grid)
        throw InvalidInputError("generate_anomalous: defect rectangle must be non-empty and fit the grid");

    FeatureSample s = generate_normal(gen, rng);
    const std::size_t w = static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(defect.min_size), static_cast<int>(defect.max_size)));
    const std::size_t h = static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(defect.min_size), static_cast<int>(defect.max_size)));
    const std::size_t r0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(grid - h)));
    const std::size_t c0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(grid - w)));

    DefectKind kind = defect.kind;
    if (kind == DefectKind::mixed)
        kind = (defect.swap_source && rng.uniform() < 0.5) ? DefectKind::relation_swap
                                                           : DefectKind::additive_offset;
    if (kind == DefectKind::relation_swap && !defect.swap_source)
        throw ConfigError("generate_anomalous: relation_swap defect needs a swap source");

    std::vector<double> direction;
    if (kind == DefectKind::additive_offset) {
        direction.resize(gen.config().d3);
        double nrm = 0.0;
        while (nrm < 1e-9) {
            for (auto& v : direction) v = rng.normal();
            nrm = norm2(direction.data(), direction.size());
        }
        for (auto& v : direction) v *= defect.offset_magnitude / nrm;
    }

    s.mask.assign(grid * grid, 0);
    const double sigma = gen.config().noise_sigma;
    for (std::size_t r = r0; r < r0 + h; ++r) {
        for (std::size_t c = c0; c < c0 + w; ++c) {
            const std::size_t p = r * grid + c;
            s.mask[p] = 1;
            double* row3 = s.e3d.row_ptr(p);
            if (kind == DefectKind::relation_swap) {
                const auto swapped = defect.swap_source->map_row(s.e2d.row_ptr(p));
                for (std::size_t j = 0; j < swapped.size(); ++j)
                    row3[j] = swapped[j] + (sigma > 0 ? sigma * rng.normal() : 0.0);
            } else {
                for (std::size_t j = 0; j < direction.size(); ++j) row3[j] += direction[j];
            }
        }
    }
    s.is_anomalous = true;
    return s;
}

// ---------------------------------------------------------------------------
// Client/class assignment
// ---------------------------------------------------------------------------

struct Assignment {
    std::vector<std::vector<int>> client_classes;  // per client, sorted
    std::vector<std::vector<int>> class_clients;   // inverse view, sorted
};

// Structured Non-IID assignment: every client holds exactly `per_client`
// distinct classes and every class is held by exactly `share` clients.
inline Assignment assign_classes(int clients, int classes, int per_client, int share, Rng& rng) {
    if (clients <= 0 || classes <= 0 || per_client <= 0 || share <= 0)
        throw ConfigError("assign_classes: all topology values must be positive");
    if (per_client > classes)
        throw ConfigError("assign_classes: per_client exceeds the class count");
    if (static_cast<long>(clients) * per_client != static_cast<long>(classes) * share)
        throw ConfigError("assign_classes: infeasible topology, clients*per_client = " +
                          std::to_string(static_cast<long>(clients) * per_client) +
                          " but classes*share = " + std::to_string(static_cast<long>(classes) * share));

    std::vector<int> slots;
    for (int c = 0; c < classes; ++c)
        for (int s = 0; s < share; ++s) slots.push_back(c);

    auto deal = [&](const std::vector<int>& order) {
        std::vector<std::vector<int>> per_k(static_cast<std::size_t>(clients));
        for (int k = 0; k < clients; ++k) {
            std::set<int> seen;
            for (int i = 0; i < per_client; ++i) {
                const int c = order[static_cast<std::size_t>(k * per_client + i)];
                if (!seen.insert(c).second) return std::vector<std::vector<int>>{};
                per_k[static_cast<std::size_t>(k)].push_back(c);
            }
        }
        return per_k;
    };

    std::vector<std::vector<int>> per_k;
    for (int attempt = 0; attempt < 200 && per_k.empty(); ++attempt) {
        std::vector<int> order = slots;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        per_k = deal(order);
    }
    if (per_k.empty()) {
        // Systematic fallback: consecutive classes modulo C under a random
        // relabeling. Always valid when per_client <= classes.
        std::vector<int> relabel(static_cast<std::size_t>(classes));
        for (int c = 0; c < classes; ++c) relabel[static_cast<std::size_t>(c)] = c;
        for (std::size_t i = relabel.size(); i > 1; --i)
            std::swap(relabel[i - 1], relabel[rng.below(i)]);
        per_k.assign(static_cast<std::size_t>(clients), {});
        for (int k = 0; k < clients; ++k)
            for (int i = 0; i < per_client; ++i)
                per_k[static_cast<std::size_t>(k)].push_back(
                    relabel[static_cast<std::size_t>((k * per_client + i) % classes)]);
    }

    Assignment a;
    a.client_classes = std::move(per_k);
    for (auto& v : a.client_classes) std::sort(v.begin(), v.end());
    a.class_clients.assign(static_cast<std::size_t>(classes), {});
    for (int k = 0; k < clients; ++k)
        for (int c : a.client_classes[static_cast<std::size_t>(k)])
            a.class_clients[static_cast<std::size_t>(c)].push_back(k);
    return a;
}

// ---------------------------------------------------------------------------
// Streaming pools
// ---------------------------------------------------------------------------

// One client's per-class long-term stock and accumulated local samples.
// Accumulated samples only ever grow.
struct ClientPool {
    struct ClassPool {
        long remaining = 0;
        std::vector<FeatureSample> samples;
        const ClassGenerator* generator = nullptr;
    };
    std::map<int, ClassPool> classes;

    long count(int class_id) const {
        const auto it = classes.find(class_id);
        return it == classes.end() ? 0 : static_cast<long>(it->second.samples.size());
    }
};

// Dirichlet-composed packet of at most `cap` fresh samples, respecting each
// class's remaining stock. Returns the per-class counts actually drawn,
// ordered by class id; stocks are decremented and samples appended.
inline std::vector<std::pair<int, long>> draw_packet(ClientPool& pool, double alpha_dirichlet,
                                                     long cap, Rng& rng) {
    if (cap < 0) throw InvalidInputError("draw_packet: cap must be >= 0");
    std::vector<int> eligible;
    long total_remaining = 0;
    for (const auto& [c, cp] : pool.classes)
        if (cp.remaining > 0) {
            eligible.push_back(c);
            total_remaining += cp.remaining;
        }
    if (eligible.empty() || cap == 0) return {};

    const long target = std::min(cap, total_remaining);
    const auto proportions = rng.dirichlet(alpha_dirichlet, eligible.size());

    // Largest-remainder rounding under per-class stock limits.
    std::vector<long> take(eligible.size(), 0);
    std::vector<double> ideal(eligible.size(), 0.0);
    long assigned = 0;
    for (std::size_t i = 0; i < eligible.size(); ++i) {
        ideal[i] = proportions[i] * static_cast<double>(target);
        take[i] = std::min(static_cast<long>(std::floor(ideal[i])),
                           pool.classes.at(eligible[i]).remaining);
        assigned += take[i];
    }
    while (assigned < target) {
        // Largest remainder among classes with stock headroom; remainders can
        // go below -1 when one class absorbs a large shortfall.
        std::size_t best = SIZE_MAX;
        double best_rem = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < eligible.size(); ++i) {
            if (take[i] >= pool.classes.at(eligible[i]).remaining) continue;
            const double rem = ideal[i] - static_cast<double>(take[i]);
            if (rem > best_rem) {
                best_rem = rem;
                best = i;
            }
        }
        take[best]++;  // total stock >= target, so a class with headroom exists
        assigned++;
    }

    std::vector<std::pair<int, long>> drawn;
    for (std::size_t i = 0; i < eligible.size(); ++i) {
        if (take[i] == 0) continue;
        auto& cp = pool.classes.at(eligible[i]);
        for (long s = 0; s < take[i]; ++s)
            cp.samples.push_back(generate_normal(*cp.generator, rng));
        cp.remaining -= take[i];
        drawn.push_back({eligible[i], take[i]});
    }
    return drawn;
}

// ---------------------------------------------------------------------------
// Evaluation sets
// ---------------------------------------------------------------------------

struct EvalSets {
    std::map<int, std::vector<FeatureSample>> validation;
    std::map<int, std::vector<FeatureSample>> test;
};

// Fixed per-class validation and test sets drawn from dedicated seed streams,
// disjoint from all training streams by key. Each set holds n_normal normals
// followed by n_anomalous anomalous samples.
inline EvalSets build_eval_sets(const std::vector<ClassGenerator>& generators,
                                const DefectSpec& defect_base, long n_normal, long n_anomalous,
                                std::uint64_t master_seed) {
    if (n_normal < 1 || n_anomalous < 0)
        throw ConfigError("build_eval_sets: need n_normal >= 1 and n_anomalous >= 0");
    EvalSets sets;
    for (std::size_t ci = 0; ci < generators.size(); ++ci) {
        const ClassGenerator& gen = generators[ci];
        DefectSpec defect = defect_base;
        if (generators.size() > 1)
            defect.swap_source = &generators[(ci + 1) % generators.size()];
        else
            defect.swap_source = nullptr;
        for (int which = 0; which < 2; ++which) {
            Rng rng = substream(master_seed, StreamTag::eval_set,
                                static_cast<std::uint64_t>(gen.class_id()),
                                static_cast<std::uint64_t>(which));
            std::vector<FeatureSample> out;
            for (long i = 0; i < n_normal; ++i) out.push_back(generate_normal(gen, rng));
            for (long i = 0; i < n_anomalous; ++i)
                out.push_back(generate_anomalous(gen, rng, defect));
            (which == 0 ? sets.validation : sets.test)[gen.class_id()] = std::move(out);
        }
    }
    return sets;
}

// ---------------------------------------------------------------------------
// Dataset snapshots (line-delimited numeric format)
// ---------------------------------------------------------------------------
//
//   modiad-dataset 1
//   dims <d2> <d3> <grid>
//   count <n_samples>
// then per sample:
//   sample <class_id> <is_anomalous>
//   one line of d2 values per patch row (grid*grid lines)
//   one line of d3 values per patch row (grid*grid lines)
//   mask <run lengths>          (only for anomalous samples; alternating
//                                false/true run lengths, starting with false)

namespace detail {

inline void write_value_row(std::ostream& os, const double* row, std::size_t n) {
    char buf[32];
    for (std::size_t j = 0; j < n; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", row[j]);
        os << (j ? " " : "") << buf;
    }
    os << "\n";
}

}  // namespace detail

inline void write_dataset(std::ostream& os, const std::vector<FeatureSample>& samples,
                          std::size_t d2, std::size_t d3, std::size_t grid) {
    os << "modiad-dataset 1\n";
    os << "dims " << d2 << " " << d3 << " " << grid << "\n";
    os << "count " << samples.size() << "\n";
    for (const auto& s : samples) {
        if (s.e2d.rows() != grid * grid || s.e2d.cols() != d2 || s.e3d.cols() != d3)
            throw InvalidInputError("write_dataset: sample dims disagree with header");
        os << "sample " << s.class_id << " " << (s.is_anomalous ? 1 : 0) << "\n";
        for (std::size_t p = 0; p < s.e2d.rows(); ++p)
            detail::write_value_row(os, s.e2d.row_ptr(p), d2);
        for (std::size_t p = 0; p < s.e3d.rows(); ++p)
            detail::write_value_row(os, s.e3d.row_ptr(p), d3);
        if (s.is_anomalous) {
            os << "mask";
            std::size_t i = 0;
            bool expect = false;
            while (i < s.mask.size()) {
                std::size_t run = 0;
                while (i + run < s.mask.size() && (s.mask[i + run] != 0) == expect) ++run;
                os << " " << run;
                i += run;
                expect = !expect;
            }
            os << "\n";
        }
    }
}

inline std::vector<FeatureSample> read_dataset(std::istream& is, std::size_t* d2_out = nullptr,
                                               std::size_t* d3_out = nullptr,
                                               std::size_t* grid_out = nullptr) {
    std::string word;
    int version = 0;
    if (!(is >> word >> version) || word != "modiad-dataset" || version != 1)
        throw CorruptStreamError("read_dataset: bad header");
    std::size_t d2 = 0, d3 = 0, grid = 0, count = 0;
    if (!(is >> word >> d2 >> d3 >> grid) || word != "dims" || grid == 0)
        throw CorruptStreamError("read_dataset: bad dims line");
    if (!(is >> word >> count) || word != "count")
        throw CorruptStreamError("read_dataset: bad count line");
    if (d2_out) *d2_out = d2;
    if (d3_out) *d3_out = d3;
    if (grid_out) *grid_out = grid;

    std::vector<FeatureSample> out;
    const std::size_t patches = grid * grid;
    for (std::size_t si = 0; si < count; ++si) {
        FeatureSample s;
        int anom = 0;
        if (!(is >> word >> s.class_id >> anom) || word != "sample")
            throw CorruptStreamError("read_dataset: truncated at sample " + std::to_string(si));
        s.is_anomalous = anom != 0;
        s.e2d = Matrix(patches, d2);
        s.e3d = Matrix(patches, d3);
        for (auto& v : s.e2d.data())
            if (!(is >> v)) throw CorruptStreamError("read_dataset: truncated 2D block");
        for (auto& v : s.e3d.data())
            if (!(is >> v)) throw CorruptStreamError("read_dataset: truncated 3D block");
        if (s.is_anomalous) {
            if (!(is >> word) || word != "mask")
                throw CorruptStreamError("read_dataset: missing mask for anomalous sample");
            s.mask.assign(patches, 0);
            std::size_t at = 0;
            bool value = false;
            while (at < patches) {
                std::size_t run;
                if (!(is >> run) || at + run > patches)
                    throw CorruptStreamError("read_dataset: bad mask run-length encoding");
                if (value) std::fill(s.mask.begin() + at, s.mask.begin() + at + run, 1);
                at += run;
                value = !value;
            }
            bool any = false;
            for (auto m : s.mask) any = any || m;
            if (!any) throw CorruptStreamError("read_dataset: anomalous sample with empty mask");
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace modiad
