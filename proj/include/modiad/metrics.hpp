#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "modiad/error.hpp"
#include "modiad/matrix.hpp"

namespace modiad {

// Image-level scores with binary labels (true = anomalous).
struct ScoredSet {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
};

// Pixel-level inputs: fused anomaly map per sample plus the ground-truth
// region mask (empty for normal samples).
struct SegmentationSample {
    Matrix map;                      // [P x P]
    std::vector<std::uint8_t> mask;  // P*P row-major, empty when normal
};

struct SegmentationSet {
    std::vector<SegmentationSample> samples;
};

// AUROC as the rank statistic: the probability that a random anomalous score
// exceeds a random normal one, ties counting one half. Equals the trapezoidal
// ROC integral.
inline double auroc(const ScoredSet& set) {
    if (set.scores.size() != set.labels.size())
        throw InvalidInputError("auroc: scores and labels differ in length");
    const std::size_t n = set.scores.size();
    std::size_t n_pos = 0;
    for (auto l : set.labels) n_pos += l ? 1 : 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw DegenerateLabelsError("auroc: needs at least one anomalous and one normal label");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return set.scores[a] < set.scores[b]; });

    // Average ranks across ties, 1-based.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && set.scores[idx[j]] == set.scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t t = i; t < j; ++t)
            if (set.labels[idx[t]]) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

namespace detail {

// 4-connected components of the true cells of a P x P mask. Returns a label
// grid with -1 for background and the number of components found.
inline int label_components(const std::vector<std::uint8_t>& mask, std::size_t rows,
                            std::size_t cols, std::vector<int>& labels) {
    labels.assign(mask.size(), -1);
    int next = 0;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask[start] || labels[start] >= 0) continue;
        stack.push_back(start);
        labels[start] = next;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const std::size_t r = p / cols, c = p % cols;
            const std::size_t nbrs[4] = {r > 0 ? p - cols : SIZE_MAX,
                                         r + 1 < rows ? p + cols : SIZE_MAX,
                                         c > 0 ? p - 1 : SIZE_MAX,
                                         c + 1 < cols ? p + 1 : SIZE_MAX};
            for (std::size_t q : nbrs) {
                if (q == SIZE_MAX || !mask[q] || labels[q] >= 0) continue;
                labels[q] = next;
                stack.push_back(q);
            }
        }
        ++next;
    }
    return next;
}

struct ProPixel {
    double value;
    int region = -1;  // global region id, -1 for anomaly-free pixels
};

inline void collect_pro_pixels(const SegmentationSet& set, std::vector<ProPixel>& pixels,
                               std::vector<std::size_t>& region_sizes, std::size_t& n_free) {
    pixels.clear();
    region_sizes.clear();
    n_free = 0;
    for (const auto& s : set.samples) {
        const std::size_t n = s.map.size();
        if (!s.mask.empty() && s.mask.size() != n)
            throw InvalidInputError("aupro: map and mask shapes differ");
        std::vector<int> labels;
        int n_local = 0;
        if (!s.mask.empty())
            n_local = label_components(s.mask, s.map.rows(), s.map.cols(), labels);
        const int base = static_cast<int>(region_sizes.size());
        region_sizes.resize(region_sizes.size() + static_cast<std::size_t>(n_local), 0);
        for (std::size_t p = 0; p < n; ++p) {
            ProPixel px;
            px.value = s.map.data()[p];
            if (!s.mask.empty() && s.mask[p]) {
                px.region = base + labels[p];
                region_sizes[static_cast<std::size_t>(px.region)]++;
            } else {
                ++n_free;
            }
            pixels.push_back(px);
        }
    }
}

}  // namespace detail

// Area under the per-region-overlap curve against false positive rate,
// integrated on [0, fpr_limit] and normalized by the limit. Thresholds sweep
// the exact observed map values; regions pool across the whole set.
inline double aupro(const SegmentationSet& set, double fpr_limit) {
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0))
        throw ConfigError("aupro: fpr_limit must be in (0, 1]");
    std::vector<detail::ProPixel> pixels;
    std::vector<std::size_t> region_sizes;
    std::size_t n_free = 0;
    detail::collect_pro_pixels(set, pixels, region_sizes, n_free);
    if (region_sizes.empty())
        throw DegenerateLabelsError("aupro: no ground-truth anomalous region");
    if (n_free == 0)
        throw DegenerateLabelsError("aupro: no anomaly-free pixel");

    std::sort(pixels.begin(), pixels.end(),
              [](const detail::ProPixel& a, const detail::ProPixel& b) { return a.value > b.value; });

    // Sweep descending distinct values; maintain the running mean region
    // overlap and false positive count.
    const double n_regions = static_cast<double>(region_sizes.size());
    double overlap_sum = 0.0;  // sum over regions of hit fraction
    std::size_t false_pos = 0;
    double prev_x = 0.0, prev_y = 0.0;
    double area = 0.0;
    bool done = false;

    std::size_t i = 0;
    while (i < pixels.size() && !done) {
        std::size_t j = i;
        while (j < pixels.size() && pixels[j].value == pixels[i].value) ++j;
        for (std::size_t t = i; t < j; ++t) {
            if (pixels[t].region >= 0)
                overlap_sum += 1.0 / static_cast<double>(
                                         region_sizes[static_cast<std::size_t>(pixels[t].region)]);
            else
                ++false_pos;
        }
        const double x = static_cast<double>(false_pos) / static_cast<double>(n_free);
        const double y = overlap_sum / n_regions;
        if (x <= fpr_limit) {
            area += (x - prev_x) * 0.5 * (y + prev_y);
            prev_x = x;
            prev_y = y;
        } else {
            const double t = (fpr_limit - prev_x) / (x - prev_x);
            const double y_lim = prev_y + t * (y - prev_y);
            area += (fpr_limit - prev_x) * 0.5 * (y_lim + prev_y);
            done = true;
        }
        i = j;
    }
    return area / fpr_limit;
}

// ---------------------------------------------------------------------------
// Per-class report assembly
// ---------------------------------------------------------------------------

struct ClassMetrics {
    double i_auroc = 0.0;
    std::vector<double> aupro_at;  // one value per configured FPR limit
};

struct MetricsReport {
    std::vector<int> class_ids;
    std::vector<ClassMetrics> per_class;
    ClassMetrics mean;
    std::vector<double> fpr_limits;
};

// Builds the per-class table plus the unweighted class mean from already
// scored/segmented inputs, keyed by class id.
inline MetricsReport metrics_report(const std::map<int, ScoredSet>& scored,
                                    const std::map<int, SegmentationSet>& segmented,
                                    const std::vector<double>& fpr_limits) {
    MetricsReport report;
    report.fpr_limits = fpr_limits;
    for (const auto& [class_id, set] : scored) {
        ClassMetrics m;
        try {
            m.i_auroc = auroc(set);
            const auto seg_it = segmented.find(class_id);
            for (double limit : fpr_limits)
                m.aupro_at.push_back(seg_it == segmented.end() ? 0.0
                                                               : aupro(seg_it->second, limit));
        } catch (const DegenerateLabelsError& e) {
            throw DegenerateLabelsError("class " + std::to_string(class_id) + ": " + e.what());
        }
        report.class_ids.push_back(class_id);
        report.per_class.push_back(std::move(m));
    }
    if (!report.per_class.empty()) {
        report.mean.aupro_at.assign(fpr_limits.size(), 0.0);
        for (const auto& m : report.per_class) {
            report.mean.i_auroc += m.i_auroc;
            for (std::size_t i = 0; i < m.aupro_at.size(); ++i)
                report.mean.aupro_at[i] += m.aupro_at[i];
        }
        const double inv = 1.0 / static_cast<double>(report.per_class.size());
        report.mean.i_auroc *= inv;
        for (auto& v : report.mean.aupro_at) v *= inv;
    }
    return report;
}

}  // namespace modiad
