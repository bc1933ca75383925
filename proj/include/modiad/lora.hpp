#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "modiad/error.hpp"
#include "modiad/matrix.hpp"
#include "modiad/nn.hpp"
#include "modiad/rng.hpp"

namespace modiad {

enum class UpdateMode : std::uint8_t { full = 0, low_rank = 1 };

// Low-rank residual factors for one linear layer: delta_W = H * J.
struct LoraFactors {
    Matrix h;                        // [d_out x r]
    Matrix j;                        // [r x d_in]
    std::vector<double> bias_delta;  // [d_out] when biases are adapted, else empty
};

// Factors for every layer of both mappers of one class model.
struct LoraAdapter {
    std::vector<LoraFactors> to_3d;
    std::vector<LoraFactors> to_2d;
    std::size_t rank = 1;
};

struct LoraConfig {
    bool enabled = false;
    long t_warm = 10;          // rounds of forced full updates
    double gamma = 0.5;        // quality smoothing factor, in (0, 1]
    std::size_t rank = 6;      // low-rank dimension
    bool adapt_biases = false;

    void validate() const {
        if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("lora.gamma must be in (0, 1]");
        if (t_warm < 0) throw ConfigError("lora.t_warm must be >= 0");
        if (rank < 1) throw ConfigError("lora.rank must be >= 1");
    }
};

// Per-class controller state: smoothed quality (unset until first evaluation)
// and the current update mode.
struct ClassModeState {
    std::optional<double> q_smooth;
    UpdateMode mode = UpdateMode::full;
    bool base_frozen = false;
};

struct ModeState {
    std::vector<ClassModeState> classes;

    explicit ModeState(std::size_t n_classes = 0) : classes(n_classes) {}
};

// Exponential smoothing of the class quality score. Initialization rule:
// with no previous smoothed value the current observation is returned as-is.
inline double smooth_quality(double q_now, std::optional<double> q_prev_smooth, double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("smooth_quality: gamma must be in (0, 1]");
    if (!q_prev_smooth) return q_now;
    return gamma * q_now + (1.0 - gamma) * (*q_prev_smooth);
}

// Update-mode indicator per class: during warm-up everything is full; after
// warm-up a class switches to low-rank iff its smoothed quality is at least
// the average over classes. Classes with no observed quality yet stay full
// and are excluded from the average.
inline std::vector<UpdateMode> decide_mode(const std::vector<std::optional<double>>& q_smooth_all,
                                           long t, long t_warm) {
    std::vector<UpdateMode> modes(q_smooth_all.size(), UpdateMode::full);
    if (t < t_warm) return modes;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& q : q_smooth_all)
        if (q) {
            sum += *q;
            ++n;
        }
    if (n == 0) return modes;
    const double avg = sum / static_cast<double>(n);
    for (std::size_t c = 0; c < q_smooth_all.size(); ++c)
        if (q_smooth_all[c] && *q_smooth_all[c] >= avg) modes[c] = UpdateMode::low_rank;
    return modes;
}

namespace detail {

inline void check_rank(const Matrix& w, std::size_t rank, const char* where) {
    if (rank >= std::min(w.rows(), w.cols()))
        throw ConfigError(std::string(where) + ": rank " + std::to_string(rank) +
                          " must be < min(d_out, d_in) = " +
                          std::to_string(std::min(w.rows(), w.cols())));
}

inline std::vector<LoraFactors> make_factors(const MapperNet& net, std::size_t rank,
                                             bool adapt_biases, Rng& rng) {
    std::vector<LoraFactors> f;
    for (const auto& layer : net.layers) {
        check_rank(layer.weight, rank, "make_adapter");
        LoraFactors lf;
        // H gets Kaiming-scale entries and J starts at zero: the residual is
        // exactly zero at issue time while J's gradient (H^T dW) keeps the
        // same scale as a dense update.
        lf.h = Matrix(layer.weight.rows(), rank);
        const double scale = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
        for (double& v : lf.h.data()) v = scale * rng.normal();
        lf.j = Matrix(rank, layer.weight.cols());
        if (adapt_biases) lf.bias_delta.assign(layer.bias.size(), 0.0);
        f.push_back(std::move(lf));
    }
    return f;
}

// Effective weights W + H*J for one mapper.
inline std::vector<Matrix> effective_weights(const MapperNet& net,
                                             const std::vector<LoraFactors>& factors) {
    if (factors.size() != net.layers.size())
        throw InvalidInputError("lora: adapter layer count does not match net");
    std::vector<Matrix> w;
    w.reserve(net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        if (factors[l].h.rows() != net.layers[l].weight.rows() ||
            factors[l].j.cols() != net.layers[l].weight.cols() ||
            factors[l].h.cols() != factors[l].j.rows())
            throw InvalidInputError("lora: factor shapes do not match layer " + std::to_string(l));
        Matrix eff = net.layers[l].weight;
        eff += matmul(factors[l].h, factors[l].j);
        w.push_back(std::move(eff));
    }
    return w;
}

inline std::vector<std::vector<double>> effective_biases(const MapperNet& net,
                                                         const std::vector<LoraFactors>& factors) {
    std::vector<std::vector<double>> b;
    b.reserve(net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        std::vector<double> eb = net.layers[l].bias;
        if (!factors[l].bias_delta.empty())
            for (std::size_t i = 0; i < eb.size(); ++i) eb[i] += factors[l].bias_delta[i];
        b.push_back(std::move(eb));
    }
    return b;
}

inline MapperNet merged_net(const MapperNet& base, const std::vector<LoraFactors>& factors) {
    MapperNet out = base;
    auto w = effective_weights(base, factors);
    auto b = effective_biases(base, factors);
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        out.layers[l].weight = std::move(w[l]);
        out.layers[l].bias = std::move(b[l]);
    }
    return out;
}

}  // namespace detail

// Fresh adapter: H seeded Gaussian * 0.01, J = 0, so the initial residual is
// exactly zero and the adapted forward reproduces the base.
inline LoraAdapter make_adapter(const ClassModel& model, const LoraConfig& cfg, Rng& rng) {
    LoraAdapter a;
    a.rank = cfg.rank;
    a.to_3d = detail::make_factors(model.map_2d_to_3d, cfg.rank, cfg.adapt_biases, rng);
    a.to_2d = detail::make_factors(model.map_3d_to_2d, cfg.rank, cfg.adapt_biases, rng);
    return a;
}

// Forward with each weight replaced by W + H*J.
inline Matrix lora_forward(const MapperNet& base, const std::vector<LoraFactors>& factors,
                           const Matrix& input) {
    if (input.cols() != base.input_dim())
        throw InvalidInputError("lora_forward: input dimension mismatch");
    return detail::forward_traced(base, detail::effective_weights(base, factors),
                                  detail::effective_biases(base, factors), input, nullptr);
}

// Materialize W + H*J (and adapted biases) into a plain net.
inline MapperNet merge_adapter(const MapperNet& base, const std::vector<LoraFactors>& factors) {
    return detail::merged_net(base, factors);
}

// Class-level view with both mappers merged; used for scoring and as the
// effective model during adapter training.
inline ClassModel merged_model(const ClassModel& base, const LoraAdapter& adapter) {
    ClassModel out = base;
    out.map_2d_to_3d = detail::merged_net(base.map_2d_to_3d, adapter.to_3d);
    out.map_3d_to_2d = detail::merged_net(base.map_3d_to_2d, adapter.to_2d);
    return out;
}

namespace detail {

inline void lora_step(std::vector<LoraFactors>& factors, const MapperGrads& eff_grads, double eta,
                      bool adapt_biases) {
    for (std::size_t l = 0; l < factors.size(); ++l) {
        // d(H) = dW * J^T, d(J) = H^T * dW; dW is the effective-weight gradient.
        Matrix dh = matmul_bt(eff_grads.d_weight[l], factors[l].j);
        Matrix dj = matmul_at(factors[l].h, eff_grads.d_weight[l]);
        factors[l].h -= (dh *= eta);
        factors[l].j -= (dj *= eta);
        if (adapt_biases && !factors[l].bias_delta.empty()) {
            auto& bd = factors[l].bias_delta;
            for (std::size_t i = 0; i < bd.size(); ++i) bd[i] -= eta * eff_grads.d_bias[l][i];
        }
    }
}

}  // namespace detail

// Gradient descent on the adapter factors only; the base model is never
// touched. Loss and batching are identical to local_train.
inline LoraAdapter lora_train(const ClassModel& base, const LoraAdapter& adapter,
                              const std::vector<FeatureSample>& samples,
                              const TrainingConfig& cfg, Rng& rng) {
    if (samples.empty()) throw InvalidInputError("lora_train: empty sample list");
    cfg.validate();
    LoraAdapter out = adapter;
    const bool adapt_biases = !out.to_3d.empty() && !out.to_3d.front().bias_delta.empty();
    for (long step = 0; step < cfg.tau_max; ++step) {
        const auto batch = detail::pick_batch(samples.size(), cfg.batch, rng);
        const ClassModel eff = merged_model(base, out);
        ModelGrads grads{MapperGrads::zeros_like(eff.map_2d_to_3d),
                         MapperGrads::zeros_like(eff.map_3d_to_2d)};
        const double loss = loss_and_grads(eff, samples, batch, &grads);
        if (!std::isfinite(loss) || !grads.to_3d.all_finite() || !grads.to_2d.all_finite())
            throw DivergedError("lora_train: non-finite loss or gradient at step " +
                                    std::to_string(step),
                                step);
        detail::lora_step(out.to_3d, grads.to_3d, cfg.eta, adapt_biases);
        detail::lora_step(out.to_2d, grads.to_2d, cfg.eta, adapt_biases);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct LayerDims {
    std::size_t d_out = 0;
    std::size_t d_in = 0;
    bool has_bias = true;
};

inline std::vector<LayerDims> architecture_of(const ClassModel& model) {
    std::vector<LayerDims> dims;
    for (const MapperNet* net : {&model.map_2d_to_3d, &model.map_3d_to_2d})
        for (const auto& l : net->layers)
            dims.push_back({l.weight.rows(), l.weight.cols(), !l.bias.empty()});
    return dims;
}

// Parameters a client uploads for one class update: full weights (and biases)
// in full mode; r*(d_out + d_in) per layer plus adapted biases in low-rank mode.
inline std::size_t uploaded_param_count(const std::vector<LayerDims>& layers, UpdateMode mode,
                                        std::size_t rank, bool adapt_biases) {
    std::size_t n = 0;
    for (const auto& l : layers) {
        if (mode == UpdateMode::full) {
            n += l.d_out * l.d_in + (l.has_bias ? l.d_out : 0);
        } else {
            if (rank >= std::min(l.d_out, l.d_in))
                throw ConfigError("uploaded_param_count: rank " + std::to_string(rank) +
                                  " >= min layer dim " +
                                  std::to_string(std::min(l.d_out, l.d_in)));
            n += rank * (l.d_out + l.d_in) + (adapt_biases && l.has_bias ? l.d_out : 0);
        }
    }
    return n;
}

}  // namespace modiad
