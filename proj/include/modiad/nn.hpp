#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modiad/error.hpp"
#include "modiad/matrix.hpp"
#include "modiad/rng.hpp"

namespace modiad {

// Guard added to norm products so cosine distance is total.
inline constexpr double kCosineGuard = 1e-12;

// Exact GELU: x * Phi(x) with the Gaussian CDF, Phi(x) = (1 + erf(x/sqrt(2)))/2.
inline double gelu_scalar(double x) { return x * 0.5 * (1.0 + std::erf(x * M_SQRT1_2)); }

// d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
inline double gelu_grad_scalar(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

inline std::vector<double> gelu(const std::vector<double>& x) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
    return y;
}

// 1 - <a,b> / (|a||b| + guard). Symmetric, in [0, 2], total.
inline double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw InvalidInputError("cosine_distance: length mismatch");
    const double d = norm2(a.data(), a.size()) * norm2(b.data(), b.size()) + kCosineGuard;
    return 1.0 - dot(a.data(), b.data(), a.size()) / d;
}

inline double cosine_distance_rows(const double* a, const double* b, std::size_t n) {
    const double d = norm2(a, n) * norm2(b, n) + kCosineGuard;
    return 1.0 - dot(a, b, n) / d;
}

enum class Activation : std::uint8_t { gelu = 0, identity = 1 };

struct Layer {
    Matrix weight;             // [d_out x d_in]
    std::vector<double> bias;  // [d_out]
};

// MLP mapping one modality's patch features into the other's space.
// Hidden activations use `activation`; the output layer is linear.
struct MapperNet {
    std::vector<Layer> layers;
    Activation activation = Activation::gelu;

    std::size_t input_dim() const { return layers.front().weight.cols(); }
    std::size_t output_dim() const { return layers.back().weight.rows(); }
    std::size_t depth() const { return layers.size(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    bool same_architecture(const MapperNet& o) const {
        if (layers.size() != o.layers.size() || activation != o.activation) return false;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].weight.rows() != o.layers[i].weight.rows() ||
                layers[i].weight.cols() != o.layers[i].weight.cols())
                return false;
        return true;
    }
};

inline std::size_t default_hidden_dim(std::size_t in, std::size_t out) { return (in + out) / 2; }

// Kaiming-style uniform init in [-sqrt(6/d_in), +sqrt(6/d_in)], biases zero.
// depth = number of linear layers; depth 2 is the default in -> hidden -> out,
// depth 3 stacks a second hidden layer of the same width.
inline MapperNet make_mapper(std::size_t input_dim, std::size_t output_dim, Rng& rng,
                             std::size_t depth = 2, Activation act = Activation::gelu) {
    if (depth < 1) throw ConfigError("make_mapper: depth must be >= 1");
    const std::size_t hidden = default_hidden_dim(input_dim, output_dim);
    std::vector<std::size_t> dims;
    dims.push_back(input_dim);
    for (std::size_t i = 0; i + 1 < depth; ++i) dims.push_back(hidden);
    dims.push_back(output_dim);

    MapperNet net;
    net.activation = act;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        Layer layer;
        layer.weight = Matrix(dims[l + 1], dims[l]);
        const double bound = std::sqrt(6.0 / static_cast<double>(dims[l]));
        for (double& w : layer.weight.data()) w = rng.uniform(-bound, bound);
        layer.bias.assign(dims[l + 1], 0.0);
        net.layers.push_back(std::move(layer));
    }
    return net;
}

// Paired cross-modal mappers for one object class.
struct ClassModel {
    int class_id = 0;
    MapperNet map_2d_to_3d;
    MapperNet map_3d_to_2d;
    long version = 0;

    bool same_architecture(const ClassModel& o) const {
        return map_2d_to_3d.same_architecture(o.map_2d_to_3d) &&
               map_3d_to_2d.same_architecture(o.map_3d_to_2d);
    }
    std::size_t param_count() const {
        return map_2d_to_3d.param_count() + map_3d_to_2d.param_count();
    }
};

inline ClassModel make_class_model(int class_id, std::size_t d2, std::size_t d3, Rng& rng,
                                   std::size_t depth = 2, Activation act = Activation::gelu) {
    ClassModel m;
    m.class_id = class_id;
    m.map_2d_to_3d = make_mapper(d2, d3, rng, depth, act);
    m.map_3d_to_2d = make_mapper(d3, d2, rng, depth, act);
    return m;
}

struct TrainingConfig {
    double eta = 1.6;         // learning rate
    long tau_max = 8;         // local gradient steps
    std::size_t batch = 32;   // samples per step; clamped to the pool size

    void validate() const {
        if (!(eta > 0.0) || !std::isfinite(eta))
            throw ConfigError("training.eta must be finite and positive");
        if (tau_max < 0) throw ConfigError("training.tau_max must be >= 0");
        if (batch < 1) throw ConfigError("training.batch must be >= 1");
    }
};

// One paired feature grid for a single object instance.
struct FeatureSample {
    int class_id = 0;
    Matrix e2d;  // [P^2 x d2]
    Matrix e3d;  // [P^2 x d3]
    std::vector<std::uint8_t> mask;  // P*P row-major ground-truth region, empty when normal
    bool is_anomalous = false;
};

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

inline void apply_activation(Matrix& m, Activation act) {
    if (act == Activation::identity) return;
    for (double& v : m.data()) v = gelu_scalar(v);
}

struct LayerTrace {
    Matrix input;    // activations entering the layer
    Matrix preact;   // X*W^T + b before the nonlinearity
};

// Forward pass with `weights` substituted for the net's own layer weights
// (the LoRA path passes W + H*J); biases come from `biases`.
inline Matrix forward_traced(const MapperNet& net, const std::vector<Matrix>& weights,
                             const std::vector<std::vector<double>>& biases, const Matrix& x,
                             std::vector<LayerTrace>* trace) {
    Matrix a = x;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        Matrix z = matmul_bt(a, weights[l]);
        const auto& b = biases[l];
        for (std::size_t i = 0; i < z.rows(); ++i) {
            double* zr = z.row_ptr(i);
            for (std::size_t j = 0; j < z.cols(); ++j) zr[j] += b[j];
        }
        if (trace) trace->push_back({std::move(a), z});
        a = z;
        if (l + 1 < net.layers.size()) apply_activation(a, net.activation);
    }
    return a;
}

// Sum over rows of d_cos(target_row, pred_row); optionally accumulates
// scale * d(d_cos)/d(pred) into d_pred.
inline double cosine_loss_rows(const Matrix& target, const Matrix& pred, double scale,
                               Matrix* d_pred) {
    double total = 0.0;
    const std::size_t n = target.cols();
    for (std::size_t i = 0; i < target.rows(); ++i) {
        const double* t = target.row_ptr(i);
        const double* y = pred.row_ptr(i);
        const double nt = norm2(t, n);
        const double ny = norm2(y, n);
        const double s = dot(t, y, n);
        const double d = nt * ny + kCosineGuard;
        total += 1.0 - s / d;
        if (d_pred) {
            double* g = d_pred->row_ptr(i);
            const double inv_d = 1.0 / d;
            const double coef = (ny > 1e-300) ? s * nt / (ny * d * d) : 0.0;
            for (std::size_t j = 0; j < n; ++j)
                g[j] += scale * (-t[j] * inv_d + coef * y[j]);
        }
    }
    return total;
}

// Backprop through one mapper given dL/d(output); accumulates into d_w / d_b.
inline void backward_into(const MapperNet& net, const std::vector<Matrix>& weights,
                          const std::vector<LayerTrace>& trace, Matrix d_out,
                          std::vector<Matrix>& d_w, std::vector<std::vector<double>>& d_b) {
    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const LayerTrace& t = trace[li];
        Matrix d_z = std::move(d_out);
        if (li + 1 < net.layers.size() && net.activation != Activation::identity) {
            for (std::size_t i = 0; i < d_z.size(); ++i)
                d_z.data()[i] *= gelu_grad_scalar(t.preact.data()[i]);
        }
        d_w[li] += matmul_at(d_z, t.input);
        auto& db = d_b[li];
        for (std::size_t i = 0; i < d_z.rows(); ++i) {
            const double* r = d_z.row_ptr(i);
            for (std::size_t j = 0; j < d_z.cols(); ++j) db[j] += r[j];
        }
        if (li > 0) d_out = matmul(d_z, weights[li]);
    }
}

inline std::vector<Matrix> own_weights(const MapperNet& net) {
    std::vector<Matrix> w;
    w.reserve(net.layers.size());
    for (const auto& l : net.layers) w.push_back(l.weight);
    return w;
}

inline std::vector<std::vector<double>> own_biases(const MapperNet& net) {
    std::vector<std::vector<double>> b;
    b.reserve(net.layers.size());
    for (const auto& l : net.layers) b.push_back(l.bias);
    return b;
}

}  // namespace detail

// Row-wise application of the layer chain.
inline Matrix mapper_forward(const MapperNet& net, const Matrix& input) {
    if (input.cols() != net.input_dim())
        throw InvalidInputError("mapper_forward: input has " + std::to_string(input.cols()) +
                                " columns, net expects " + std::to_string(net.input_dim()));
    return detail::forward_traced(net, detail::own_weights(net), detail::own_biases(net), input,
                                  nullptr);
}

// Per-mapper gradients, same shapes as the mapper's weights and biases.
struct MapperGrads {
    std::vector<Matrix> d_weight;
    std::vector<std::vector<double>> d_bias;

    static MapperGrads zeros_like(const MapperNet& net) {
        MapperGrads g;
        for (const auto& l : net.layers) {
            g.d_weight.emplace_back(l.weight.rows(), l.weight.cols());
            g.d_bias.emplace_back(l.bias.size(), 0.0);
        }
        return g;
    }
    bool all_finite() const {
        for (const auto& w : d_weight)
            if (!w.all_finite()) return false;
        for (const auto& b : d_bias)
            for (double v : b)
                if (!std::isfinite(v)) return false;
        return true;
    }
};

struct ModelGrads {
    MapperGrads to_3d;
    MapperGrads to_2d;
};

// Mean-over-samples, mean-over-patches cosine-distance loss of a batch, plus
// (optionally) its gradients with respect to the model's own parameters.
// `batch` indexes into `samples`; pass all indices for the full pool.
inline double loss_and_grads(const ClassModel& model, const std::vector<FeatureSample>& samples,
                             const std::vector<std::size_t>& batch, ModelGrads* grads) {
    if (batch.empty()) throw InvalidInputError("loss_and_grads: empty batch");
    const auto w23 = detail::own_weights(model.map_2d_to_3d);
    const auto b23 = detail::own_biases(model.map_2d_to_3d);
    const auto w32 = detail::own_weights(model.map_3d_to_2d);
    const auto b32 = detail::own_biases(model.map_3d_to_2d);

    double loss = 0.0;
    for (std::size_t idx : batch) {
        const FeatureSample& s = samples[idx];
        if (s.e2d.cols() != model.map_2d_to_3d.input_dim() ||
            s.e3d.cols() != model.map_3d_to_2d.input_dim())
            throw InvalidInputError("loss_and_grads: sample dims do not match model");
        const double patch_scale = 1.0 / static_cast<double>(s.e2d.rows());
        const double scale = patch_scale / static_cast<double>(batch.size());

        std::vector<detail::LayerTrace> tr23, tr32;
        Matrix pred3d = detail::forward_traced(model.map_2d_to_3d, w23, b23, s.e2d,
                                               grads ? &tr23 : nullptr);
        Matrix pred2d = detail::forward_traced(model.map_3d_to_2d, w32, b32, s.e3d,
                                               grads ? &tr32 : nullptr);

        Matrix d3(grads ? pred3d.rows() : 0, grads ? pred3d.cols() : 0);
        Matrix d2(grads ? pred2d.rows() : 0, grads ? pred2d.cols() : 0);
        loss += patch_scale * detail::cosine_loss_rows(s.e3d, pred3d, scale, grads ? &d3 : nullptr);
        loss += patch_scale * detail::cosine_loss_rows(s.e2d, pred2d, scale, grads ? &d2 : nullptr);

        if (grads) {
            detail::backward_into(model.map_2d_to_3d, w23, tr23, std::move(d3),
                                  grads->to_3d.d_weight, grads->to_3d.d_bias);
            detail::backward_into(model.map_3d_to_2d, w32, tr32, std::move(d2),
                                  grads->to_2d.d_weight, grads->to_2d.d_bias);
        }
    }
    return loss / static_cast<double>(batch.size());
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

// Mean over samples of the per-sample two-direction cosine reconstruction loss.
inline double local_loss(const ClassModel& model, const std::vector<FeatureSample>& samples) {
    if (samples.empty()) throw InvalidInputError("local_loss: empty sample list");
    return loss_and_grads(model, samples, all_indices(samples.size()), nullptr);
}

namespace detail {

inline void sgd_step(MapperNet& net, const MapperGrads& g, double eta) {
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        auto& w = net.layers[l].weight.data();
        const auto& dw = g.d_weight[l].data();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * dw[i];
        auto& b = net.layers[l].bias;
        const auto& db = g.d_bias[l];
        for (std::size_t i = 0; i < b.size(); ++i) b[i] -= eta * db[i];
    }
}

inline std::vector<std::size_t> pick_batch(std::size_t n, std::size_t batch, Rng& rng) {
    if (batch >= n) return all_indices(n);
    return rng.sample_indices(n, batch);
}

}  // namespace detail

// Plain gradient descent: tau_max steps at rate eta on mini-batches drawn from
// rng (full pool when batch >= sample count). Deterministic given the rng seed.
inline std::pair<ClassModel, long> local_train(const ClassModel& model,
                                               const std::vector<FeatureSample>& samples,
                                               const TrainingConfig& cfg, Rng& rng) {
    if (samples.empty()) throw InvalidInputError("local_train: empty sample list");
    cfg.validate();
    ClassModel out = model;
    for (long step = 0; step < cfg.tau_max; ++step) {
        const auto batch = detail::pick_batch(samples.size(), cfg.batch, rng);
        ModelGrads grads{MapperGrads::zeros_like(out.map_2d_to_3d),
                         MapperGrads::zeros_like(out.map_3d_to_2d)};
        const double loss = loss_and_grads(out, samples, batch, &grads);
        if (!std::isfinite(loss) || !grads.to_3d.all_finite() || !grads.to_2d.all_finite())
            throw DivergedError("local_train: non-finite loss or gradient at step " +
                                    std::to_string(step),
                                step);
        detail::sgd_step(out.map_2d_to_3d, grads.to_3d, cfg.eta);
        detail::sgd_step(out.map_3d_to_2d, grads.to_2d, cfg.eta);
    }
    return {std::move(out), cfg.tau_max};
}

namespace detail {

// Order-independent mean of one parameter across models: the addends are
// sorted before summation so any permutation of the inputs produces the same
// bits, and all-equal inputs return the shared value unchanged.
inline double sorted_mean(std::vector<double>& scratch) {
    std::sort(scratch.begin(), scratch.end());
    if (scratch.front() == scratch.back()) return scratch.front();
    double sum = 0.0;
    for (double v : scratch) sum += v;
    return sum / static_cast<double>(scratch.size());
}

}  // namespace detail

// Elementwise arithmetic mean of identically-shaped models.
inline ClassModel mean_models(const std::vector<ClassModel>& models) {
    if (models.empty()) throw InvalidInputError("mean_models: empty model list");
    for (const auto& m : models)
        if (!m.same_architecture(models.front()))
            throw InvalidInputError("mean_models: architecture mismatch");
    ClassModel out = models.front();
    if (models.size() == 1) return out;
    std::vector<double> scratch(models.size());
    auto average_net = [&](MapperNet ClassModel::* net) {
        MapperNet& dst = out.*net;
        for (std::size_t l = 0; l < dst.layers.size(); ++l) {
            auto& w = dst.layers[l].weight.data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                for (std::size_t m = 0; m < models.size(); ++m)
                    scratch[m] = (models[m].*net).layers[l].weight.data()[i];
                w[i] = detail::sorted_mean(scratch);
            }
            auto& b = dst.layers[l].bias;
            for (std::size_t i = 0; i < b.size(); ++i) {
                for (std::size_t m = 0; m < models.size(); ++m)
                    scratch[m] = (models[m].*net).layers[l].bias[i];
                b[i] = detail::sorted_mean(scratch);
            }
        }
    };
    average_net(&ClassModel::map_2d_to_3d);
    average_net(&ClassModel::map_3d_to_2d);
    return out;
}

}  // namespace modiad
