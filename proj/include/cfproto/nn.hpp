#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cfproto/data.hpp"
#include "cfproto/error.hpp"

namespace cfproto {

enum class Activation { linear, relu, sigmoid, softmax };
enum class ModelKind { classifier, autoencoder, encoder };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
        case Activation::softmax: return "softmax";
        default: return "linear";
    }
}

inline Activation parse_activation(std::string_view s) {
    if (s == "linear") return Activation::linear;
    if (s == "relu") return Activation::relu;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "softmax") return Activation::softmax;
    throw ParseError("unknown activation '" + std::string(s) + "'");
}

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::autoencoder: return "autoencoder";
        case ModelKind::encoder: return "encoder";
        default: return "classifier";
    }
}

inline ModelKind parse_model_kind(std::string_view s) {
    if (s == "classifier") return ModelKind::classifier;
    if (s == "autoencoder") return ModelKind::autoencoder;
    if (s == "encoder") return ModelKind::encoder;
    throw ParseError("unknown model kind '" + std::string(s) + "'");
}

struct DenseLayer {
    Matrix weights;  // out x in
    Vector bias;     // out
    Activation activation = Activation::linear;

    std::size_t in_dim() const noexcept { return static_cast<std::size_t>(weights.cols()); }
    std::size_t out_dim() const noexcept { return static_cast<std::size_t>(weights.rows()); }
};

struct LayerGradient {
    Matrix weights;
    Vector bias;
};

struct Gradients {
    Vector input;
    std::vector<LayerGradient> layers;
};

namespace detail {

inline void activate_rows(Matrix& z, Activation a) {
    switch (a) {
        case Activation::relu: z = z.cwiseMax(0.0); break;
        case Activation::sigmoid: z = (1.0 + (-z.array()).exp()).inverse().matrix(); break;
        case Activation::softmax:
            for (Eigen::Index r = 0; r < z.rows(); ++r) {
                auto row = z.row(r);
                row.array() -= row.maxCoeff();
                row = row.array().exp().matrix();
                row /= row.sum();
            }
            break;
        default: break;
    }
}

// Maps an upstream gradient w.r.t. activations to one w.r.t. pre-activations,
// row by row. `z` holds pre-activations, `a` the activations.
inline Matrix activation_backward(const Matrix& z, const Matrix& a, const Matrix& g, Activation act) {
    switch (act) {
        case Activation::relu: return (z.array() > 0.0).select(g, 0.0);
        case Activation::sigmoid: return (g.array() * a.array() * (1.0 - a.array())).matrix();
        case Activation::softmax: {
            Matrix out(g.rows(), g.cols());
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const double dot = a.row(r).dot(g.row(r));
                out.row(r) = (a.row(r).array() * (g.row(r).array() - dot)).matrix();
            }
            return out;
        }
        default: return g;
    }
}

}  // namespace detail

/// Layered feedforward network. Instances are rows when batched.
class DenseNet {
public:
    DenseNet() = default;

    explicit DenseNet(std::vector<DenseLayer> layers, ModelKind kind = ModelKind::classifier,
                      std::size_t encoder_layers = 0)
        : layers_(std::move(layers)), kind_(kind), encoder_layers_(encoder_layers) {
        validate();
    }

    /// Glorot-uniform initialised network; `spec` lists (units, activation) per layer.
    static DenseNet random(std::size_t input_dim, const std::vector<std::pair<std::size_t, Activation>>& spec,
                           std::uint64_t seed, ModelKind kind = ModelKind::classifier,
                           std::size_t encoder_layers = 0) {
        std::mt19937_64 rng(seed);
        std::vector<DenseLayer> layers;
        std::size_t in = input_dim;
        for (const auto& [units, act] : spec) {
            const double limit = std::sqrt(6.0 / static_cast<double>(in + units));
            std::uniform_real_distribution<double> dist(-limit, limit);
            DenseLayer layer{Matrix(static_cast<Eigen::Index>(units), static_cast<Eigen::Index>(in)),
                             Vector::Zero(static_cast<Eigen::Index>(units)), act};
            for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
                for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = dist(rng);
            layers.push_back(std::move(layer));
            in = units;
        }
        return DenseNet(std::move(layers), kind, encoder_layers);
    }

    std::size_t input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
    std::size_t output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }
    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
    std::vector<DenseLayer>& mutable_layers() noexcept { return layers_; }
    ModelKind kind() const noexcept { return kind_; }
    /// Number of leading layers forming the encoder of an autoencoder (0 if unknown).
    std::size_t encoder_layers() const noexcept { return encoder_layers_; }
    bool empty() const noexcept { return layers_.empty(); }

    Vector forward(const Vector& x) const {
        check_input(static_cast<std::size_t>(x.size()), "DenseNet::forward");
        Matrix a = x.transpose();
        for (const auto& layer : layers_) {
            Matrix z = a * layer.weights.transpose();
            z.row(0) += layer.bias.transpose();
            detail::activate_rows(z, layer.activation);
            a = std::move(z);
        }
        return a.row(0).transpose();
    }

    Matrix forward_batch(const Matrix& x) const {
        check_input(static_cast<std::size_t>(x.cols()), "DenseNet::forward_batch");
        Matrix a = x;
        for (const auto& layer : layers_) {
            Matrix z = a * layer.weights.transpose();
            z.rowwise() += layer.bias.transpose();
            detail::activate_rows(z, layer.activation);
            a = std::move(z);
        }
        return a;
    }

    /// Vector-Jacobian product: gradients of upstream·net(x) w.r.t. x and parameters.
    Gradients backward(const Vector& x, const Vector& upstream) const {
        check_input(static_cast<std::size_t>(x.size()), "DenseNet::backward");
        if (static_cast<std::size_t>(upstream.size()) != output_dim())
            throw DimensionError("DenseNet::backward upstream", output_dim(),
                                 static_cast<std::size_t>(upstream.size()));
        Matrix xm = x.transpose();
        auto [grads, gin] = backward_batch(xm, upstream.transpose());
        return {gin.row(0).transpose(), std::move(grads)};
    }

    Vector input_gradient(const Vector& x, const Vector& upstream) const {
        return backward(x, upstream).input;
    }

    /// Batched backward pass; upstream has one row per instance. Returns summed
    /// parameter gradients and per-row input gradients.
    std::pair<std::vector<LayerGradient>, Matrix> backward_batch(const Matrix& x, const Matrix& upstream) const {
        std::vector<Matrix> pre, post;
        pre.reserve(layers_.size());
        post.reserve(layers_.size() + 1);
        post.push_back(x);
        for (const auto& layer : layers_) {
            Matrix z = post.back() * layer.weights.transpose();
            z.rowwise() += layer.bias.transpose();
            Matrix a = z;
            detail::activate_rows(a, layer.activation);
            pre.push_back(std::move(z));
            post.push_back(std::move(a));
        }
        std::vector<LayerGradient> grads(layers_.size());
        Matrix g = upstream;
        for (std::size_t i = layers_.size(); i-- > 0;) {
            const Matrix gz = detail::activation_backward(pre[i], post[i + 1], g, layers_[i].activation);
            grads[i].weights = gz.transpose() * post[i];
            grads[i].bias = gz.colwise().sum().transpose();
            g = gz * layers_[i].weights;
        }
        return {std::move(grads), std::move(g)};
    }

    /// Layers [first, last) as a standalone network.
    DenseNet slice(std::size_t first, std::size_t last, ModelKind kind) const {
        if (first >= last || last > layers_.size()) throw Error("DenseNet::slice: invalid layer range");
        return DenseNet(std::vector<DenseLayer>(layers_.begin() + static_cast<std::ptrdiff_t>(first),
                                                layers_.begin() + static_cast<std::ptrdiff_t>(last)),
                        kind);
    }

    DenseNet encoder() const {
        if (encoder_layers_ == 0) throw Error("network does not record an encoder depth");
        return slice(0, encoder_layers_, ModelKind::encoder);
    }

private:
    void check_input(std::size_t got, const char* where) const {
        if (layers_.empty()) throw Error(std::string(where) + ": empty network");
        if (got != input_dim()) throw DimensionError(where, input_dim(), got);
    }

    void validate() const {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (l.weights.rows() == 0 || l.weights.cols() == 0) throw Error("layer with zero dimension");
            if (l.bias.size() != l.weights.rows()) throw Error("bias length does not match layer output");
            if (i > 0 && l.in_dim() != layers_[i - 1].out_dim())
                throw Error("layer " + std::to_string(i) + " input does not chain with previous output");
            if (l.activation == Activation::softmax && i + 1 != layers_.size())
                throw Error("softmax is only allowed on the final layer");
        }
        if (encoder_layers_ > layers_.size()) throw Error("encoder depth exceeds layer count");
    }

    std::vector<DenseLayer> layers_;
    ModelKind kind_ = ModelKind::classifier;
    std::size_t encoder_layers_ = 0;
};

// --- architectures ---------------------------------------------------------

/// Relu hidden layers followed by a softmax head.
inline DenseNet make_classifier(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                std::size_t n_classes, std::uint64_t seed) {
    std::vector<std::pair<std::size_t, Activation>> spec;
    for (auto h : hidden) spec.emplace_back(h, Activation::relu);
    spec.emplace_back(n_classes, Activation::softmax);
    return DenseNet::random(input_dim, spec, seed, ModelKind::classifier);
}

/// Dense autoencoder: relu encoder layers ending in a linear bottleneck, relu
/// decoder layers and a linear reconstruction layer.
inline DenseNet make_autoencoder(std::size_t input_dim, const std::vector<std::size_t>& encoder,
                                 const std::vector<std::size_t>& decoder, std::uint64_t seed) {
    if (encoder.empty()) throw Error("autoencoder needs at least one encoder layer");
    std::vector<std::pair<std::size_t, Activation>> spec;
    for (std::size_t i = 0; i < encoder.size(); ++i)
        spec.emplace_back(encoder[i], i + 1 == encoder.size() ? Activation::linear : Activation::relu);
    for (auto h : decoder) spec.emplace_back(h, Activation::relu);
    spec.emplace_back(input_dim, Activation::linear);
    return DenseNet::random(input_dim, spec, seed, ModelKind::autoencoder, encoder.size());
}

// --- training --------------------------------------------------------------

enum class LossKind { mse, cross_entropy };

struct AdamParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct SgdParams {
    double lr = 1e-2;
};

struct TrainConfig {
    std::size_t epochs = 500;
    std::size_t batch_size = 128;
    std::variant<AdamParams, SgdParams> optimizer = AdamParams{};
    LossKind loss = LossKind::mse;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw Error("epochs must be >= 1");
        if (batch_size < 1) throw Error("batch_size must be >= 1");
        const double lr = std::visit([](const auto& o) { return o.lr; }, optimizer);
        if (!(lr > 0.0)) throw Error("learning rate must be > 0");
    }
};

struct TrainResult {
    DenseNet net;
    std::vector<double> loss_history;  // mean loss per epoch
};

inline Matrix one_hot(const std::vector<int>& labels, std::size_t n_classes) {
    Matrix y = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(n_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) throw Error("label out of range");
        y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    }
    return y;
}

inline TrainResult train(DenseNet net, const Matrix& inputs, const Matrix& targets, const TrainConfig& cfg) {
    cfg.validate();
    if (inputs.rows() == 0) throw Error("train: no training rows");
    if (inputs.rows() != targets.rows()) throw Error("train: input and target row counts differ");
    if (static_cast<std::size_t>(inputs.cols()) != net.input_dim())
        throw DimensionError("train inputs", net.input_dim(), static_cast<std::size_t>(inputs.cols()));
    if (static_cast<std::size_t>(targets.cols()) != net.output_dim())
        throw DimensionError("train targets", net.output_dim(), static_cast<std::size_t>(targets.cols()));
    if (cfg.loss == LossKind::cross_entropy && net.layers().back().activation != Activation::softmax)
        throw Error("cross-entropy loss requires a softmax output layer");

    auto& layers = net.mutable_layers();
    std::vector<LayerGradient> m(layers.size()), v(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        m[i] = {Matrix::Zero(layers[i].weights.rows(), layers[i].weights.cols()),
                Vector::Zero(layers[i].bias.size())};
        v[i] = m[i];
    }

    std::mt19937_64 rng(cfg.seed);
    const auto n = static_cast<std::size_t>(inputs.rows());
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> history;
    history.reserve(cfg.epochs);
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0, batch = 0; start < n; start += cfg.batch_size, ++batch) {
            const std::size_t bsz = std::min(cfg.batch_size, n - start);
            Matrix xb(static_cast<Eigen::Index>(bsz), inputs.cols());
            Matrix yb(static_cast<Eigen::Index>(bsz), targets.cols());
            for (std::size_t r = 0; r < bsz; ++r) {
                xb.row(static_cast<Eigen::Index>(r)) = inputs.row(order[start + r]);
                yb.row(static_cast<Eigen::Index>(r)) = targets.row(order[start + r]);
            }

            // Forward pass, keeping pre-activations for the backward sweep.
            std::vector<Matrix> pre, post{xb};
            for (const auto& layer : layers) {
                Matrix z = post.back() * layer.weights.transpose();
                z.rowwise() += layer.bias.transpose();
                Matrix a = z;
                detail::activate_rows(a, layer.activation);
                pre.push_back(std::move(z));
                post.push_back(std::move(a));
            }
            const Matrix& out = post.back();
            double loss = 0.0;
            Matrix gz;  // gradient w.r.t. final pre-activation
            if (cfg.loss == LossKind::cross_entropy) {
                loss = -(yb.array() * out.array().max(1e-300).log()).sum() / static_cast<double>(bsz);
                gz = (out - yb) / static_cast<double>(bsz);
            } else {
                const double denom = static_cast<double>(bsz) * static_cast<double>(out.cols());
                loss = (out - yb).squaredNorm() / denom;
                const Matrix ga = 2.0 * (out - yb) / denom;
                gz = detail::activation_backward(pre.back(), out, ga, layers.back().activation);
            }
            if (!std::isfinite(loss))
                throw Error("non-finite training loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(batch + 1));
            epoch_loss += loss * static_cast<double>(bsz);

            std::vector<LayerGradient> grads(layers.size());
            for (std::size_t i = layers.size(); i-- > 0;) {
                if (i + 1 != layers.size())
                    gz = detail::activation_backward(pre[i], post[i + 1], gz, layers[i].activation);
                grads[i].weights = gz.transpose() * post[i];
                grads[i].bias = gz.colwise().sum().transpose();
                if (i > 0) gz = gz * layers[i].weights;
            }

            ++step;
            std::visit(
                [&](const auto& opt) {
                    using T = std::decay_t<decltype(opt)>;
                    for (std::size_t i = 0; i < layers.size(); ++i) {
                        if constexpr (std::is_same_v<T, SgdParams>) {
                            layers[i].weights -= opt.lr * grads[i].weights;
                            layers[i].bias -= opt.lr * grads[i].bias;
                        } else {
                            const double t = static_cast<double>(step);
                            const double c1 = 1.0 - std::pow(opt.beta1, t);
                            const double c2 = 1.0 - std::pow(opt.beta2, t);
                            auto update = [&](auto& param, auto& mm, auto& vv, const auto& g) {
                                mm = opt.beta1 * mm + (1.0 - opt.beta1) * g;
                                vv = opt.beta2 * vv + (1.0 - opt.beta2) * g.cwiseProduct(g);
                                param.array() -= opt.lr * (mm.array() / c1) /
                                                 ((vv.array() / c2).sqrt() + opt.eps);
                            };
                            update(layers[i].weights, m[i].weights, v[i].weights, grads[i].weights);
                            update(layers[i].bias, m[i].bias, v[i].bias, grads[i].bias);
                        }
                    }
                },
                cfg.optimizer);
        }
        history.push_back(epoch_loss / static_cast<double>(n));
    }
    return {std::move(net), std::move(history)};
}

inline int argmax_lowest(const Vector& p) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < p.size(); ++i)
        if (p[i] > p[best]) best = i;
    return static_cast<int>(best);
}

inline double accuracy(const DenseNet& net, const Matrix& x, const std::vector<int>& labels) {
    if (x.rows() == 0) return 0.0;
    const Matrix p = net.forward_batch(x);
    std::size_t hits = 0;
    for (Eigen::Index r = 0; r < p.rows(); ++r)
        if (argmax_lowest(p.row(r).transpose()) == labels[static_cast<std::size_t>(r)]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(x.rows());
}

// --- model documents -------------------------------------------------------

inline nlohmann::json to_json(const DenseNet& net) {
    nlohmann::json j{{"kind", to_string(net.kind())}, {"input_dim", net.input_dim()}};
    if (net.encoder_layers() > 0) j["encoder_layers"] = net.encoder_layers();
    j["layers"] = nlohmann::json::array();
    for (const auto& l : net.layers()) {
        std::vector<double> w;
        w.reserve(static_cast<std::size_t>(l.weights.size()));
        for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(l.weights(r, c));
        j["layers"].push_back({{"rows", l.weights.rows()},
                               {"cols", l.weights.cols()},
                               {"weights", w},
                               {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())},
                               {"activation", to_string(l.activation)}});
    }
    return j;
}

inline DenseNet net_from_json(const nlohmann::json& j) {
    try {
        std::vector<DenseLayer> layers;
        for (const auto& lj : j.at("layers")) {
            const auto rows = lj.at("rows").get<Eigen::Index>();
            const auto cols = lj.at("cols").get<Eigen::Index>();
            const auto w = lj.at("weights").get<std::vector<double>>();
            const auto b = lj.at("bias").get<std::vector<double>>();
            if (static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows)
                throw ParseError("layer record sizes do not match rows/cols");
            DenseLayer layer{Matrix(rows, cols), Vector(rows), parse_activation(lj.at("activation").get<std::string>())};
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) layer.weights(r, c) = w[static_cast<std::size_t>(r * cols + c)];
            for (Eigen::Index r = 0; r < rows; ++r) layer.bias[r] = b[static_cast<std::size_t>(r)];
            layers.push_back(std::move(layer));
        }
        DenseNet net(std::move(layers), parse_model_kind(j.value("kind", std::string("classifier"))),
                     j.value("encoder_layers", std::size_t{0}));
        if (j.contains("input_dim") && j["input_dim"].get<std::size_t>() != net.input_dim())
            throw ParseError("model input_dim does not match first layer");
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid model document: ") + e.what());
    }
}

inline DenseNet load_model(const std::string& path) { return net_from_json(read_json_file(path)); }
inline void save_model(const std::string& path, const DenseNet& net) { write_json_file(path, to_json(net)); }

}  // namespace cfproto
