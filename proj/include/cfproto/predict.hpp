#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfproto/data.hpp"
#include "cfproto/error.hpp"
#include "cfproto/nn.hpp"
#include "cfproto/subprocess.hpp"

namespace cfproto {

/// Prediction function f_pred over numeric instances. Every evaluated
/// instance increments the call counter by one.
class Predictor {
public:
    virtual ~Predictor() = default;

    virtual std::size_t input_dim() const = 0;
    virtual std::size_t n_classes() const = 0;

    /// One probability row per input row.
    Matrix predict(const Matrix& batch) {
        if (static_cast<std::size_t>(batch.cols()) != input_dim())
            throw DimensionError("Predictor::predict", input_dim(), static_cast<std::size_t>(batch.cols()));
        Matrix p = evaluate(batch);
        calls_ += static_cast<std::uint64_t>(batch.rows());
        return p;
    }

    Vector predict_one(const Vector& x) { return predict(x.transpose()).row(0).transpose(); }

    /// True when vjp() is available (analytic gradients).
    virtual bool has_gradient() const { return false; }

    /// upstream^T * d f_pred / dx at x. Not counted as a prediction: callers
    /// obtain f_pred(x) through predict() first.
    Vector vjp(const Vector& x, const Vector& upstream) {
        if (static_cast<std::size_t>(x.size()) != input_dim())
            throw DimensionError("Predictor::vjp", input_dim(), static_cast<std::size_t>(x.size()));
        return evaluate_vjp(x, upstream);
    }

    std::uint64_t calls() const noexcept { return calls_; }

protected:
    virtual Matrix evaluate(const Matrix& batch) = 0;
    virtual Vector evaluate_vjp(const Vector&, const Vector&) {
        throw Error("predictor has no analytic gradient");
    }

private:
    std::uint64_t calls_ = 0;
};

/// In-process dense network with analytic gradients.
class WhiteBoxPredictor final : public Predictor {
public:
    explicit WhiteBoxPredictor(DenseNet net) : net_(std::move(net)) {
        if (net_.empty()) throw Error("white-box predictor needs a network");
        if (net_.layers().back().activation != Activation::softmax)
            throw Error("white-box predictor needs a softmax output layer");
    }

    std::size_t input_dim() const override { return net_.input_dim(); }
    std::size_t n_classes() const override { return net_.output_dim(); }
    bool has_gradient() const override { return true; }
    const DenseNet& net() const noexcept { return net_; }

protected:
    Matrix evaluate(const Matrix& batch) override { return net_.forward_batch(batch); }
    Vector evaluate_vjp(const Vector& x, const Vector& upstream) override {
        return net_.input_gradient(x, upstream);
    }

private:
    DenseNet net_;
};

/// External model process speaking line-delimited JSON on stdin/stdout:
///   request  {"id": <int>, "x": [[...], ...]}
///   response {"id": <int>, "p": [[...], ...]}
class BlackBoxPredictor final : public Predictor {
public:
    BlackBoxPredictor(const std::string& command, std::size_t input_dim,
                      std::optional<std::size_t> n_classes = std::nullopt,
                      std::chrono::milliseconds timeout = std::chrono::seconds(30))
        : process_(std::make_unique<Subprocess>(command)), input_dim_(input_dim), n_classes_(n_classes),
          timeout_(timeout) {}

    std::size_t input_dim() const override { return input_dim_; }

    std::size_t n_classes() const override {
        if (!n_classes_) {
            // Class count is learned from the first response.
            Vector probe = Vector::Zero(static_cast<Eigen::Index>(input_dim_));
            const_cast<BlackBoxPredictor*>(this)->predict_one(probe);
        }
        return *n_classes_;
    }

    std::uint64_t requests() const noexcept { return next_id_; }

protected:
    Matrix evaluate(const Matrix& batch) override {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < batch.rows(); ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index c = 0; c < batch.cols(); ++c) row.push_back(batch(r, c));
            rows.push_back(std::move(row));
        }
        const std::uint64_t id = next_id_++;
        process_->write_line(nlohmann::json{{"id", id}, {"x", rows}}.dump());
        const std::string line = process_->read_line(timeout_);

        nlohmann::json resp;
        try {
            resp = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw TransportError("model process sent malformed JSON");
        }
        if (!resp.is_object() || !resp.contains("id") || !resp.contains("p") || !resp["p"].is_array())
            throw TransportError("model response lacks id/p fields");
        if (resp["id"] != id) throw TransportError("model response id mismatch");
        const auto& p = resp["p"];
        if (p.size() != static_cast<std::size_t>(batch.rows()))
            throw TransportError("model response row count does not match request");

        Matrix out;
        for (std::size_t r = 0; r < p.size(); ++r) {
            if (!p[r].is_array() || p[r].empty()) throw TransportError("model response row is not a vector");
            const std::size_t k = p[r].size();
            if (!n_classes_) n_classes_ = k;
            if (k != *n_classes_) throw ContractError("model returned inconsistent class count");
            if (r == 0) out.resize(batch.rows(), static_cast<Eigen::Index>(k));
            double sum = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                if (!p[r][c].is_number()) throw TransportError("model response holds a non-number");
                const double v = p[r][c].get<double>();
                if (!(v >= 0.0 && v <= 1.0)) throw ContractError("model probability outside [0, 1]");
                out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
                sum += v;
            }
            if (std::abs(sum - 1.0) > 1e-3) throw ContractError("model probabilities do not sum to 1");
        }
        return out;
    }

private:
    std::unique_ptr<Subprocess> process_;
    std::size_t input_dim_;
    mutable std::optional<std::size_t> n_classes_;
    std::chrono::milliseconds timeout_;
    std::uint64_t next_id_ = 0;
};

/// Applies an input transform (e.g. snapping embedded categorical coordinates
/// to the nearest category) before delegating. Gradients are taken at the
/// transformed point and passed straight through the transform.
class TransformedPredictor final : public Predictor {
public:
    using Transform = std::function<Vector(const Vector&)>;

    TransformedPredictor(Predictor& inner, Transform transform)
        : inner_(inner), transform_(std::move(transform)) {}

    /// Takes ownership of the wrapped predictor.
    TransformedPredictor(std::unique_ptr<Predictor> inner, Transform transform)
        : owned_(std::move(inner)), inner_(*owned_), transform_(std::move(transform)) {}

    std::size_t input_dim() const override { return inner_.input_dim(); }
    std::size_t n_classes() const override { return inner_.n_classes(); }
    bool has_gradient() const override { return inner_.has_gradient(); }

protected:
    Matrix evaluate(const Matrix& batch) override {
        Matrix t(batch.rows(), batch.cols());
        for (Eigen::Index r = 0; r < batch.rows(); ++r) t.row(r) = transform_(batch.row(r).transpose()).transpose();
        return inner_.predict(t);
    }
    Vector evaluate_vjp(const Vector& x, const Vector& upstream) override {
        return inner_.vjp(transform_(x), upstream);
    }

private:
    std::unique_ptr<Predictor> owned_;
    Predictor& inner_;
    Transform transform_;
};

inline int predicted_class(Predictor& p, const Vector& x) { return argmax_lowest(p.predict_one(x)); }

/// Row indices grouped by predicted class.
struct ClassPartition {
    std::vector<int> labels;                      // per row
    std::vector<std::vector<std::size_t>> members;  // per class, ascending row index

    std::size_t n_classes() const noexcept { return members.size(); }
    std::size_t nonempty_classes() const {
        std::size_t k = 0;
        for (const auto& m : members) k += m.empty() ? 0 : 1;
        return k;
    }
};

inline ClassPartition label_dataset(Predictor& p, const Matrix& x) {
    if (x.rows() == 0) throw Error("label_dataset: empty dataset");
    const Matrix probs = p.predict(x);
    ClassPartition part;
    part.members.resize(static_cast<std::size_t>(probs.cols()));
    part.labels.reserve(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const int c = argmax_lowest(probs.row(r).transpose());
        part.labels.push_back(c);
        part.members[static_cast<std::size_t>(c)].push_back(static_cast<std::size_t>(r));
    }
    return part;
}

/// upstream^T * J with J estimated by central differences; the 2*D perturbed
/// instances go out as a single batch.
inline Vector numerical_gradient(Predictor& p, const Vector& x, const Vector& upstream, double eps = 1e-4) {
    if (!(eps > 0.0)) throw Error("numerical_gradient: eps must be > 0");
    const Eigen::Index d = x.size();
    Matrix batch(2 * d, d);
    for (Eigen::Index k = 0; k < d; ++k) {
        batch.row(2 * k) = x.transpose();
        batch.row(2 * k + 1) = x.transpose();
        batch(2 * k, k) += eps;
        batch(2 * k + 1, k) -= eps;
    }
    const Matrix probs = p.predict(batch);
    if (probs.cols() != upstream.size())
        throw DimensionError("numerical_gradient upstream", static_cast<std::size_t>(probs.cols()),
                             static_cast<std::size_t>(upstream.size()));
    Vector g(d);
    for (Eigen::Index k = 0; k < d; ++k)
        g[k] = upstream.dot((probs.row(2 * k) - probs.row(2 * k + 1)).transpose()) / (2.0 * eps);
    return g;
}

}  // namespace cfproto
