#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfproto/data.hpp"
#include "cfproto/error.hpp"
#include "cfproto/nn.hpp"
#include "cfproto/predict.hpp"
#include "cfproto/proto.hpp"

namespace cfproto {

// --- loss modes ------------------------------------------------------------

/// Which terms enter the objective besides the elastic net, which is always present.
struct LossMode {
    std::string name;
    bool pred = true;
    bool ae = false;
    bool proto = false;

    static LossMode A() { return {"A", true, false, false}; }
    static LossMode B() { return {"B", true, true, false}; }
    static LossMode C() { return {"C", true, false, true}; }
    static LossMode D() { return {"D", true, true, true}; }
    static LossMode E() { return {"E", false, false, true}; }
    static LossMode F() { return {"F", false, true, true}; }

    bool same_terms(const LossMode& o) const { return pred == o.pred && ae == o.ae && proto == o.proto; }
};

/// Letters for encoder-prototype experiments (A-F) or for k-d tree
/// experiments, where A = pred, B = pred + proto, C = proto only.
enum class ModeFamily { encoder, kdtree };

inline LossMode parse_loss_mode(std::string_view letter, ModeFamily family = ModeFamily::encoder) {
    if (family == ModeFamily::kdtree) {
        if (letter == "A") return {"A", true, false, false};
        if (letter == "B") return {"B", true, false, true};
        if (letter == "C") return {"C", false, false, true};
        throw Error("unknown k-d tree loss mode '" + std::string(letter) + "' (expected A, B or C)");
    }
    if (letter == "A") return LossMode::A();
    if (letter == "B") return LossMode::B();
    if (letter == "C") return LossMode::C();
    if (letter == "D") return LossMode::D();
    if (letter == "E") return LossMode::E();
    if (letter == "F") return LossMode::F();
    throw Error("unknown loss mode '" + std::string(letter) + "' (expected A-F)");
}

// --- configuration ---------------------------------------------------------

struct CSearch {
    std::size_t steps = 1;
    double c0 = 1.0;
    double factor = 10.0;
};

struct SearchConfig {
    double c = 1.0;
    double kappa = 0.0;
    double beta = 0.1;
    double gamma = 100.0;
    double theta = 200.0;
    std::size_t max_iterations = 1000;
    double learning_rate = 1e-2;
    std::optional<CSearch> c_search;
    /// Stop once a counterfactual exists and the best EN(delta) has not
    /// improved for this many iterations. 0 runs all max_iterations.
    std::size_t early_stop = 0;
    /// Central-difference step for black-box gradients.
    double grad_eps = 1e-4;
    /// Use numerical L_pred gradients even when the predictor is white-box.
    bool numerical_gradient = false;
    std::optional<FeasibleBox> box;
    std::uint64_t seed = 0;

    void validate() const {
        for (double v : {c, kappa, beta, gamma, theta})
            if (!std::isfinite(v) || v < 0.0) throw Error("search hyperparameters must be finite and >= 0");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw Error("learning rate must be finite");
        if (max_iterations < 1) throw Error("max_iterations must be >= 1");
        if (!(grad_eps > 0.0)) throw Error("grad_eps must be > 0");
        if (c_search && c_search->steps < 1) throw Error("c_search steps must be >= 1");
        if (box) box->validate();
    }
};

/// Prototype weight used with the given mode: lower when the AE term is present.
inline double default_theta(const LossMode& mode) { return mode.ae ? 100.0 : 200.0; }

// --- individual terms -------------------------------------------------------

/// Index of the most probable class other than t0 (lowest index on ties).
inline int best_other_class(const Vector& probs, int t0) {
    int best = -1;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        if (i == t0) continue;
        if (best < 0 || probs[i] > probs[best]) best = static_cast<int>(i);
    }
    if (best < 0) throw Error("prediction has a single class");
    return best;
}

inline double loss_pred(const Vector& probs, int t0, double kappa) {
    return std::max(probs[t0] - probs[best_other_class(probs, t0)], -kappa);
}

inline double loss_pred(Predictor& p, const Vector& x, int t0, double kappa) {
    return loss_pred(p.predict_one(x), t0, kappa);
}

inline double elastic_net(const Vector& delta, double beta) {
    return beta * delta.lpNorm<1>() + delta.squaredNorm();
}

inline double loss_ae(const DenseNet& ae, const Vector& x, double gamma) {
    if (gamma == 0.0) return 0.0;
    return gamma * (x - ae.forward(x)).squaredNorm();
}

inline double loss_proto(const Vector& x, const Prototype& proto, double theta, const DenseNet* enc = nullptr) {
    if (proto.space == PrototypeSpace::latent) {
        if (!enc) throw Error("latent prototype requires an encoder");
        return theta * (enc->forward(x) - proto.point).squaredNorm();
    }
    if (proto.point.size() != x.size())
        throw DimensionError("loss_proto", static_cast<std::size_t>(x.size()),
                             static_cast<std::size_t>(proto.point.size()));
    return theta * (x - proto.point).squaredNorm();
}

/// Coordinatewise soft threshold: 0 where |v| <= beta, else v - beta*sign(v).
inline Vector shrink(const Vector& v, double beta) {
    Vector out(v.size());
    for (Eigen::Index k = 0; k < v.size(); ++k) {
        const double a = v[k];
        out[k] = a > beta ? a - beta : (a < -beta ? a + beta : 0.0);
    }
    return out;
}

// --- objective --------------------------------------------------------------

/// Everything the objective needs beyond the configuration.
struct SearchContext {
    Predictor* predictor = nullptr;
    Vector x0;
    int t0 = -1;
    const DenseNet* ae = nullptr;       // L_AE
    const DenseNet* encoder = nullptr;  // latent L_proto
    std::optional<Prototype> proto;
};

struct LossBreakdown {
    double pred = 0.0;  // c * L_pred (0 when absent)
    double l1 = 0.0;    // beta * L1
    double l2 = 0.0;
    double ae = 0.0;
    double proto = 0.0;
    double total() const { return pred + l1 + l2 + ae + proto; }
    double smooth() const { return pred + l2 + ae + proto; }
};

/// Composite counterfactual objective for one loss mode.
class Objective {
public:
    Objective(LossMode mode, const SearchConfig& cfg, SearchContext ctx)
        : mode_(std::move(mode)), cfg_(cfg), ctx_(std::move(ctx)) {
        if (!ctx_.predictor) throw Error("objective needs a predictor");
        if (static_cast<std::size_t>(ctx_.x0.size()) != ctx_.predictor->input_dim())
            throw DimensionError("objective x0", ctx_.predictor->input_dim(), static_cast<std::size_t>(ctx_.x0.size()));
        if (ctx_.t0 < 0) throw Error("objective needs the original class t0");
        if (mode_.ae && !ctx_.ae) throw Error("loss mode " + mode_.name + " requires an autoencoder");
        if (mode_.ae && ctx_.ae->input_dim() != static_cast<std::size_t>(ctx_.x0.size()))
            throw DimensionError("autoencoder", static_cast<std::size_t>(ctx_.x0.size()), ctx_.ae->input_dim());
        if (mode_.proto) {
            if (!ctx_.proto) throw Error("loss mode " + mode_.name + " requires a prototype");
            if (ctx_.proto->space == PrototypeSpace::latent && !ctx_.encoder)
                throw Error("latent prototype requires an encoder");
        }
    }

    const LossMode& mode() const noexcept { return mode_; }
    const SearchConfig& config() const noexcept { return cfg_; }
    const SearchContext& context() const noexcept { return ctx_; }
    bool uses_numerical_gradient() const {
        return mode_.pred && (cfg_.numerical_gradient || !ctx_.predictor->has_gradient());
    }

    /// All terms at x, given f_pred(x) (ignored when the mode has no L_pred).
    LossBreakdown evaluate(const Vector& x, const Vector& probs) const {
        LossBreakdown b;
        const Vector delta = x - ctx_.x0;
        if (mode_.pred) b.pred = cfg_.c * loss_pred(probs, ctx_.t0, cfg_.kappa);
        b.l1 = cfg_.beta * delta.lpNorm<1>();
        b.l2 = delta.squaredNorm();
        if (mode_.ae) b.ae = loss_ae(*ctx_.ae, x, cfg_.gamma);
        if (mode_.proto) b.proto = loss_proto(x, *ctx_.proto, cfg_.theta, ctx_.encoder);
        return b;
    }

    /// Smooth part of the objective (everything but beta * L1); queries f_pred
    /// only when the mode has L_pred.
    double smooth_value(const Vector& x) const {
        Vector probs;
        if (mode_.pred) probs = ctx_.predictor->predict_one(x);
        return evaluate(x, probs).smooth();
    }

    /// Gradient of the smooth terms w.r.t. x (equivalently w.r.t. delta).
    Vector gradient(const Vector& x) const {
        Vector g = 2.0 * (x - ctx_.x0);
        if (mode_.pred && cfg_.c != 0.0) g += cfg_.c * pred_gradient(x);
        if (mode_.ae && cfg_.gamma != 0.0) {
            const Vector r = x - ctx_.ae->forward(x);
            g += 2.0 * cfg_.gamma * (r - ctx_.ae->input_gradient(x, r));
        }
        if (mode_.proto && cfg_.theta != 0.0) {
            if (ctx_.proto->space == PrototypeSpace::latent) {
                const Vector diff = ctx_.encoder->forward(x) - ctx_.proto->point;
                g += 2.0 * cfg_.theta * ctx_.encoder->input_gradient(x, diff);
            } else {
                g += 2.0 * cfg_.theta * (x - ctx_.proto->point);
            }
        }
        return g;
    }

private:
    // d L_pred / dx. The white-box path costs one prediction (the forward pass).
    // The black-box path costs exactly 2*D predictions: f_pred(x), needed to
    // pick the competing class and test the hinge, is estimated as the mean of
    // the symmetric perturbations.
    Vector pred_gradient(const Vector& x) const {
        Predictor& p = *ctx_.predictor;
        const Eigen::Index d = x.size();
        if (!uses_numerical_gradient()) {
            const Vector probs = p.predict_one(x);
            const int j = best_other_class(probs, ctx_.t0);
            if (!(probs[ctx_.t0] - probs[j] > -cfg_.kappa)) return Vector::Zero(d);
            Vector u = Vector::Zero(probs.size());
            u[ctx_.t0] = 1.0;
            u[j] = -1.0;
            return p.vjp(x, u);
        }
        const double eps = cfg_.grad_eps;
        Matrix batch(2 * d, d);
        for (Eigen::Index k = 0; k < d; ++k) {
            batch.row(2 * k) = x.transpose();
            batch.row(2 * k + 1) = x.transpose();
            batch(2 * k, k) += eps;
            batch(2 * k + 1, k) -= eps;
        }
        const Matrix probs = p.predict(batch);
        const Vector center = probs.colwise().mean().transpose();
        const int j = best_other_class(center, ctx_.t0);
        if (!(center[ctx_.t0] - center[j] > -cfg_.kappa)) return Vector::Zero(d);
        Vector g(d);
        for (Eigen::Index k = 0; k < d; ++k) {
            const double plus = probs(2 * k, ctx_.t0) - probs(2 * k, j);
            const double minus = probs(2 * k + 1, ctx_.t0) - probs(2 * k + 1, j);
            g[k] = (plus - minus) / (2.0 * eps);
        }
        return g;
    }

    LossMode mode_;
    SearchConfig cfg_;
    SearchContext ctx_;
};

inline Vector total_gradient(const Objective& objective, const Vector& x) { return objective.gradient(x); }

// --- search -----------------------------------------------------------------

struct IterateRecord {
    std::size_t n;  // 1-based iterate index
    double en;      // EN(delta^n)
    int cls;        // predicted class of x0 + delta^n
    double loss;    // total objective including beta * L1
};

struct OuterStep {
    double c;
    bool found;
    double best_en;  // +inf when not found
    std::size_t gradient_steps;
};

struct CounterfactualResult {
    std::string mode;
    bool found = false;
    int t0 = -1;
    int cf_class = -1;
    Vector x0;
    Vector x_cf;
    Vector delta_star;
    std::size_t n_star = 0;  // 0 when not found
    double en = std::numeric_limits<double>::infinity();
    double c = 0.0;  // c of the inner run that produced the result
    std::vector<IterateRecord> trace;  // trace of that inner run
    std::vector<OuterStep> outer;      // one entry per c-search step
    std::size_t gradient_steps = 0;
    std::uint64_t prediction_calls = 0;
    double wall_seconds = 0.0;
    std::optional<Prototype> proto;
};

namespace detail {

inline void project(Vector& delta, const Vector& x0, const FeasibleBox& box) {
    for (Eigen::Index k = 0; k < delta.size(); ++k) {
        const double x = std::clamp(x0[k] + delta[k], box.lower[k], box.upper[k]);
        delta[k] = x - x0[k];
        // x - x0 can round so that x0 + delta lands one ulp outside.
        while (x0[k] + delta[k] > box.upper[k]) delta[k] = std::nextafter(delta[k], -HUGE_VAL);
        while (x0[k] + delta[k] < box.lower[k]) delta[k] = std::nextafter(delta[k], HUGE_VAL);
    }
    for (auto f : box.frozen) delta[static_cast<Eigen::Index>(f)] = 0.0;
}

}  // namespace detail

/// FISTA over delta with soft thresholding by beta, box projection and
/// frozen features. Returns the class-changing iterate with the smallest
/// EN(delta); found=false when no iterate changes the class.
inline CounterfactualResult fista_search(const Objective& objective) {
    const auto& cfg = objective.config();
    const auto& ctx = objective.context();
    cfg.validate();
    Predictor& predictor = *ctx.predictor;
    const Vector& x0 = ctx.x0;
    const Eigen::Index d = x0.size();
    const FeasibleBox box = cfg.box ? *cfg.box : FeasibleBox::unbounded(static_cast<std::size_t>(d));
    if (box.dim() != static_cast<std::size_t>(d))
        throw DimensionError("feasible box", static_cast<std::size_t>(d), box.dim());
    if (!box.contains(x0)) throw Error("feasible box does not contain x0");

    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t calls_before = predictor.calls();

    CounterfactualResult res;
    res.mode = objective.mode().name;
    res.t0 = ctx.t0;
    res.x0 = x0;
    res.c = cfg.c;
    res.proto = ctx.proto;
    res.trace.reserve(cfg.max_iterations);

    Vector delta = Vector::Zero(d);
    Vector lookahead = Vector::Zero(d);
    double t = 1.0;
    std::size_t since_improvement = 0;

    for (std::size_t n = 1; n <= cfg.max_iterations; ++n) {
        const Vector grad = objective.gradient(x0 + lookahead);
        Vector next = shrink(lookahead - cfg.learning_rate * grad, cfg.beta);
        detail::project(next, x0, box);
        ++res.gradient_steps;

        const Vector x = x0 + next;
        const Vector probs = predictor.predict_one(x);
        const int cls = argmax_lowest(probs);
        const double en = elastic_net(next, cfg.beta);
        res.trace.push_back({n, en, cls, objective.evaluate(x, probs).total()});

        ++since_improvement;
        if (cls != ctx.t0 && en < res.en) {
            res.found = true;
            res.en = en;
            res.n_star = n;
            res.cf_class = cls;
            res.delta_star = next;
            since_improvement = 0;
        }

        const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
        lookahead = next + ((t - 1.0) / t_next) * (next - delta);
        detail::project(lookahead, x0, box);
        delta = std::move(next);
        t = t_next;

        if (cfg.early_stop > 0 && res.found && since_improvement >= cfg.early_stop) break;
    }

    if (res.found) {
        res.x_cf = x0 + res.delta_star;
    } else {
        res.delta_star = Vector::Zero(d);
        res.x_cf = x0;
    }
    res.prediction_calls = predictor.calls() - calls_before;
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.outer.push_back({cfg.c, res.found, res.en, res.gradient_steps});
    return res;
}

inline CounterfactualResult fista_search(const LossMode& mode, const SearchConfig& cfg, const SearchContext& ctx) {
    return fista_search(Objective(mode, cfg, ctx));
}

/// Outer search over c: multiply by `factor` while no counterfactual is found,
/// bisect between the last failing and last succeeding c afterwards. Stops at
/// the first success if no failure has been seen. Modes without L_pred run once.
inline CounterfactualResult c_search(const LossMode& mode, SearchConfig cfg, const SearchContext& ctx) {
    if (!mode.pred || !cfg.c_search) return fista_search(mode, cfg, ctx);
    const CSearch sched = *cfg.c_search;
    if (sched.steps < 1) throw Error("c_search steps must be >= 1");

    double c = sched.c0;
    std::optional<double> lower;  // last failing c
    std::optional<double> upper;  // last succeeding c
    std::optional<CounterfactualResult> best;
    std::vector<OuterStep> outer;
    std::size_t steps = 0;
    std::uint64_t calls = 0;
    double seconds = 0.0;

    for (std::size_t s = 0; s < sched.steps; ++s) {
        cfg.c = c;
        CounterfactualResult r = fista_search(mode, cfg, ctx);
        outer.push_back(r.outer.front());
        steps += r.gradient_steps;
        calls += r.prediction_calls;
        seconds += r.wall_seconds;
        if (r.found) {
            if (!best || !best->found || r.en < best->en) best = std::move(r);
            upper = c;
            if (!lower) break;
            c = 0.5 * (*lower + *upper);
        } else {
            if (!best) best = std::move(r);
            lower = c;
            c = upper ? 0.5 * (*lower + *upper) : c * sched.factor;
        }
    }
    best->outer = std::move(outer);
    best->gradient_steps = steps;
    best->prediction_calls = calls;
    best->wall_seconds = seconds;
    return *best;
}

// --- reports ----------------------------------------------------------------

inline nlohmann::json to_json(const SearchConfig& cfg) {
    nlohmann::json j{{"c", cfg.c},
                     {"kappa", cfg.kappa},
                     {"beta", cfg.beta},
                     {"gamma", cfg.gamma},
                     {"theta", cfg.theta},
                     {"max_iterations", cfg.max_iterations},
                     {"learning_rate", cfg.learning_rate},
                     {"early_stop", cfg.early_stop},
                     {"grad_eps", cfg.grad_eps},
                     {"numerical_gradient", cfg.numerical_gradient},
                     {"seed", cfg.seed}};
    if (cfg.c_search)
        j["c_search"] = {{"steps", cfg.c_search->steps}, {"c0", cfg.c_search->c0}, {"factor", cfg.c_search->factor}};
    if (cfg.box && !cfg.box->frozen.empty()) j["frozen"] = cfg.box->frozen;
    return j;
}

inline SearchConfig search_config_from_json(const nlohmann::json& j, SearchConfig cfg = {}) {
    try {
        cfg.c = j.value("c", cfg.c);
        cfg.kappa = j.value("kappa", cfg.kappa);
        cfg.beta = j.value("beta", cfg.beta);
        cfg.gamma = j.value("gamma", cfg.gamma);
        cfg.theta = j.value("theta", cfg.theta);
        cfg.max_iterations = j.value("max_iterations", cfg.max_iterations);
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        cfg.early_stop = j.value("early_stop", cfg.early_stop);
        cfg.grad_eps = j.value("grad_eps", cfg.grad_eps);
        cfg.numerical_gradient = j.value("numerical_gradient", cfg.numerical_gradient);
        cfg.seed = j.value("seed", cfg.seed);
        if (j.contains("c_search") && !j["c_search"].is_null()) {
            const auto& cj = j["c_search"];
            cfg.c_search = CSearch{cj.value("steps", std::size_t{1}), cj.value("c0", cfg.c), cj.value("factor", 10.0)};
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid search configuration: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

/// Run report. Traces longer than `max_trace` iterates are elided.
inline nlohmann::json to_json(const CounterfactualResult& r, std::size_t max_trace = 10000) {
    nlohmann::json j{{"mode", r.mode},
                     {"found", r.found},
                     {"t0", r.t0},
                     {"cf_class", r.cf_class},
                     {"n_star", r.n_star},
                     {"en", r.found ? nlohmann::json(r.en) : nlohmann::json(nullptr)},
                     {"c", r.c},
                     {"x0", to_std(r.x0)},
                     {"x_cf", to_std(r.x_cf)},
                     {"delta", to_std(r.delta_star)},
                     {"counters",
                      {{"gradient_steps", r.gradient_steps},
                       {"prediction_calls", r.prediction_calls},
                       {"wall_seconds", r.wall_seconds}}}};
    nlohmann::json outer = nlohmann::json::array();
    for (const auto& o : r.outer)
        outer.push_back({{"c", o.c},
                         {"found", o.found},
                         {"best_en", o.found ? nlohmann::json(o.best_en) : nlohmann::json(nullptr)},
                         {"gradient_steps", o.gradient_steps}});
    j["c_steps"] = outer;
    if (r.proto) j["prototype"] = to_json(*r.proto);
    if (r.trace.size() <= max_trace) {
        nlohmann::json tr = nlohmann::json::array();
        for (const auto& it : r.trace) tr.push_back({it.n, it.en, it.cls, it.loss});
        j["trace"] = {{"columns", {"n", "en", "class", "loss"}}, {"rows", tr}};
    } else {
        j["trace"] = {{"elided", true}, {"length", r.trace.size()}};
    }
    return j;
}

}  // namespace cfproto
