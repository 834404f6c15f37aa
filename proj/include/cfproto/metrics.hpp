#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfproto/data.hpp"
#include "cfproto/error.hpp"
#include "cfproto/nn.hpp"
#include "cfproto/predict.hpp"
#include "cfproto/proto.hpp"
#include "cfproto/search.hpp"

namespace cfproto {

inline constexpr double kMetricEps = 1e-10;

/// Reconstruction error under the counterfactual-class AE relative to the
/// original-class AE. Lower means x_cf looks more like class i.
inline double im1(const DenseNet& ae_i, const DenseNet& ae_t0, const Vector& x_cf, double eps = kMetricEps) {
    if (ae_i.input_dim() != static_cast<std::size_t>(x_cf.size()))
        throw DimensionError("im1", ae_i.input_dim(), static_cast<std::size_t>(x_cf.size()));
    if (ae_t0.input_dim() != static_cast<std::size_t>(x_cf.size()))
        throw DimensionError("im1", ae_t0.input_dim(), static_cast<std::size_t>(x_cf.size()));
    return (x_cf - ae_i.forward(x_cf)).squaredNorm() / ((x_cf - ae_t0.forward(x_cf)).squaredNorm() + eps);
}

/// Disagreement between the counterfactual-class AE and the AE trained on all
/// classes, normalised by the L1 norm of x_cf.
inline double im2(const DenseNet& ae_i, const DenseNet& ae_full, const Vector& x_cf, double eps = kMetricEps) {
    if (ae_i.input_dim() != static_cast<std::size_t>(x_cf.size()))
        throw DimensionError("im2", ae_i.input_dim(), static_cast<std::size_t>(x_cf.size()));
    if (ae_full.input_dim() != static_cast<std::size_t>(x_cf.size()))
        throw DimensionError("im2", ae_full.input_dim(), static_cast<std::size_t>(x_cf.size()));
    return (ae_i.forward(x_cf) - ae_full.forward(x_cf)).squaredNorm() / (x_cf.lpNorm<1>() + eps);
}

/// Autoencoders used to score counterfactuals.
struct EvalSuite {
    DenseNet ae_full;
    std::map<int, DenseNet> ae_per_class;
    double eps = kMetricEps;

    void validate() const {
        if (ae_full.empty()) throw Error("eval suite lacks the full-data autoencoder");
        for (const auto& [cls, ae] : ae_per_class)
            if (ae.input_dim() != ae_full.input_dim())
                throw DimensionError("eval suite autoencoder for class " + std::to_string(cls), ae_full.input_dim(),
                                     ae.input_dim());
    }

    const DenseNet& class_ae(int cls) const {
        auto it = ae_per_class.find(cls);
        if (it == ae_per_class.end()) throw Error("eval suite has no autoencoder for class " + std::to_string(cls));
        return it->second;
    }

    double im1(const Vector& x_cf, int cf_class, int t0) const {
        return cfproto::im1(class_ae(cf_class), class_ae(t0), x_cf, eps);
    }
    double im2(const Vector& x_cf, int cf_class) const { return cfproto::im2(class_ae(cf_class), ae_full, x_cf, eps); }
};

// --- summary statistics -----------------------------------------------------

/// mean +- 1.96 * (sample std / sqrt(n)). With n = 1 the half-width is 0 and
/// `degenerate` is set; with n = 0 the statistic is absent.
struct Interval {
    std::size_t n = 0;
    double mean = 0.0;
    double std = 0.0;
    double half_width = 0.0;
    bool degenerate = false;

    bool present() const noexcept { return n > 0; }
    double lower() const { return mean - half_width; }
    double upper() const { return mean + half_width; }
};

inline Interval confidence_interval(const std::vector<double>& values) {
    Interval ci;
    ci.n = values.size();
    if (ci.n == 0) return ci;
    ci.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(ci.n);
    if (ci.n == 1) {
        ci.degenerate = true;
        return ci;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - ci.mean) * (v - ci.mean);
    ci.std = std::sqrt(ss / static_cast<double>(ci.n - 1));
    ci.half_width = 1.96 * ci.std / std::sqrt(static_cast<double>(ci.n));
    return ci;
}

inline nlohmann::json to_json(const Interval& ci) {
    if (!ci.present()) return nullptr;
    return {{"n", ci.n},
            {"mean", ci.mean},
            {"std", ci.std},
            {"ci95", {ci.lower(), ci.upper()}},
            {"half_width", ci.half_width},
            {"degenerate", ci.degenerate}};
}

// --- experiment harness -------------------------------------------------------

/// One counterfactual search of the protocol.
struct RunRecord {
    std::size_t instance = 0;  // index into the test rows
    std::uint64_t seed = 0;
    std::string mode;
    double theta = 0.0;
    bool found = false;
    int t0 = -1;
    int cf_class = -1;
    std::size_t n_star = 0;
    std::size_t gradient_steps = 0;
    std::uint64_t prediction_calls = 0;
    double wall_seconds = 0.0;
    std::optional<double> en;
    std::optional<double> im1;
    std::optional<double> im2;
    CounterfactualResult result;
};

struct ModeSummary {
    std::string mode;
    std::size_t runs = 0;
    std::size_t found = 0;
    std::size_t gradient_steps_total = 0;  // over found runs
    Interval wall_seconds, gradient_steps, im1, im2, en;
};

struct ExperimentSummary {
    std::string label;
    std::vector<ModeSummary> modes;
    std::vector<RunRecord> runs;
    nlohmann::json config;

    const ModeSummary& mode(const std::string& name) const {
        for (const auto& m : modes)
            if (m.mode == name) return m;
        throw Error("no summary for loss mode " + name);
    }
};

/// Produces a fresh predictor; each worker thread owns one.
using PredictorFactory = std::function<std::unique_ptr<Predictor>()>;

/// Everything one run of the protocol needs. Rows live in the numeric search space.
struct ExperimentSetup {
    Matrix train_x;
    Matrix test_x;
    PredictorFactory make_predictor;
    ModeFamily family = ModeFamily::kdtree;
    std::vector<LossMode> modes;
    SearchConfig cfg;
    /// Use default_theta(mode) instead of cfg.theta.
    bool theta_per_mode = false;
    const DenseNet* ae = nullptr;       // L_AE
    const DenseNet* encoder = nullptr;  // encoder prototypes
    std::size_t k = 1;                  // k-th nearest tree item
    std::size_t K = 5;                  // encodings averaged per prototype
    /// Fraction of training rows drawn per seed as the representative sample.
    double sample_fraction = 0.8;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::size_t jobs = 1;
    const EvalSuite* eval = nullptr;
};

namespace detail {

inline std::vector<std::size_t> sample_rows(std::size_t n, double fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (fraction >= 1.0) return idx;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
    idx.resize(std::min(take, n));
    std::sort(idx.begin(), idx.end());
    return idx;
}

struct SeedState {
    Matrix sample;
    ClassPartition labels;
    std::map<int, KdTree> trees;
};

/// Runs `fn(i)` for i in [0, n) on `jobs` threads. The first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t, std::size_t)>& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&](std::size_t w) {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(w, i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                next.store(n);
                return;
            }
        }
    };
    if (jobs == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < jobs; ++w) pool.emplace_back(worker, w);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
}

inline ModeSummary summarize(const std::string& mode, const std::vector<RunRecord>& runs) {
    ModeSummary s;
    s.mode = mode;
    std::vector<double> secs, steps, im1s, im2s, ens;
    for (const auto& r : runs) {
        if (r.mode != mode) continue;
        ++s.runs;
        if (!r.found) continue;
        ++s.found;
        s.gradient_steps_total += r.gradient_steps;
        secs.push_back(r.wall_seconds);
        steps.push_back(static_cast<double>(r.gradient_steps));
        if (r.en) ens.push_back(*r.en);
        if (r.im1) im1s.push_back(*r.im1);
        if (r.im2) im2s.push_back(*r.im2);
    }
    s.wall_seconds = confidence_interval(secs);
    s.gradient_steps = confidence_interval(steps);
    s.im1 = confidence_interval(im1s);
    s.im2 = confidence_interval(im2s);
    s.en = confidence_interval(ens);
    return s;
}

}  // namespace detail

/// Runs every mode on every (test instance, seed). Each seed draws its own
/// representative training sample, which is labelled by the predictor and
/// indexed before timing starts. Timing covers prototype lookup and search.
inline ExperimentSummary run_experiment(const ExperimentSetup& setup) {
    if (!setup.make_predictor) throw Error("run_experiment: no predictor factory");
    if (setup.modes.empty()) throw Error("run_experiment: no loss modes");
    if (setup.test_x.rows() == 0) throw Error("run_experiment: empty test split");
    if (setup.train_x.rows() == 0) throw Error("run_experiment: empty training split");
    if (setup.seeds.empty()) throw Error("run_experiment: no seeds");
    if (setup.train_x.cols() != setup.test_x.cols())
        throw DimensionError("run_experiment test rows", static_cast<std::size_t>(setup.train_x.cols()),
                             static_cast<std::size_t>(setup.test_x.cols()));
    if (setup.family == ModeFamily::encoder && !setup.encoder)
        for (const auto& m : setup.modes)
            if (m.proto) throw Error("run_experiment: encoder prototypes need an encoder");
    if (setup.eval) setup.eval->validate();
    setup.cfg.validate();

    // Per-seed representative sample, labels and class index.
    std::vector<detail::SeedState> seeds(setup.seeds.size());
    {
        auto predictor = setup.make_predictor();
        for (std::size_t s = 0; s < setup.seeds.size(); ++s) {
            const auto rows = detail::sample_rows(static_cast<std::size_t>(setup.train_x.rows()),
                                                  setup.sample_fraction, setup.seeds[s]);
            Matrix sample(static_cast<Eigen::Index>(rows.size()), setup.train_x.cols());
            for (std::size_t i = 0; i < rows.size(); ++i)
                sample.row(static_cast<Eigen::Index>(i)) = setup.train_x.row(static_cast<Eigen::Index>(rows[i]));
            seeds[s].labels = label_dataset(*predictor, sample);
            if (setup.family == ModeFamily::kdtree) seeds[s].trees = build_class_trees(sample, seeds[s].labels);
            seeds[s].sample = std::move(sample);
        }
    }

    const std::size_t n_test = static_cast<std::size_t>(setup.test_x.rows());
    const std::size_t n_seeds = setup.seeds.size();
    const std::size_t n_modes = setup.modes.size();
    const std::size_t total = n_test * n_seeds * n_modes;
    std::vector<RunRecord> runs(total);

    std::vector<std::unique_ptr<Predictor>> predictors(std::max<std::size_t>(1, std::min(setup.jobs, total)));
    for (auto& p : predictors) p = setup.make_predictor();

    detail::parallel_for(total, predictors.size(), [&](std::size_t worker, std::size_t job) {
        const std::size_t i = job / (n_seeds * n_modes);
        const std::size_t s = (job / n_modes) % n_seeds;
        const std::size_t m = job % n_modes;
        Predictor& predictor = *predictors[worker];
        const LossMode& mode = setup.modes[m];
        const Vector x0 = setup.test_x.row(static_cast<Eigen::Index>(i)).transpose();

        SearchConfig cfg = setup.cfg;
        cfg.seed = setup.seeds[s];
        if (setup.theta_per_mode) cfg.theta = default_theta(mode);

        SearchContext ctx;
        ctx.predictor = &predictor;
        ctx.x0 = x0;
        ctx.t0 = predicted_class(predictor, x0);
        ctx.ae = setup.ae;
        ctx.encoder = setup.encoder;

        const auto start = std::chrono::steady_clock::now();
        if (mode.proto) {
            if (setup.family == ModeFamily::kdtree) {
                ctx.proto = nearest_prototype(seeds[s].trees, x0, ctx.t0, setup.k);
            } else {
                const auto protos =
                    encoder_prototypes(*setup.encoder, seeds[s].sample, seeds[s].labels, x0, setup.K);
                ctx.proto = nearest_prototype(protos, *setup.encoder, x0, ctx.t0);
            }
        }
        const double lookup = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        CounterfactualResult res = c_search(mode, cfg, ctx);
        res.wall_seconds += lookup;

        RunRecord& rec = runs[job];
        rec.instance = i;
        rec.seed = setup.seeds[s];
        rec.mode = mode.name;
        rec.theta = cfg.theta;
        rec.found = res.found;
        rec.t0 = res.t0;
        rec.cf_class = res.cf_class;
        rec.n_star = res.n_star;
        rec.gradient_steps = res.gradient_steps;
        rec.prediction_calls = res.prediction_calls;
        rec.wall_seconds = res.wall_seconds;
        if (res.found) {
            rec.en = res.en;
            if (setup.eval) {
                rec.im1 = setup.eval->im1(res.x_cf, res.cf_class, res.t0);
                rec.im2 = setup.eval->im2(res.x_cf, res.cf_class);
            }
        }
        rec.result = std::move(res);
    });

    ExperimentSummary summary;
    summary.runs = std::move(runs);
    for (const auto& mode : setup.modes) summary.modes.push_back(detail::summarize(mode.name, summary.runs));
    summary.config = {{"search", to_json(setup.cfg)},
                      {"family", setup.family == ModeFamily::kdtree ? "kdtree" : "encoder"},
                      {"theta_per_mode", setup.theta_per_mode},
                      {"k", setup.k},
                      {"K", setup.K},
                      {"sample_fraction", setup.sample_fraction},
                      {"seeds", setup.seeds},
                      {"n_test", n_test},
                      {"ci", "normal approximation: mean +- 1.96 * sample std / sqrt(n)"}};
    return summary;
}

enum class SweepParameter { theta, k, K };

inline SweepParameter parse_sweep_parameter(const std::string& s) {
    if (s == "theta") return SweepParameter::theta;
    if (s == "k") return SweepParameter::k;
    if (s == "K") return SweepParameter::K;
    throw Error("unknown sweep parameter '" + s + "' (expected theta, k or K)");
}

/// One experiment per value of the swept parameter.
inline std::vector<ExperimentSummary> sweep(SweepParameter param, const std::vector<double>& values,
                                            const ExperimentSetup& base) {
    if (values.empty()) throw Error("sweep: no values");
    if (param == SweepParameter::k && base.family != ModeFamily::kdtree)
        throw Error("sweep: k applies to k-d tree prototypes only");
    if (param == SweepParameter::K && base.family != ModeFamily::encoder)
        throw Error("sweep: K applies to encoder prototypes only");
    std::vector<ExperimentSummary> out;
    for (double v : values) {
        ExperimentSetup setup = base;
        std::ostringstream label;
        switch (param) {
            case SweepParameter::theta:
                if (!(v >= 0.0)) throw Error("sweep: theta must be >= 0");
                setup.cfg.theta = v;
                setup.theta_per_mode = false;
                label << "theta=" << v;
                break;
            case SweepParameter::k:
            case SweepParameter::K: {
                if (!(v >= 1.0) || v != std::floor(v)) throw Error("sweep: k and K must be positive integers");
                const auto n = static_cast<std::size_t>(v);
                (param == SweepParameter::k ? setup.k : setup.K) = n;
                label << (param == SweepParameter::k ? "k=" : "K=") << n;
                break;
            }
        }
        ExperimentSummary s = run_experiment(setup);
        s.label = label.str();
        out.push_back(std::move(s));
    }
    return out;
}

// --- reports ------------------------------------------------------------------

namespace detail {
inline std::string format_ci(const Interval& ci, double scale, int precision) {
    if (!ci.present()) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << ci.mean * scale << " +- " << ci.half_width * scale;
    return os.str();
}
}  // namespace detail

/// Plain-text comparison table, one row per loss mode. IM2 is shown times 10.
inline std::string format_table(const ExperimentSummary& s) {
    std::ostringstream os;
    if (!s.label.empty()) os << s.label << "\n";
    os << "95% bounds: mean +- 1.96 * std / sqrt(n), over found counterfactuals\n";
    os << std::left << std::setw(8) << "Method" << std::setw(20) << "Time (s)" << std::setw(20) << "Gradient steps"
       << std::setw(18) << "IM1" << std::setw(18) << "IM2 (x10)" << std::setw(18) << "EN" << "Found\n";
    for (const auto& m : s.modes) {
        os << std::left << std::setw(8) << m.mode << std::setw(20) << detail::format_ci(m.wall_seconds, 1.0, 4)
           << std::setw(20) << detail::format_ci(m.gradient_steps, 1.0, 1) << std::setw(18)
           << detail::format_ci(m.im1, 1.0, 3) << std::setw(18) << detail::format_ci(m.im2, 10.0, 3) << std::setw(18)
           << detail::format_ci(m.en, 1.0, 4) << m.found << "/" << m.runs << "\n";
    }
    return os.str();
}

inline nlohmann::json to_json(const ModeSummary& m) {
    return {{"mode", m.mode},
            {"runs", m.runs},
            {"found", m.found},
            {"not_found", m.runs - m.found},
            {"gradient_steps_total", m.gradient_steps_total},
            {"wall_seconds", to_json(m.wall_seconds)},
            {"gradient_steps", to_json(m.gradient_steps)},
            {"im1", to_json(m.im1)},
            {"im2", to_json(m.im2)},
            {"en", to_json(m.en)}};
}

inline nlohmann::json to_json(const RunRecord& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"instance", r.instance},
            {"seed", r.seed},
            {"mode", r.mode},
            {"theta", r.theta},
            {"found", r.found},
            {"t0", r.t0},
            {"cf_class", r.cf_class},
            {"n_star", r.n_star},
            {"gradient_steps", r.gradient_steps},
            {"prediction_calls", r.prediction_calls},
            {"wall_seconds", r.wall_seconds},
            {"en", opt(r.en)},
            {"im1", opt(r.im1)},
            {"im2", opt(r.im2)},
            {"x_cf", to_std(r.result.x_cf)},
            {"delta", to_std(r.result.delta_star)}};
}

/// Summary report; per-run details are included when `with_runs` is set.
inline nlohmann::json to_json(const ExperimentSummary& s, bool with_runs = false) {
    nlohmann::json j{{"label", s.label}, {"config", s.config}, {"modes", nlohmann::json::array()}};
    for (const auto& m : s.modes) j["modes"].push_back(to_json(m));
    if (with_runs) {
        j["runs"] = nlohmann::json::array();
        for (const auto& r : s.runs) j["runs"].push_back(to_json(r));
    }
    return j;
}

}  // namespace cfproto
