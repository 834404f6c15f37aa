// cfproto: prepare data, train models, explain single rows and evaluate the
// counterfactual protocol from one JSON run configuration.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cfproto/cfproto.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cfproto;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

/// Bad configuration or arguments; exits with code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Overrides {
    std::optional<std::string> mode;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::optional<std::string> sweep;
    std::vector<std::string> freeze;
    std::optional<std::string> blackbox_cmd;
};

struct RunConfig {
    json raw;  // resolved document, echoed into outputs
    fs::path base;

    fs::path data, schema, out_dir;
    std::size_t train_begin = 0, train_end = 0, test_begin = 0, test_end = 0;
    ScalingMethod scaling = ScalingMethod::standard;
    EmbeddingParams embedding;

    std::optional<fs::path> model_file;
    std::optional<std::string> blackbox_cmd;

    std::vector<std::size_t> classifier_hidden{40, 40};
    TrainConfig classifier_train;
    std::vector<std::size_t> ae_encoder{20, 10, 6}, ae_decoder{10, 20};
    TrainConfig ae_train;

    ModeFamily family = ModeFamily::kdtree;
    std::vector<std::string> modes{"A"};
    SearchConfig search;
    bool theta_per_mode = false;
    bool box_from_data = false;
    std::vector<std::string> frozen;
    std::size_t k = 1, K = 5;
    double sample_fraction = 0.8;
    std::vector<std::uint64_t> seeds{0};
    std::size_t jobs = 1;
    std::uint64_t seed = 0;

    fs::path out(const std::string& name) const { return out_dir / name; }
    fs::path classifier_path() const { return model_file ? *model_file : out("classifier.json"); }
};

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

TrainConfig train_config_from_json(const json& j, TrainConfig cfg) {
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    const std::string opt = j.value("optimizer", std::holds_alternative<SgdParams>(cfg.optimizer) ? "sgd" : "adam");
    if (opt == "sgd") {
        cfg.optimizer = SgdParams{j.value("lr", 1e-2)};
    } else if (opt == "adam") {
        cfg.optimizer = AdamParams{j.value("lr", 1e-3)};
    } else {
        throw UsageError("unknown optimizer '" + opt + "'");
    }
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

RunConfig load_config(const std::string& path, const Overrides& ov) {
    if (!fs::exists(path)) throw UsageError("config file not found: " + path);
    RunConfig rc;
    try {
        rc.raw = read_json_file(path);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    const json& j = rc.raw;
    rc.base = fs::absolute(path).parent_path();
    try {
        rc.data = resolve(rc.base, j.at("data").get<std::string>());
        rc.schema = resolve(rc.base, j.at("schema").get<std::string>());
        rc.out_dir = resolve(rc.base, j.value("output_dir", std::string("out")));
        const auto& split = j.at("split");
        const auto train = split.at("train").get<std::vector<std::size_t>>();
        const auto test = split.at("test").get<std::vector<std::size_t>>();
        if (train.size() != 2 || test.size() != 2 || train[0] > train[1] || test[0] > test[1])
            throw UsageError("split ranges must be [begin, end)");
        rc.train_begin = train[0];
        rc.train_end = train[1];
        rc.test_begin = test[0];
        rc.test_end = test[1];
        rc.scaling = parse_scaling_method(j.value("scaling", std::string("standard")));
        rc.seed = j.value("seed", std::uint64_t{0});

        if (j.contains("categorical")) {
            const auto& c = j["categorical"];
            const std::string method = c.value("method", std::string("abdm"));
            if (method == "abdm") {
                rc.embedding.method = CategoryDistanceMethod::abdm;
            } else if (method == "mvdm") {
                rc.embedding.method = CategoryDistanceMethod::mvdm;
            } else {
                throw UsageError("unknown categorical method '" + method + "'");
            }
            rc.embedding.alpha = c.value("alpha", rc.embedding.alpha);
            rc.embedding.n_bins = c.value("n_bins", rc.embedding.n_bins);
            rc.embedding.smoothing = c.value("smoothing", rc.embedding.smoothing);
            rc.embedding.scale = parse_scaling_method(c.value("scale", std::string("standard")));
        }

        const json model = j.value("model", json::object());
        if (model.contains("file")) rc.model_file = resolve(rc.base, model["file"].get<std::string>());
        if (model.contains("blackbox")) rc.blackbox_cmd = model["blackbox"].get<std::string>();
        if (ov.blackbox_cmd) {
            rc.blackbox_cmd = ov.blackbox_cmd;
            rc.model_file.reset();
        }
        if (rc.model_file && rc.blackbox_cmd) throw UsageError("model: give either 'file' or 'blackbox', not both");

        rc.classifier_train.optimizer = SgdParams{};
        rc.classifier_train.loss = LossKind::cross_entropy;
        rc.classifier_train.seed = rc.seed;
        rc.ae_train.seed = rc.seed;
        if (j.contains("classifier")) {
            rc.classifier_hidden = j["classifier"].value("hidden", rc.classifier_hidden);
            rc.classifier_train = train_config_from_json(j["classifier"], rc.classifier_train);
        }
        if (j.contains("autoencoder")) {
            rc.ae_encoder = j["autoencoder"].value("encoder", rc.ae_encoder);
            rc.ae_decoder = j["autoencoder"].value("decoder", rc.ae_decoder);
            rc.ae_train = train_config_from_json(j["autoencoder"], rc.ae_train);
        }

        const std::string family = j.value("family", std::string("kdtree"));
        if (family == "kdtree") {
            rc.family = ModeFamily::kdtree;
        } else if (family == "encoder") {
            rc.family = ModeFamily::encoder;
        } else {
            throw UsageError("family must be 'kdtree' or 'encoder'");
        }
        if (j.contains("modes")) rc.modes = j["modes"].get<std::vector<std::string>>();
        if (ov.mode) rc.modes = split_list(*ov.mode);
        if (rc.modes.empty()) throw UsageError("no loss mode given");
        for (const auto& m : rc.modes) {
            try {
                parse_loss_mode(m, rc.family);
            } catch (const Error& e) {
                throw UsageError(e.what());
            }
        }

        const json search = j.value("search", json::object());
        rc.search = search_config_from_json(search);
        rc.theta_per_mode = !search.contains("theta") && rc.family == ModeFamily::encoder;
        rc.box_from_data = search.value("box", std::string("none")) == "data";
        rc.frozen = search.value("frozen", std::vector<std::string>{});
        if (!ov.freeze.empty()) rc.frozen = ov.freeze;

        const json protos = j.value("prototypes", json::object());
        rc.k = protos.value("k", rc.k);
        rc.K = protos.value("K", rc.K);
        rc.sample_fraction = protos.value("sample_fraction", rc.sample_fraction);

        const json exp = j.value("experiment", json::object());
        rc.seeds = exp.value("seeds", std::vector<std::uint64_t>{rc.seed});
        rc.jobs = exp.value("jobs", rc.jobs);
    } catch (const json::exception& e) {
        throw UsageError(std::string("invalid config: ") + e.what());
    } catch (const ParseError& e) {
        throw UsageError(std::string("invalid config: ") + e.what());
    }
    if (ov.seed) {
        rc.seed = *ov.seed;
        rc.seeds = {*ov.seed};
    }
    if (ov.jobs) rc.jobs = *ov.jobs;
    if (rc.jobs < 1) throw UsageError("--jobs must be >= 1");

    // Echo the effective settings.
    rc.raw["resolved"] = {{"modes", rc.modes},
                          {"seeds", rc.seeds},
                          {"frozen", rc.frozen},
                          {"search", to_json(rc.search)},
                          {"model", rc.blackbox_cmd ? json{{"blackbox", *rc.blackbox_cmd}}
                                                    : json{{"file", rc.classifier_path().string()}}}};
    return rc;
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

// --- prepared data ------------------------------------------------------------

struct Prepared {
    Dataset raw;
    NumericSpace space;
    Matrix numeric;  // all rows in the search space
    Matrix train() const { return numeric.middleRows(static_cast<Eigen::Index>(train_begin), static_cast<Eigen::Index>(train_end - train_begin)); }
    Matrix test() const { return numeric.middleRows(static_cast<Eigen::Index>(test_begin), static_cast<Eigen::Index>(test_end - test_begin)); }
    std::vector<int> train_labels() const {
        if (raw.labels.empty()) throw UsageError("dataset has no target column");
        return {raw.labels.begin() + static_cast<std::ptrdiff_t>(train_begin),
                raw.labels.begin() + static_cast<std::ptrdiff_t>(train_end)};
    }
    std::size_t train_begin = 0, train_end = 0, test_begin = 0, test_end = 0;
};

void check_split(const RunConfig& rc, std::size_t n) {
    if (rc.train_end > n || rc.test_end > n)
        throw UsageError("split exceeds the " + std::to_string(n) + " rows of " + rc.data.string());
    if (rc.train_end == rc.train_begin) throw UsageError("empty training split");
}

Prepared load_prepared(const RunConfig& rc) {
    require_file(rc.out("schema.json"), "prepared schema (run 'prepare' first)");
    require_file(rc.data, "dataset");
    Prepared p;
    const FeatureSchema schema = load_schema(rc.out("schema.json").string());
    p.raw = load_csv(rc.data.string(), schema);
    check_split(rc, p.raw.n());
    std::map<std::size_t, CategoryEmbedding> emb;
    if (!schema.categorical_indices().empty()) {
        require_file(rc.out("embeddings.json"), "embeddings");
        emb = embeddings_from_json(read_json_file(rc.out("embeddings.json").string()), schema);
    }
    p.space = NumericSpace(schema, std::move(emb));
    p.numeric = p.space.to_numeric(p.raw.rows);
    p.train_begin = rc.train_begin;
    p.train_end = rc.train_end;
    p.test_begin = rc.test_begin;
    p.test_end = rc.test_end;
    return p;
}

std::unique_ptr<Predictor> make_predictor(const RunConfig& rc, const Prepared& p) {
    std::unique_ptr<Predictor> base;
    if (rc.blackbox_cmd) {
        base = std::make_unique<BlackBoxPredictor>(*rc.blackbox_cmd, p.space.dim());
    } else {
        require_file(rc.classifier_path(), "classifier model (run 'train classifier' first)");
        base = std::make_unique<WhiteBoxPredictor>(load_model(rc.classifier_path().string()));
    }
    if (base->input_dim() != p.space.dim())
        throw UsageError("model input dimension " + std::to_string(base->input_dim()) + " does not match the " +
                         std::to_string(p.space.dim()) + " schema features");
    if (!p.space.has_categoricals()) return base;
    const NumericSpace* space = &p.space;
    return std::make_unique<TransformedPredictor>(std::move(base), [space](const Vector& x) { return space->snap(x); });
}

FeasibleBox make_box(const RunConfig& rc, const Prepared& p, const Vector& x0) {
    FeasibleBox box = rc.box_from_data ? FeasibleBox::from_data(p.train(), x0) : FeasibleBox::unbounded(p.space.dim());
    for (const auto& name : rc.frozen) {
        try {
            box.frozen.push_back(p.space.schema().index_of(name));
        } catch (const Error& e) {
            throw UsageError(std::string("--freeze: ") + e.what());
        }
    }
    return box;
}

void write_json(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    write_json_file(p.string(), j);
}

// --- commands -------------------------------------------------------------------

int cmd_prepare(const RunConfig& rc) {
    require_file(rc.schema, "schema file");
    require_file(rc.data, "dataset");
    FeatureSchema skeleton;
    try {
        skeleton = load_schema(rc.schema.string());
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    const Dataset ds = load_csv(rc.data.string(), skeleton);
    check_split(rc, ds.n());
    const Dataset train = ds.slice(rc.train_begin, rc.train_end);
    FeatureSchema fitted = fit_scaling(train, rc.scaling);
    Dataset fitted_train = train;
    fitted_train.schema = fitted;

    json emb_doc = json{{"embeddings", json::array()}};
    std::size_t n_emb = 0;
    if (!fitted.categorical_indices().empty()) {
        if (rc.embedding.method == CategoryDistanceMethod::mvdm && train.labels.empty())
            throw UsageError("mvdm needs a target column in the dataset");
        auto embeddings = build_embeddings(fitted_train, rc.embedding, train.labels);
        for (const auto& [idx, e] : embeddings)
            if (e.degenerate)
                std::cerr << "warning: all categories of '" << e.feature << "' embed to the same value\n";
        n_emb = embeddings.size();
        emb_doc = embeddings_to_json(embeddings);
    }
    emb_doc["config"] = rc.raw;
    json schema_doc = to_json(fitted);
    write_json(rc.out("schema.json"), schema_doc);
    if (n_emb > 0) write_json(rc.out("embeddings.json"), emb_doc);
    std::cout << "prepared " << fitted.size() << " features (" << n_emb << " embedded categorical) from "
              << train.n() << " training rows -> " << rc.out_dir.string() << "\n";
    return 0;
}

json history_doc(const RunConfig& rc, const TrainResult& tr, json extra) {
    extra["loss_history"] = tr.loss_history;
    extra["config"] = rc.raw;
    return extra;
}

int cmd_train(const RunConfig& rc, const std::string& target, std::optional<int> cls) {
    const Prepared p = load_prepared(rc);
    const Matrix x = p.train();
    if (target == "classifier") {
        if (!p.raw.schema.target) throw UsageError("schema has no target; cannot train a classifier");
        const auto y = p.train_labels();
        const std::size_t n_classes = p.raw.schema.target->classes.size();
        DenseNet net = make_classifier(p.space.dim(), rc.classifier_hidden, n_classes, rc.classifier_train.seed);
        TrainResult tr = train(std::move(net), x, one_hot(y, n_classes), rc.classifier_train);
        const double train_acc = accuracy(tr.net, x, y);
        json extra{{"train_accuracy", train_acc}};
        if (rc.test_end > rc.test_begin) {
            const std::vector<int> ty(p.raw.labels.begin() + static_cast<std::ptrdiff_t>(rc.test_begin),
                                      p.raw.labels.begin() + static_cast<std::ptrdiff_t>(rc.test_end));
            extra["test_accuracy"] = accuracy(tr.net, p.test(), ty);
        }
        save_model(rc.out("classifier.json").string(), tr.net);
        write_json(rc.out("classifier.history.json"), history_doc(rc, tr, extra));
        std::cout << "classifier: train accuracy " << train_acc;
        if (extra.contains("test_accuracy")) std::cout << ", test accuracy " << extra["test_accuracy"].get<double>();
        std::cout << " -> " << rc.out("classifier.json").string() << "\n";
        return 0;
    }
    if (target == "ae-full" || target == "ae-class") {
        Matrix rows = x;
        std::string name = "ae_full";
        if (target == "ae-class") {
            if (!cls) throw UsageError("ae-class needs a class index");
            auto predictor = make_predictor(rc, p);
            const ClassPartition part = label_dataset(*predictor, x);
            if (*cls < 0 || static_cast<std::size_t>(*cls) >= part.n_classes())
                throw UsageError("class index " + std::to_string(*cls) + " out of range");
            const auto& members = part.members[static_cast<std::size_t>(*cls)];
            if (members.empty()) throw UsageError("no training rows are predicted as class " + std::to_string(*cls));
            rows.resize(static_cast<Eigen::Index>(members.size()), x.cols());
            for (std::size_t i = 0; i < members.size(); ++i)
                rows.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(members[i]));
            name = "ae_class_" + std::to_string(*cls);
        }
        DenseNet net = make_autoencoder(p.space.dim(), rc.ae_encoder, rc.ae_decoder, rc.ae_train.seed);
        TrainResult tr = train(std::move(net), rows, rows, rc.ae_train);
        save_model(rc.out(name + ".json").string(), tr.net);
        write_json(rc.out(name + ".history.json"),
                   history_doc(rc, tr, json{{"rows", rows.rows()}, {"final_loss", tr.loss_history.back()}}));
        std::cout << name << ": " << rows.rows() << " rows, final loss " << tr.loss_history.back() << " -> "
                  << rc.out(name + ".json").string() << "\n";
        return 0;
    }
    if (target == "encoder") {
        require_file(rc.out("ae_full.json"), "full autoencoder (run 'train ae-full' first)");
        const DenseNet enc = load_model(rc.out("ae_full.json").string()).encoder();
        save_model(rc.out("encoder.json").string(), enc);
        std::cout << "encoder: " << enc.layers().size() << " layers, latent dim " << enc.output_dim() << " -> "
                  << rc.out("encoder.json").string() << "\n";
        return 0;
    }
    throw UsageError("unknown training target '" + target + "' (classifier, ae-full, ae-class, encoder)");
}

struct ModelsForSearch {
    std::optional<DenseNet> ae;
    std::optional<DenseNet> encoder;
};

ModelsForSearch load_search_models(const RunConfig& rc) {
    ModelsForSearch m;
    bool need_ae = false, need_proto = false;
    for (const auto& name : rc.modes) {
        const LossMode mode = parse_loss_mode(name, rc.family);
        need_ae = need_ae || mode.ae;
        need_proto = need_proto || mode.proto;
    }
    if (need_ae) {
        require_file(rc.out("ae_full.json"), "autoencoder for L_AE (run 'train ae-full')");
        m.ae = load_model(rc.out("ae_full.json").string());
    }
    if (need_proto && rc.family == ModeFamily::encoder) {
        require_file(rc.out("encoder.json"), "encoder (run 'train encoder')");
        m.encoder = load_model(rc.out("encoder.json").string());
    }
    return m;
}

int cmd_explain(const RunConfig& rc, long long row) {
    const Prepared p = load_prepared(rc);
    if (row < 0 || static_cast<std::size_t>(row) >= p.raw.n())
        throw UsageError("row " + std::to_string(row) + " does not exist (dataset has " + std::to_string(p.raw.n()) +
                         " rows)");
    if (rc.modes.size() != 1) throw UsageError("explain takes exactly one loss mode");
    const LossMode mode = parse_loss_mode(rc.modes.front(), rc.family);
    const ModelsForSearch models = load_search_models(rc);
    auto predictor = make_predictor(rc, p);

    const Vector x0 = p.numeric.row(static_cast<Eigen::Index>(row)).transpose();
    SearchConfig cfg = rc.search;
    cfg.seed = rc.seed;
    if (rc.theta_per_mode) cfg.theta = default_theta(mode);
    cfg.box = make_box(rc, p, x0);

    SearchContext ctx;
    ctx.predictor = predictor.get();
    ctx.x0 = x0;
    ctx.t0 = predicted_class(*predictor, x0);
    if (models.ae) ctx.ae = &*models.ae;
    if (models.encoder) ctx.encoder = &*models.encoder;
    if (mode.proto) {
        const auto rows = detail::sample_rows(static_cast<std::size_t>(p.train().rows()), rc.sample_fraction, rc.seed);
        const Matrix train = p.train();
        Matrix sample(static_cast<Eigen::Index>(rows.size()), train.cols());
        for (std::size_t i = 0; i < rows.size(); ++i)
            sample.row(static_cast<Eigen::Index>(i)) = train.row(static_cast<Eigen::Index>(rows[i]));
        const ClassPartition labels = label_dataset(*predictor, sample);
        if (rc.family == ModeFamily::kdtree) {
            ctx.proto = nearest_prototype(build_class_trees(sample, labels), x0, ctx.t0, rc.k);
        } else {
            ctx.proto = nearest_prototype(encoder_prototypes(*ctx.encoder, sample, labels, x0, rc.K), *ctx.encoder,
                                          x0, ctx.t0);
        }
    }
    const CounterfactualResult res = c_search(mode, cfg, ctx);

    json doc = to_json(res);
    doc["row"] = row;
    doc["config"] = rc.raw;
    const Vector raw0 = p.space.from_numeric(res.x0);
    const Vector raw_cf = p.space.from_numeric(p.space.snap(res.x_cf));
    json features = json::array(), changed = json::array();
    const auto& schema = p.space.schema();
    for (std::size_t f = 0; f < schema.size(); ++f) {
        const auto fi = static_cast<Eigen::Index>(f);
        const auto& feat = schema.features[f];
        json before, after;
        if (feat.is_categorical()) {
            before = feat.categories[static_cast<std::size_t>(raw0[fi])];
            after = feat.categories[static_cast<std::size_t>(raw_cf[fi])];
        } else {
            before = raw0[fi];
            after = raw_cf[fi];
        }
        features.push_back({{"feature", feat.name}, {"x0", before}, {"x_cf", after}});
        if (res.delta_star[fi] != 0.0) changed.push_back({{"feature", feat.name}, {"from", before}, {"to", after}});
    }
    doc["raw"] = {{"features", features}, {"changed", changed}};
    if (schema.target) {
        const auto& classes = schema.target->classes;
        auto name = [&](int c) { return c >= 0 && static_cast<std::size_t>(c) < classes.size() ? json(classes[static_cast<std::size_t>(c)]) : json(nullptr); };
        doc["t0_name"] = name(res.t0);
        doc["cf_class_name"] = name(res.cf_class);
    }
    const fs::path out = rc.out("explain_row" + std::to_string(row) + "_" + mode.name + ".json");
    write_json(out, doc);

    std::cout << "row " << row << " mode " << mode.name << ": ";
    if (res.found) {
        std::cout << "class " << res.t0 << " -> " << res.cf_class << ", EN " << res.en << ", " << changed.size()
                  << " features changed";
    } else {
        std::cout << "no counterfactual found";
    }
    std::cout << ", " << res.gradient_steps << " gradient steps, " << res.prediction_calls << " prediction calls -> "
              << out.string() << "\n";
    return 0;
}

std::pair<SweepParameter, std::vector<double>> parse_sweep(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw UsageError("--sweep expects name=v1,v2,...");
    std::vector<double> values;
    for (const auto& v : split_list(spec.substr(eq + 1))) {
        const auto d = cfproto::detail::parse_double(v);
        if (!d) throw UsageError("--sweep value '" + v + "' is not a number");
        values.push_back(*d);
    }
    try {
        return {parse_sweep_parameter(spec.substr(0, eq)), values};
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
}

int cmd_evaluate(const RunConfig& rc, const std::optional<std::string>& sweep_spec) {
    const Prepared p = load_prepared(rc);
    if (rc.test_end == rc.test_begin) throw UsageError("empty test split");
    const ModelsForSearch models = load_search_models(rc);

    EvalSuite eval;
    require_file(rc.out("ae_full.json"), "full autoencoder (run 'train ae-full')");
    eval.ae_full = load_model(rc.out("ae_full.json").string());

    ExperimentSetup setup;
    setup.train_x = p.train();
    setup.test_x = p.test();
    setup.make_predictor = [&rc, &p] { return make_predictor(rc, p); };
    {
        auto probe = make_predictor(rc, p);
        for (std::size_t c = 0; c < probe->n_classes(); ++c) {
            const fs::path path = rc.out("ae_class_" + std::to_string(c) + ".json");
            require_file(path, "class autoencoder (run 'train ae-class " + std::to_string(c) + "')");
            eval.ae_per_class.emplace(static_cast<int>(c), load_model(path.string()));
        }
    }
    setup.family = rc.family;
    for (const auto& m : rc.modes) setup.modes.push_back(parse_loss_mode(m, rc.family));
    setup.cfg = rc.search;
    if (rc.box_from_data || !rc.frozen.empty()) {
        // The data box is widened per instance, so take it over train and test rows.
        Matrix all(setup.train_x.rows() + setup.test_x.rows(), setup.train_x.cols());
        all << setup.train_x, setup.test_x;
        setup.cfg.box = make_box(rc, p, all.row(0).transpose());
        if (rc.box_from_data) {
            setup.cfg.box->lower = all.colwise().minCoeff().transpose();
            setup.cfg.box->upper = all.colwise().maxCoeff().transpose();
        }
    }
    setup.theta_per_mode = rc.theta_per_mode;
    if (models.ae) setup.ae = &*models.ae;
    if (models.encoder) setup.encoder = &*models.encoder;
    setup.k = rc.k;
    setup.K = rc.K;
    setup.sample_fraction = rc.sample_fraction;
    setup.seeds = rc.seeds;
    setup.jobs = rc.jobs;
    setup.eval = &eval;

    std::vector<ExperimentSummary> summaries;
    if (sweep_spec) {
        const auto [param, values] = parse_sweep(*sweep_spec);
        summaries = sweep(param, values, setup);
    } else {
        summaries.push_back(run_experiment(setup));
    }

    json report{{"config", rc.raw}, {"summaries", json::array()}};
    json details{{"config", rc.raw}, {"summaries", json::array()}};
    std::string table;
    for (const auto& s : summaries) {
        report["summaries"].push_back(to_json(s));
        details["summaries"].push_back(to_json(s, true));
        table += format_table(s) + "\n";
    }
    write_json(rc.out("summary.json"), report);
    write_json(rc.out("runs.json"), details);
    {
        std::ofstream txt(rc.out("summary.txt"));
        txt << table;
    }
    std::cout << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype-guided counterfactual explanations"};
    app.require_subcommand(1);

    std::string config;
    Overrides ov;
    std::string mode, sweep_spec, freeze, blackbox;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config, "Run configuration (JSON)")->required();
        sub->add_option("--seed", seed, "Seed override");
        sub->add_option("--blackbox-cmd", blackbox, "Model process speaking line-delimited JSON");
    };

    auto* prepare = app.add_subcommand("prepare", "Fit scaling and categorical embeddings");
    add_common(prepare);

    auto* train_cmd = app.add_subcommand("train", "Train a classifier, autoencoder or extract an encoder");
    add_common(train_cmd);
    std::vector<std::string> target;
    train_cmd->add_option("target", target, "classifier | ae-full | ae-class <i> | encoder")->required()->expected(1, 2);

    auto* explain = app.add_subcommand("explain", "Find a counterfactual for one dataset row");
    add_common(explain);
    long long row = -1;
    explain->add_option("--row", row, "0-based data row")->required();
    explain->add_option("--mode", mode, "Loss mode letter");
    explain->add_option("--freeze", freeze, "Comma-separated features held at their original values");

    auto* evaluate = app.add_subcommand("evaluate", "Run the protocol over the test split");
    add_common(evaluate);
    evaluate->add_option("--mode", mode, "Comma-separated loss modes");
    evaluate->add_option("--jobs", jobs, "Worker threads");
    evaluate->add_option("--sweep", sweep_spec, "theta=v1,v2 | k=v1,v2 | K=v1,v2");
    evaluate->add_option("--freeze", freeze, "Comma-separated features held at their original values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    auto given = [](CLI::App* sub, const char* name) { return sub->count(name) > 0; };
    CLI::App* active = app.get_subcommands().front();
    if (given(active, "--seed")) ov.seed = seed;
    if (given(active, "--blackbox-cmd")) ov.blackbox_cmd = blackbox;
    if (active == explain || active == evaluate) {
        if (given(active, "--mode")) ov.mode = mode;
        if (given(active, "--freeze")) ov.freeze = split_list(freeze);
    }
    if (active == evaluate) {
        if (given(active, "--jobs")) ov.jobs = jobs;
        if (given(active, "--sweep")) ov.sweep = sweep_spec;
    }

    try {
        const RunConfig rc = load_config(config, ov);
        if (active == prepare) return cmd_prepare(rc);
        if (active == train_cmd) {
            std::optional<int> cls;
            if (target.size() == 2) {
                const auto v = cfproto::detail::parse_double(target[1]);
                if (!v || *v != static_cast<int>(*v)) throw UsageError("class index must be an integer");
                cls = static_cast<int>(*v);
            } else if (target.front() == "ae-class") {
                throw UsageError("ae-class needs a class index");
            }
            return cmd_train(rc, target.front(), cls);
        }
        if (active == explain) return cmd_explain(rc, row);
        return cmd_evaluate(rc, ov.sweep);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
