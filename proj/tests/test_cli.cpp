#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_support.hpp"

using namespace cfproto;
using namespace cfproto::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = CFPROTO_SOURCE_DIR;

struct CliResult {
    int code;
    std::string output;
};

CliResult cli(const std::string& args, const fs::path& dir) {
    const fs::path log = dir / "cli.log";
    const std::string cmd = std::string(CFPROTO_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

json read(const fs::path& p) { return read_json_file(p.string()); }

/// Writes a config for the bundled loans data with output in `dir`.
fs::path loans_config(const fs::path& dir, const json& patch = json::object()) {
    json cfg = read(kSource / "configs" / "loans.json");
    cfg["data"] = (kSource / "data" / "loans.csv").string();
    cfg["schema"] = (kSource / "data" / "loans.schema.json").string();
    cfg["output_dir"] = (dir / "out").string();
    cfg["classifier"]["epochs"] = 60;
    cfg["autoencoder"]["epochs"] = 40;
    cfg["split"]["test"] = {360, 366};
    cfg.merge_patch(patch);
    const fs::path path = dir / ("config_" + std::to_string(std::hash<std::string>{}(patch.dump())) + ".json");
    write_json_file(path.string(), cfg);
    return path;
}

/// Prepared and trained loans run shared by most tests.
class LoansCli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new fs::path(scratch_dir("cli_loans"));
        const std::string c = " --config " + loans_config(*dir_).string();
        for (const char* step : {"prepare", "train classifier", "train ae-full", "train ae-class 0", "train ae-class 1",
                                 "train encoder"}) {
            const CliResult r = cli(std::string(step) + c, *dir_);
            ASSERT_EQ(r.code, 0) << step << "\n" << r.output;
        }
    }
    static void TearDownTestSuite() { delete dir_; }

    static const fs::path& dir() { return *dir_; }
    static fs::path out(const std::string& name) { return *dir_ / "out" / name; }
    static std::string config(const json& patch = json::object()) { return " --config " + loans_config(*dir_, patch).string(); }

private:
    static fs::path* dir_;
};

fs::path* LoansCli::dir_ = nullptr;

}  // namespace

TEST(Cli, BcwPrepareHasNoEmbeddings) {
    const auto dir = scratch_dir("cli_bcw");
    json cfg = read(kSource / "configs" / "bcw.json");
    cfg["data"] = (kSource / "data" / "bcw.csv").string();
    cfg["schema"] = (kSource / "data" / "bcw.schema.json").string();
    cfg["output_dir"] = (dir / "out").string();
    write_json_file((dir / "bcw.json").string(), cfg);
    const CliResult r = cli("prepare --config " + (dir / "bcw.json").string(), dir);
    ASSERT_EQ(r.code, 0) << r.output;
    const FeatureSchema s = load_schema((dir / "out" / "schema.json").string());
    ASSERT_EQ(s.size(), 30u);
    for (const auto& f : s.features) EXPECT_EQ(f.scaling.method, ScalingMethod::standard);
    EXPECT_FALSE(fs::exists(dir / "out" / "embeddings.json"));
}

TEST(Cli, UsageErrorsExitWithTwo) {
    const auto dir = scratch_dir("cli_usage");
    CliResult r = cli("prepare --config " + loans_config(dir, {{"schema", (dir / "missing.json").string()}}).string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("schema file not found"), std::string::npos) << r.output;
    EXPECT_EQ(cli("prepare", dir).code, 2);
    EXPECT_EQ(cli("frobnicate --config x.json", dir).code, 2);
    EXPECT_EQ(cli("prepare --config " + (dir / "nope.json").string(), dir).code, 2);
    EXPECT_EQ(cli("explain --row 0 --config " + loans_config(dir).string(), dir).code, 2);  // not prepared
}

TEST_F(LoansCli, PrepareWritesOneEmbeddingPerCategorical) {
    const json emb = read(out("embeddings.json"));
    ASSERT_EQ(emb["embeddings"].size(), 2u);
    EXPECT_EQ(emb["embeddings"][0]["feature"], "education");
    EXPECT_EQ(emb["embeddings"][1]["feature"], "housing");
    EXPECT_EQ(emb["embeddings"][0]["distance_method"], "abdm");
    EXPECT_TRUE(emb.contains("config"));
}

TEST_F(LoansCli, PrepareIsIdempotent) {
    const std::string before = read(out("embeddings.json")).dump();
    ASSERT_EQ(cli("prepare" + config(), dir()).code, 0);
    EXPECT_EQ(read(out("embeddings.json")).dump(), before);
}

TEST_F(LoansCli, MvdmEmbeddingsFromLabels) {
    const auto d = dir() / "mvdm";
    fs::create_directories(d);
    const CliResult r = cli("prepare --config " + loans_config(d, {{"categorical", {{"method", "mvdm"}}}}).string(), d);
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(read(d / "out" / "embeddings.json")["embeddings"][0]["distance_method"], "mvdm");
}

TEST_F(LoansCli, TrainingOutputs) {
    const json hist = read(out("classifier.history.json"));
    EXPECT_EQ(hist["loss_history"].size(), 60u);
    EXPECT_GT(hist["train_accuracy"].get<double>(), 0.7);
    EXPECT_TRUE(hist.contains("config"));

    // ae-class 0 trains on the rows the classifier assigns to class 0.
    const DenseNet clf = load_model(out("classifier.json").string());
    const FeatureSchema schema = load_schema(out("schema.json").string());
    const Dataset ds = load_csv((kSource / "data" / "loans.csv").string(), schema);
    const NumericSpace space(schema, embeddings_from_json(read(out("embeddings.json")), schema));
    WhiteBoxPredictor p(clf);
    Matrix x = space.to_numeric(Matrix(ds.rows.topRows(360)));
    for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) = space.snap(x.row(i).transpose()).transpose();
    const ClassPartition part = label_dataset(p, x);
    EXPECT_EQ(read(out("ae_class_0.history.json"))["rows"], part.members[0].size());
    EXPECT_EQ(read(out("ae_class_1.history.json"))["rows"], part.members[1].size());

    const DenseNet ae = load_model(out("ae_full.json").string());
    const DenseNet enc = load_model(out("encoder.json").string());
    EXPECT_EQ(enc.layers().size(), 2u);
    EXPECT_EQ(enc.output_dim(), 4u);
    EXPECT_EQ(enc.layers()[1].weights, ae.layers()[1].weights);
}

TEST_F(LoansCli, ExplainKeepsFrozenFeature) {
    const CliResult r = cli("explain --row 365 --mode B --freeze age,housing" + config(), dir());
    ASSERT_EQ(r.code, 0) << r.output;
    const json doc = read(out("explain_row365_B.json"));
    ASSERT_TRUE(doc["found"].get<bool>()) << r.output;
    const auto& feats = doc["raw"]["features"];
    EXPECT_EQ(feats[0]["feature"], "age");
    EXPECT_EQ(feats[0]["x0"], feats[0]["x_cf"]);
    EXPECT_EQ(feats[3]["x0"], feats[3]["x_cf"]);
    EXPECT_EQ(doc["delta"][0], 0.0);
    EXPECT_NE(doc["t0"], doc["cf_class"]);
    EXPECT_EQ(doc["config"]["resolved"]["frozen"], json({"age", "housing"}));
    for (const auto& c : doc["raw"]["changed"]) EXPECT_NE(c["feature"], "age");
    // Categorical outputs are category names.
    EXPECT_TRUE(feats[2]["x_cf"].is_string());
}

TEST_F(LoansCli, ExplainIsReproducible) {
    auto strip = [](json j) {
        j["counters"].erase("wall_seconds");
        return j.dump();
    };
    ASSERT_EQ(cli("explain --row 361 --mode A" + config(), dir()).code, 0);
    const std::string first = strip(read(out("explain_row361_A.json")));
    ASSERT_EQ(cli("explain --row 361 --mode A" + config(), dir()).code, 0);
    EXPECT_EQ(strip(read(out("explain_row361_A.json"))), first);
}

TEST_F(LoansCli, NotFoundIsNotAFailure) {
    const CliResult r = cli("explain --row 362 --mode A" +
                          config({{"search", {{"learning_rate", 0.0}, {"max_iterations", 2}, {"c_search", nullptr}}}}),
                      dir());
    EXPECT_EQ(r.code, 0) << r.output;
    const json doc = read(out("explain_row362_A.json"));
    EXPECT_FALSE(doc["found"].get<bool>());
    EXPECT_NE(r.output.find("no counterfactual found"), std::string::npos);
}

TEST_F(LoansCli, BadRowExitsWithTwo) {
    EXPECT_EQ(cli("explain --row 400" + config(), dir()).code, 2);
    EXPECT_EQ(cli("explain --row -1" + config(), dir()).code, 2);
    EXPECT_EQ(cli("explain --row 1 --mode Q" + config(), dir()).code, 2);
}

TEST_F(LoansCli, PrototypeOnlyModeMakesOnePredictionPerStep) {
    const CliResult r = cli("explain --row 363 --mode E" + config({{"family", "encoder"}}), dir());
    ASSERT_EQ(r.code, 0) << r.output;
    const json doc = read(out("explain_row363_E.json"));
    EXPECT_EQ(doc["counters"]["prediction_calls"], doc["counters"]["gradient_steps"]);
    EXPECT_GT(doc["counters"]["gradient_steps"].get<int>(), 0);
}

TEST_F(LoansCli, BlackBoxCommandMatchesWhiteBox) {
    const std::string bb = "--blackbox-cmd \"" + std::string(CFPROTO_SERVE) + " --model " + out("classifier.json").string() + "\"";
    const json patch{{"search", {{"c_search", nullptr}, {"max_iterations", 40}, {"early_stop", 0}}}};
    ASSERT_EQ(cli("explain --row 364 --mode A" + config(patch), dir()).code, 0);
    const json white = read(out("explain_row364_A.json"));
    const CliResult r = cli("explain --row 364 --mode A " + bb + config(patch), dir());
    ASSERT_EQ(r.code, 0) << r.output;
    const json black = read(out("explain_row364_A.json"));
    EXPECT_EQ(black["counters"]["gradient_steps"], 40);
    // One class check plus 2 * D gradient evaluations per step (D = 5).
    EXPECT_EQ(black["counters"]["prediction_calls"], 40 * 11);
    EXPECT_EQ(black["t0"], white["t0"]);
    EXPECT_TRUE(black["config"]["resolved"]["model"].contains("blackbox"));
}

TEST_F(LoansCli, EvaluateWritesSummaries) {
    const CliResult r = cli("evaluate --mode A,B --jobs 2" + config(), dir());
    ASSERT_EQ(r.code, 0) << r.output;
    const json summary = read(out("summary.json"));
    ASSERT_EQ(summary["summaries"].size(), 1u);
    const auto& modes = summary["summaries"][0]["modes"];
    ASSERT_EQ(modes.size(), 2u);
    EXPECT_EQ(modes[0]["runs"], 12);  // 6 test rows x 2 seeds
    EXPECT_EQ(read(out("runs.json"))["summaries"][0]["runs"].size(), 24u);
    std::ifstream txt(out("summary.txt"));
    std::stringstream ss;
    ss << txt.rdbuf();
    EXPECT_NE(ss.str().find("Gradient steps"), std::string::npos);
}

TEST_F(LoansCli, EvaluateSweep) {
    const CliResult r = cli("evaluate --mode B --sweep theta=10,50,200" + config(), dir());
    ASSERT_EQ(r.code, 0) << r.output;
    const json summary = read(out("summary.json"));
    ASSERT_EQ(summary["summaries"].size(), 3u);
    EXPECT_EQ(summary["summaries"][2]["label"], "theta=200");
    EXPECT_EQ(cli("evaluate --sweep gamma=1" + config(), dir()).code, 2);
    EXPECT_EQ(cli("evaluate --sweep theta=x" + config(), dir()).code, 2);
}

TEST_F(LoansCli, EvaluateEmptyTestSplit) {
    EXPECT_EQ(cli("evaluate" + config({{"split", {{"test", {360, 360}}}}}), dir()).code, 2);
}
