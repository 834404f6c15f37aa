#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "test_support.hpp"

using namespace cfproto;
using namespace cfproto::testing;

namespace {

/// In-process stub with a fixed response rule.
class StubPredictor final : public Predictor {
public:
    using Rule = std::function<Vector(const Vector&)>;
    StubPredictor(std::size_t d, std::size_t k, Rule rule) : d_(d), k_(k), rule_(std::move(rule)) {}
    std::size_t input_dim() const override { return d_; }
    std::size_t n_classes() const override { return k_; }

protected:
    Matrix evaluate(const Matrix& batch) override {
        Matrix out(batch.rows(), static_cast<Eigen::Index>(k_));
        for (Eigen::Index r = 0; r < batch.rows(); ++r) out.row(r) = rule_(batch.row(r).transpose()).transpose();
        return out;
    }

private:
    std::size_t d_, k_;
    Rule rule_;
};

std::string serve(const std::string& args) { return std::string(CFPROTO_SERVE) + " " + args; }

std::uint64_t read_count(const std::filesystem::path& file) {
    std::ifstream in(file);
    std::uint64_t n = 0;
    in >> n;
    return n;
}

}  // namespace

TEST(Predict, IdentityLogitsGiveUniform) {
    WhiteBoxPredictor p(single_layer(Matrix::Identity(2, 2), Vector::Zero(2), Activation::softmax));
    const Vector out = p.predict_one(vec({0, 0}));
    EXPECT_DOUBLE_EQ(out[0], 0.5);
    EXPECT_DOUBLE_EQ(out[1], 0.5);
    EXPECT_EQ(p.calls(), 1u);
}

TEST(Predict, CounterAddsBatchSize) {
    WhiteBoxPredictor p(logistic_net(1.0, 3));
    p.predict(Matrix::Zero(3, 3));
    EXPECT_EQ(p.calls(), 3u);
    p.vjp(Vector::Zero(3), vec({1, 0}));
    EXPECT_EQ(p.calls(), 3u);
}

TEST(Predict, RejectsWrongDimension) {
    WhiteBoxPredictor p(logistic_net(1.0, 3));
    EXPECT_THROW(p.predict(Matrix::Zero(1, 2)), DimensionError);
    EXPECT_EQ(p.calls(), 0u);
}

TEST(Predict, WhiteBoxNeedsSoftmaxHead) {
    EXPECT_THROW(WhiteBoxPredictor(identity_net(2)), Error);
}

TEST(PredictedClass, ArgmaxWithLowestIndexTies) {
    StubPredictor a(1, 3, [](const Vector&) { return vec({0.1, 0.7, 0.2}); });
    EXPECT_EQ(predicted_class(a, vec({0})), 1);
    StubPredictor b(1, 2, [](const Vector&) { return vec({0.5, 0.5}); });
    EXPECT_EQ(predicted_class(b, vec({0})), 0);
    StubPredictor c(1, 10, [](const Vector&) {
        Vector v = Vector::Zero(10);
        v[3] = 1;
        return v;
    });
    EXPECT_EQ(predicted_class(c, vec({0})), 3);
}

TEST(LabelDataset, SignStub) {
    StubPredictor p(1, 2, [](const Vector& x) { return x[0] > 0 ? vec({0, 1}) : vec({1, 0}); });
    const ClassPartition part = label_dataset(p, mat({{-1}, {1}, {2}}));
    EXPECT_EQ(part.members[0], (std::vector<std::size_t>{0}));
    EXPECT_EQ(part.members[1], (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(part.labels, (std::vector<int>{0, 1, 1}));

    EXPECT_EQ(label_dataset(p, mat({{3}})).nonempty_classes(), 1u);
    const ClassPartition same = label_dataset(p, Matrix::Constant(6, 1, -0.5));
    EXPECT_EQ(same.members[0].size(), 6u);
    EXPECT_TRUE(same.members[1].empty());
    EXPECT_THROW(label_dataset(p, Matrix(0, 1)), Error);
}

TEST(NumericalGradient, ConstantStubGivesZero) {
    StubPredictor p(4, 2, [](const Vector&) { return vec({0.3, 0.7}); });
    EXPECT_EQ(numerical_gradient(p, vec({1, 2, 3, 4}), vec({1, -1})), Vector::Zero(4));
    EXPECT_THROW(numerical_gradient(p, vec({1, 2, 3, 4}), vec({1, -1}), 0.0), Error);
}

TEST(NumericalGradient, MatchesAnalyticOnWhiteBox) {
    std::mt19937_64 rng(3);
    int checked = 0;
    for (int i = 0; i < 60; ++i) {
        WhiteBoxPredictor p(make_classifier(6, {10}, 3, static_cast<std::uint64_t>(i)));
        const Vector x = random_vector(6, rng);
        const Vector u = random_vector(3, rng);
        // Skip points where a relu sits right at its kink.
        const DenseLayer& l0 = p.net().layers()[0];
        if (((l0.weights * x + l0.bias).array().abs() < 1e-3).any()) continue;
        EXPECT_LT(relative_error(numerical_gradient(p, x, u, 1e-4), p.vjp(x, u)), 1e-4);
        ++checked;
    }
    EXPECT_GE(checked, 50);
}

TEST(NumericalGradient, UsesTwoCallsPerFeature) {
    WhiteBoxPredictor p(make_classifier(30, {8}, 2, 1));
    numerical_gradient(p, Vector::Zero(30), vec({1, -1}));
    EXPECT_EQ(p.calls(), 60u);
}

TEST(Transformed, AppliesTransformAndCountsOnce) {
    auto inner = std::make_unique<WhiteBoxPredictor>(logistic_net(4.0));
    WhiteBoxPredictor* raw = inner.get();
    TransformedPredictor p(std::move(inner), [](const Vector& x) { return Vector(x.array().round()); });
    EXPECT_EQ(p.predict_one(vec({0.4})), raw->net().forward(vec({0.0})));
    EXPECT_EQ(p.calls(), 1u);
    EXPECT_EQ(raw->calls(), 1u);
    EXPECT_TRUE(p.has_gradient());
}

TEST(BlackBox, FixedStubAndCounter) {
    BlackBoxPredictor p(serve("--fixed 0.2,0.8"), 2);
    const Vector out = p.predict_one(vec({5, 6}));
    EXPECT_DOUBLE_EQ(out[0], 0.2);
    EXPECT_DOUBLE_EQ(out[1], 0.8);
    EXPECT_EQ(p.calls(), 1u);
    EXPECT_EQ(p.n_classes(), 2u);
    p.predict(Matrix::Zero(3, 2));
    EXPECT_EQ(p.calls(), 4u);
    EXPECT_FALSE(p.has_gradient());
}

TEST(BlackBox, MatchesWhiteBoxThroughModelFile) {
    const auto dir = scratch_dir("predict_bb");
    const DenseNet net = make_classifier(5, {7}, 3, 12);
    save_model((dir / "m.json").string(), net);
    BlackBoxPredictor bb(serve("--model " + (dir / "m.json").string()), 5);
    WhiteBoxPredictor wb(net);
    std::mt19937_64 rng(1);
    const Matrix x = random_matrix(4, 5, rng);
    EXPECT_LT((bb.predict(x) - wb.predict(x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BlackBox, CounterMatchesServerCount) {
    const auto dir = scratch_dir("predict_count");
    const auto count = dir / "count.txt";
    BlackBoxPredictor p(serve("--logistic 2 --count-file " + count.string()), 30);
    numerical_gradient(p, Vector::Zero(30), vec({1, -1}));
    p.predict_one(Vector::Zero(30));
    EXPECT_EQ(p.calls(), 61u);
    EXPECT_EQ(read_count(count), 61u);
    EXPECT_EQ(p.requests(), 2u);
}

TEST(BlackBox, NonNormalisedOutputIsContractError) {
    BlackBoxPredictor p(serve("--fixed 0.2,0.7"), 1);
    EXPECT_THROW(p.predict_one(vec({0})), ContractError);
}

TEST(BlackBox, DeadProcessIsTransportError) {
    BlackBoxPredictor p("false", 1);
    EXPECT_THROW(p.predict_one(vec({0})), TransportError);
}

TEST(BlackBox, SlowProcessTimesOut) {
    BlackBoxPredictor p(serve("--fixed 0.5,0.5 --sleep-ms 2000"), 1, std::nullopt, std::chrono::milliseconds(200));
    EXPECT_THROW(p.predict_one(vec({0})), TransportError);
}
