#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

using namespace cfproto;
using namespace cfproto::testing;

namespace {

Feature categorical(const std::string& name, std::vector<std::string> cats) {
    Feature f;
    f.name = name;
    f.kind = FeatureKind::categorical;
    f.categories = std::move(cats);
    return f;
}

Feature numeric(const std::string& name) {
    Feature f;
    f.name = name;
    return f;
}

Dataset make_dataset(std::vector<Feature> features, const Matrix& rows) {
    return Dataset{FeatureSchema(std::move(features)), rows, {}};
}

Matrix pairwise(const Matrix& pts) {
    Matrix d(pts.rows(), pts.rows());
    for (Eigen::Index i = 0; i < pts.rows(); ++i)
        for (Eigen::Index j = 0; j < pts.rows(); ++j) d(i, j) = (pts.row(i) - pts.row(j)).norm();
    return d;
}

CategoryEmbedding fixed_embedding(const std::string& name, std::vector<std::string> cats, const Vector& values) {
    CategoryEmbedding e;
    e.feature = name;
    e.categories = std::move(cats);
    e.distances = Matrix::Zero(values.size(), values.size());
    e.coordinates = Matrix::Zero(values.size(), 2);
    e.raw = values;
    e.values = values;
    return e;
}

}  // namespace

TEST(Mvdm, HandCountedExample) {
    // Category a: three rows in class 0, one in class 1; category b mirrored.
    const Dataset ds = make_dataset({categorical("c", {"a", "b"})}, mat({{0}, {0}, {0}, {0}, {1}, {1}, {1}, {1}}));
    const std::vector<int> y{0, 0, 0, 1, 0, 1, 1, 1};
    const auto d1 = mvdm(ds, y, 0, 1.0);
    EXPECT_NEAR(d1.matrix(0, 1), 1.0, 1e-15);
    EXPECT_EQ(d1.matrix(0, 0), 0.0);
    EXPECT_NEAR(mvdm(ds, y, 0, 2.0).matrix(1, 0), 0.5, 1e-15);
}

TEST(Mvdm, IdenticalProfilesAndErrors) {
    const Dataset ds = make_dataset({categorical("c", {"a", "b", "z"})}, mat({{0}, {0}, {1}, {1}}));
    const std::vector<int> y{0, 1, 1, 0};
    EXPECT_THROW(mvdm(ds, y, 0), Error);  // "z" never occurs
    const Dataset two = make_dataset({categorical("c", {"a", "b"})}, mat({{0}, {0}, {1}, {1}}));
    EXPECT_EQ(mvdm(two, y, 0).matrix(0, 1), 0.0);
    EXPECT_THROW(mvdm(two, {0, 1}, 0), Error);
}

TEST(Abdm, DisjointConditionalsMatchReference) {
    const Dataset ds = make_dataset({categorical("c", {"a", "b"}), categorical("ctx", {"u", "v"})}, mat({{0, 0}, {1, 1}}));
    const auto d = abdm(ds, 0, 10, 0.01);
    EXPECT_NEAR(d.matrix(0, 1), 4.5246279576875095, 1e-12);
    EXPECT_EQ(d.matrix(0, 1), d.matrix(1, 0));
}

TEST(Abdm, MixedContextMatchesReference) {
    const Dataset ds = make_dataset({categorical("c", {"x", "y", "z"}), numeric("n"), categorical("ctx", {"u", "v"})},
                                    mat({{0, 0.0, 0},
                                         {0, 0.5, 0},
                                         {0, 1.0, 1},
                                         {1, 2.0, 1},
                                         {1, 3.0, 1},
                                         {2, 9.0, 0},
                                         {2, 9.5, 1},
                                         {2, 10.0, 1}}));
    const auto d = abdm(ds, 0, 10, 0.01);
    EXPECT_NEAR(d.matrix(0, 1), 6.631291792067337, 1e-12);
    EXPECT_NEAR(d.matrix(0, 2), 5.444498388683653, 1e-12);
    EXPECT_NEAR(d.matrix(1, 2), 5.7221975041894, 1e-12);
    d.validate();
}

TEST(Abdm, IdenticalConditionalsAndErrors) {
    const Dataset ds = make_dataset({categorical("c", {"a", "b"}), numeric("n")}, mat({{0, 1}, {1, 1}, {0, 2}, {1, 2}}));
    EXPECT_EQ(abdm(ds, 0).matrix(0, 1), 0.0);
    const Dataset alone = make_dataset({categorical("c", {"a", "b"})}, mat({{0}, {1}}));
    EXPECT_THROW(abdm(alone, 0), Error);
}

TEST(Abdm, ShiftedContextOrdersDistances) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> noise(0.0, 0.5);
    Matrix rows(300, 2);
    for (Eigen::Index i = 0; i < 300; ++i) rows.row(i) << static_cast<double>(i % 3), 2.0 * static_cast<double>(i % 3) + noise(rng);
    const auto d = abdm(make_dataset({categorical("c", {"low", "mid", "high"}), numeric("n")}, rows), 0);
    EXPECT_GT(d.matrix(0, 2), d.matrix(0, 1));
    EXPECT_GT(d.matrix(0, 2), d.matrix(1, 2));
}

TEST(Mds, TwoCategories) {
    const auto e = mds_embed({"f", mat({{0, 2}, {2, 0}})}, ScalingMethod::none);
    EXPECT_NEAR(e.values[0], 0.0, 1e-12);
    EXPECT_NEAR(e.values[1], 2.0, 1e-12);
}

TEST(Mds, CollinearGapsArePreserved) {
    const auto e = mds_embed({"f", mat({{0, 1, 2}, {1, 0, 1}, {2, 1, 0}})}, ScalingMethod::none);
    const Matrix got = pairwise(e.coordinates);
    EXPECT_LT((got - mat({{0, 1, 2}, {1, 0, 1}, {2, 1, 0}})).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Mds, ReproducesPlanarGeometry) {
    std::mt19937_64 rng(10);
    const Matrix pts = random_matrix(7, 2, rng, 3.0);
    const Matrix d = pairwise(pts);
    EXPECT_LT((pairwise(classical_mds(d)) - d).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Mds, ZeroMatrixIsDegenerate) {
    for (auto scale : {ScalingMethod::standard, ScalingMethod::minmax, ScalingMethod::none}) {
        const auto e = mds_embed({"f", Matrix::Zero(3, 3)}, scale);
        EXPECT_TRUE(e.degenerate);
        EXPECT_EQ(e.values[0], e.values[1]);
        EXPECT_EQ(e.values[1], e.values[2]);
    }
}

TEST(Mds, NonEuclideanMatrixMatchesReference) {
    const CategoryDistances d{"f", mat({{0, 1, 2, 4}, {1, 0, 1.5, 3}, {2, 1.5, 0, 1}, {4, 3, 1, 0}})};
    const Vector raw = vec({4.000232257666261, 3.0841909356143504, 1.6479325411350605, 0});
    const Vector standard = vec({1.2003917168459886, 0.595261455122045, -0.35352043629705365, -1.4421327356709805});
    const Vector minmax = vec({1, 0.7710029660661929, 0.41195921511229094, 0});
    EXPECT_LT((mds_embed(d, ScalingMethod::none).values - raw).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((mds_embed(d, ScalingMethod::standard).values - standard).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((mds_embed(d, ScalingMethod::minmax).values - minmax).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Mds, RejectsInvalidMatrices) {
    EXPECT_THROW(mds_embed({"f", mat({{0, 1}, {2, 0}})}, ScalingMethod::none), Error);
    EXPECT_THROW(mds_embed({"f", mat({{1, 1}, {1, 0}})}, ScalingMethod::none), Error);
    EXPECT_THROW(mds_embed({"f", mat({{0, -1}, {-1, 0}})}, ScalingMethod::none), Error);
}

TEST(NumericSpace, AllNumericRowIsScaled) {
    Feature a = numeric("a");
    a.scaling = Scaling{ScalingMethod::standard, 2.0, 4.0, 0, 1};
    Feature b = numeric("b");
    b.scaling = Scaling{ScalingMethod::minmax, 0, 1, -1.0, 3.0};
    const NumericSpace space(FeatureSchema({a, b}), {});
    EXPECT_FALSE(space.has_categoricals());
    EXPECT_EQ(space.to_numeric(vec({6, 1})), vec({1, 0.5}));
    EXPECT_EQ(space.from_numeric(vec({1, 0.5})), vec({6, 1}));
}

TEST(NumericSpace, LookupAndSnapping) {
    const FeatureSchema schema({categorical("c", {"p", "q", "r"})});
    std::map<std::size_t, CategoryEmbedding> emb;
    emb.emplace(0, fixed_embedding("c", {"p", "q", "r"}, vec({0.0, 1.0, 0.7})));
    const NumericSpace space(schema, emb);
    EXPECT_EQ(space.to_numeric(vec({2}))[0], 0.7);
    EXPECT_EQ(space.from_numeric(vec({1.0}))[0], 1.0);
    EXPECT_EQ(space.from_numeric(vec({0.3}))[0], 0.0);
    EXPECT_EQ(space.snap(vec({0.8}))[0], 0.7);

    std::map<std::size_t, CategoryEmbedding> two;
    two.emplace(0, fixed_embedding("c", {"p", "q"}, vec({0.0, 1.0})));
    const NumericSpace s2(FeatureSchema({categorical("c", {"p", "q"})}), two);
    EXPECT_EQ(s2.from_numeric(vec({0.4}))[0], 0.0);
    EXPECT_EQ(s2.from_numeric(vec({0.5}))[0], 0.0);
    EXPECT_EQ(s2.from_numeric(vec({0.6}))[0], 1.0);
}

TEST(NumericSpace, MissingEmbeddingIsAnError) {
    const NumericSpace space(FeatureSchema({categorical("c", {"p", "q"})}), {});
    EXPECT_THROW(space.to_numeric(vec({1})), Error);
    std::map<std::size_t, CategoryEmbedding> wrong;
    wrong.emplace(0, fixed_embedding("c", {"p"}, vec({0.0})));
    EXPECT_THROW(NumericSpace(FeatureSchema({categorical("c", {"p", "q"})}), wrong), Error);
}

TEST(NumericSpace, RoundTripOverDataset) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> c4(0, 3), c3(0, 2);
    std::normal_distribution<double> n01;
    Matrix rows(200, 3);
    for (Eigen::Index i = 0; i < 200; ++i) rows.row(i) << c4(rng), n01(rng) + c3(rng), c3(rng);
    Dataset ds = make_dataset({categorical("a", {"a0", "a1", "a2", "a3"}), numeric("n"), categorical("b", {"b0", "b1", "b2"})}, rows);
    ds.schema = fit_scaling(ds, ScalingMethod::standard);
    for (auto method : {CategoryDistanceMethod::abdm, CategoryDistanceMethod::mvdm}) {
        std::vector<int> y(200);
        for (Eigen::Index i = 0; i < 200; ++i) y[static_cast<std::size_t>(i)] = rows(i, 1) > 1 ? 1 : 0;
        EmbeddingParams params;
        params.method = method;
        const NumericSpace space(ds.schema, build_embeddings(ds, params, y));
        for (Eigen::Index i = 0; i < 200; ++i) {
            const Vector raw = rows.row(i).transpose();
            const Vector back = space.from_numeric(space.to_numeric(raw));
            EXPECT_EQ(back[0], raw[0]);
            EXPECT_EQ(back[2], raw[2]);
            EXPECT_NEAR(back[1], raw[1], 1e-12);
        }
    }
}

TEST(Embedding, MonotoneRecoveryOfOrdinalCategories) {
    // Each category shifts one context feature by one noise standard
    // deviation. Categories several steps apart still overlap, so the
    // smoothed KL divergences stay below saturation.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> noise(0.0, 1.0);
        std::uniform_int_distribution<int> pick(0, 4);
        Matrix rows(600, 3);
        for (Eigen::Index i = 0; i < 600; ++i) {
            const int c = pick(rng);
            rows.row(i) << c, c + noise(rng), noise(rng);
        }
        const Dataset ds =
            make_dataset({categorical("ord", {"c0", "c1", "c2", "c3", "c4"}), numeric("shift"), numeric("junk")}, rows);
        const Vector v = build_embeddings(ds, EmbeddingParams{}).at(0).values;
        const bool up = v[1] > v[0];
        for (Eigen::Index i = 1; i < v.size(); ++i)
            EXPECT_TRUE(up ? v[i] > v[i - 1] : v[i] < v[i - 1]) << "seed " << seed << ": " << v.transpose();
    }
}

TEST(Embedding, JsonRoundTrip) {
    const Dataset ds = make_dataset({categorical("c", {"x", "y", "z"}), numeric("n")},
                                    mat({{0, 0}, {0, 1}, {1, 5}, {1, 6}, {2, 9}, {2, 8}}));
    const auto emb = build_embeddings(ds, EmbeddingParams{});
    const auto back = embeddings_from_json(nlohmann::json::parse(embeddings_to_json(emb).dump()), ds.schema);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back.at(0).values, emb.at(0).values);
    EXPECT_EQ(back.at(0).distances, emb.at(0).distances);
    EXPECT_EQ(back.at(0).distance_method, "abdm");

    const FeatureSchema other({categorical("c", {"x", "y", "w"}), numeric("n")});
    EXPECT_THROW(embeddings_from_json(embeddings_to_json(emb), other), ParseError);
}
