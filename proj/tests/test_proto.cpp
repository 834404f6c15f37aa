#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_support.hpp"

using namespace cfproto;
using namespace cfproto::testing;

namespace {

std::vector<Neighbor> brute_force(const Matrix& pts, const Vector& x, std::size_t k) {
    std::vector<Neighbor> all;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        double d2 = 0;
        for (Eigen::Index j = 0; j < pts.cols(); ++j) d2 += (pts(i, j) - x[j]) * (pts(i, j) - x[j]);
        all.push_back({static_cast<std::size_t>(i), std::sqrt(d2)});
    }
    std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.distance < b.distance; });
    all.resize(k);
    return all;
}

ClassPartition partition(std::vector<int> labels, std::size_t n_classes) {
    ClassPartition p;
    p.members.resize(n_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) p.members[static_cast<std::size_t>(labels[i])].push_back(i);
    p.labels = std::move(labels);
    return p;
}

}  // namespace

TEST(KdTree, OneDimensionalExample) {
    const KdTree tree(mat({{0}, {1}, {3}}));
    const auto nn = tree.knn_query(vec({2.4}), 2);
    ASSERT_EQ(nn.size(), 2u);
    EXPECT_EQ(tree.point(nn[0].index)[0], 3.0);
    EXPECT_NEAR(nn[0].distance, 0.6, 1e-12);
    EXPECT_EQ(tree.point(nn[1].index)[0], 1.0);
    EXPECT_NEAR(nn[1].distance, 1.4, 1e-12);
}

TEST(KdTree, StoredPointAtDistanceZero) {
    std::mt19937_64 rng(4);
    const Matrix pts = random_matrix(50, 3, rng);
    const KdTree tree(pts);
    for (Eigen::Index i = 0; i < 50; ++i) {
        const auto nn = tree.knn_query(pts.row(i).transpose(), 1);
        EXPECT_EQ(nn[0].index, static_cast<std::size_t>(i));
        EXPECT_EQ(nn[0].distance, 0.0);
    }
}

TEST(KdTree, EquidistantTieGoesToLowerInsertionIndex) {
    const KdTree tree(mat({{2}, {-2}, {2}}));
    const auto nn = tree.knn_query(vec({0}), 3);
    EXPECT_EQ(nn[0].index, 0u);
    EXPECT_EQ(nn[1].index, 1u);
    EXPECT_EQ(nn[2].index, 2u);
}

TEST(KdTree, SinglePoint) {
    const KdTree tree(mat({{7, 7}}));
    EXPECT_EQ(tree.knn_query(vec({0, 0}), 1)[0].index, 0u);
    EXPECT_THROW(tree.knn_query(vec({0, 0}), 2), Error);
    EXPECT_THROW(tree.knn_query(vec({0, 0}), 0), Error);
}

TEST(KdTree, MatchesBruteForceExactly) {
    std::mt19937_64 rng(2024);
    const Matrix pts = random_matrix(1000, 10, rng);
    const KdTree tree(pts);
    for (int q = 0; q < 50; ++q) {
        const Vector x = random_vector(10, rng);
        for (std::size_t k = 1; k <= 10; ++k) {
            const auto got = tree.knn_query(x, k);
            const auto want = brute_force(pts, x, k);
            ASSERT_EQ(got.size(), k);
            for (std::size_t i = 0; i < k; ++i) {
                EXPECT_EQ(got[i].index, want[i].index);
                EXPECT_EQ(got[i].distance, want[i].distance);
            }
        }
    }
}

TEST(KdTree, DuplicatePointsMatchBruteForce) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> coord(0, 3);
    Matrix pts(300, 2);
    for (Eigen::Index i = 0; i < 300; ++i) pts.row(i) << coord(rng), coord(rng);
    const KdTree tree(pts);
    for (int q = 0; q < 20; ++q) {
        const Vector x = vec({static_cast<double>(coord(rng)), static_cast<double>(coord(rng))});
        const auto got = tree.knn_query(x, 25);
        const auto want = brute_force(pts, x, 25);
        for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(got[i].index, want[i].index);
    }
}

TEST(BuildClassTrees, OneTreePerNonemptyClass) {
    std::mt19937_64 rng(1);
    const Matrix x = random_matrix(10, 2, rng);
    const auto trees = build_class_trees(x, partition({0, 1, 0, 1, 0, 1, 0, 1, 0, 1}, 3));
    ASSERT_EQ(trees.size(), 2u);
    EXPECT_EQ(trees.at(0).size(), 5u);
    EXPECT_EQ(trees.at(1).size(), 5u);
    EXPECT_EQ(trees.at(1).id(0), 1u);
    EXPECT_THROW(build_class_trees(x, partition(std::vector<int>(10, 0), 2)), Error);
}

TEST(NearestPrototype, TreePathPicksClosestClass) {
    const Matrix x = mat({{5}, {3}, {-1}});
    const auto trees = build_class_trees(x, partition({1, 2, 0}, 3));
    const Prototype p = nearest_prototype(trees, vec({0}), 0, 1);
    EXPECT_EQ(p.class_id, 2);
    EXPECT_EQ(p.point[0], 3.0);
    EXPECT_EQ(p.space, PrototypeSpace::input);
}

TEST(NearestPrototype, NeverReturnsOriginalClass) {
    std::mt19937_64 rng(9);
    const Matrix x = random_matrix(60, 3, rng);
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) labels.push_back(i % 3);
    const auto trees = build_class_trees(x, partition(labels, 3));
    for (Eigen::Index i = 0; i < 60; ++i) {
        const int t0 = labels[static_cast<std::size_t>(i)];
        for (std::size_t k : {1u, 2u, 5u}) EXPECT_NE(nearest_prototype(trees, x.row(i).transpose(), t0, k).class_id, t0);
    }
}

TEST(NearestPrototype, TreeTieGoesToLowerClass) {
    const auto trees = build_class_trees(mat({{-2}, {2}, {0}}), partition({1, 2, 0}, 3));
    EXPECT_EQ(nearest_prototype(trees, vec({0}), 0, 1).class_id, 1);
}

TEST(NearestPrototype, TwoClassesAlwaysTheOther) {
    const auto trees = build_class_trees(mat({{0}, {1}, {2}, {3}}), partition({0, 0, 1, 1}, 2));
    EXPECT_EQ(nearest_prototype(trees, vec({0.5}), 0, 1).class_id, 1);
    EXPECT_EQ(nearest_prototype(trees, vec({2.5}), 1, 1).class_id, 0);
    EXPECT_THROW(nearest_prototype(trees, vec({0}), 0, 0), Error);
}

TEST(EncoderPrototypes, MeanOfNearestK) {
    const DenseNet enc = identity_net(2, ModelKind::encoder);
    const Matrix x = mat({{0, 0}, {2, 0}, {10, 0}, {5, 5}});
    const auto part = partition({1, 1, 1, 0}, 2);
    const auto protos = encoder_prototypes(enc, x, part, vec({1, 0}), 2);
    EXPECT_EQ(protos.at(1).point, vec({1, 0}));
    EXPECT_EQ(protos.at(1).space, PrototypeSpace::latent);

    const auto k1 = encoder_prototypes(enc, x, part, vec({9, 0}), 1);
    EXPECT_EQ(k1.at(1).point, vec({10, 0}));
    // K larger than the class uses every member.
    const auto all = encoder_prototypes(enc, x, part, vec({1, 0}), 50);
    EXPECT_EQ(all.at(1).point, vec({4, 0}));
    EXPECT_EQ(all.at(0).point, vec({5, 5}));
}

TEST(EncoderPrototypes, IdenticalMembersAndClassMean) {
    std::mt19937_64 rng(7);
    const DenseNet ae = make_autoencoder(4, {3, 2}, {3}, 8);
    const DenseNet enc = ae.encoder();
    Matrix x = random_matrix(20, 4, rng);
    std::vector<int> labels(20);
    for (int i = 0; i < 20; ++i) labels[static_cast<std::size_t>(i)] = i < 12 ? 0 : 1;
    for (Eigen::Index i = 12; i < 20; ++i) x.row(i) = x.row(12);
    const auto part = partition(labels, 2);
    const Vector x0 = random_vector(4, rng);
    for (std::size_t k : {1u, 3u, 8u}) EXPECT_LT((encoder_prototypes(enc, x, part, x0, k).at(1).point - enc.forward(x.row(12).transpose())).norm(), 1e-12);

    const Matrix codes = enc.forward_batch(x.topRows(12));
    const Vector mean = codes.colwise().mean().transpose();
    EXPECT_LT((encoder_prototypes(enc, x, part, x0, 12).at(0).point - mean).norm(), 1e-12);
    EXPECT_THROW(encoder_prototypes(enc, x, part, x0, 0), Error);
    EXPECT_THROW(encoder_prototypes(enc, Matrix::Zero(3, 5), part, x0, 1), DimensionError);
}

TEST(EncoderPrototypes, NearestSkipsOriginalClassAndBreaksTiesLow) {
    const DenseNet enc = identity_net(1, ModelKind::encoder);
    std::map<int, Prototype> protos;
    protos[0] = {0, vec({0}), PrototypeSpace::latent};
    protos[1] = {1, vec({-1}), PrototypeSpace::latent};
    protos[2] = {2, vec({1}), PrototypeSpace::latent};
    EXPECT_EQ(nearest_prototype(protos, enc, vec({0}), 0).class_id, 1);
    EXPECT_EQ(nearest_prototype(protos, enc, vec({0.9}), 2).class_id, 0);
    std::map<int, Prototype> only;
    only[0] = protos[0];
    EXPECT_THROW(nearest_prototype(only, enc, vec({0}), 0), Error);
}
