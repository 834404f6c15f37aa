#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfproto/data.hpp"
#include "cfproto/error.hpp"
#include "cfproto/nn.hpp"
#include "cfproto/predict.hpp"

namespace cfproto {

struct Neighbor {
    std::size_t index;  // insertion index within the tree
    double distance;    // Euclidean
};

/// Exact k-nearest-neighbour index over a fixed point set. Splits at the
/// median of the widest-spread dimension; equidistant neighbours are ordered
/// by insertion index.
class KdTree {
public:
    /// `points` holds one point per row. `ids` optionally tags each row with
    /// an external identifier (e.g. its dataset row).
    explicit KdTree(const Matrix& points, std::vector<std::size_t> ids = {}, std::size_t leaf_size = 16)
        : points_(points.transpose()), ids_(std::move(ids)), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
        if (points.rows() == 0) throw Error("KdTree: no points");
        if (ids_.empty()) {
            ids_.resize(size());
            std::iota(ids_.begin(), ids_.end(), std::size_t{0});
        }
        if (ids_.size() != size()) throw Error("KdTree: ids length does not match point count");
        perm_.resize(size());
        std::iota(perm_.begin(), perm_.end(), std::size_t{0});
        nodes_.reserve(2 * size() / leaf_size_ + 1);
        build(0, size());
    }

    std::size_t size() const noexcept { return static_cast<std::size_t>(points_.cols()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(points_.rows()); }
    Vector point(std::size_t i) const { return points_.col(static_cast<Eigen::Index>(i)); }
    std::size_t id(std::size_t i) const { return ids_.at(i); }

    /// The k nearest stored points in nondecreasing distance.
    std::vector<Neighbor> knn_query(const Vector& x, std::size_t k) const {
        if (static_cast<std::size_t>(x.size()) != dim())
            throw DimensionError("KdTree::knn_query", dim(), static_cast<std::size_t>(x.size()));
        if (k < 1 || k > size())
            throw Error("KdTree::knn_query: k=" + std::to_string(k) + " outside [1, " + std::to_string(size()) + "]");
        std::vector<Candidate> heap;
        heap.reserve(k + 1);
        search(0, x, k, heap);
        std::sort_heap(heap.begin(), heap.end());
        std::vector<Neighbor> out;
        out.reserve(heap.size());
        for (const auto& c : heap) out.push_back({c.index, std::sqrt(c.dist2)});
        return out;
    }

private:
    struct Node {
        std::size_t begin = 0, end = 0;
        Eigen::Index split_dim = -1;  // -1 marks a leaf
        double split = 0.0;
        std::size_t left = 0, right = 0;
    };

    struct Candidate {
        double dist2;
        std::size_t index;
        bool operator<(const Candidate& o) const {
            return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index);
        }
    };

    std::size_t build(std::size_t begin, std::size_t end) {
        const std::size_t id = nodes_.size();
        nodes_.push_back({begin, end});
        if (end - begin <= leaf_size_) return id;

        Eigen::Index best_dim = 0;
        double best_spread = -1.0;
        for (Eigen::Index d = 0; d < points_.rows(); ++d) {
            double lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (std::size_t i = begin; i < end; ++i) {
                const double v = points_(d, static_cast<Eigen::Index>(perm_[i]));
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (hi - lo > best_spread) {
                best_spread = hi - lo;
                best_dim = d;
            }
        }
        if (best_spread <= 0.0) return id;  // all points coincide

        const std::size_t mid = begin + (end - begin) / 2;
        std::nth_element(perm_.begin() + static_cast<std::ptrdiff_t>(begin),
                         perm_.begin() + static_cast<std::ptrdiff_t>(mid),
                         perm_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                             return points_(best_dim, static_cast<Eigen::Index>(a)) <
                                    points_(best_dim, static_cast<Eigen::Index>(b));
                         });
        const double split = points_(best_dim, static_cast<Eigen::Index>(perm_[mid]));
        const std::size_t left = build(begin, mid);
        const std::size_t right = build(mid, end);
        nodes_[id].split_dim = best_dim;
        nodes_[id].split = split;
        nodes_[id].left = left;
        nodes_[id].right = right;
        return id;
    }

    double dist2(const Vector& x, std::size_t i) const {
        double s = 0.0;
        for (Eigen::Index d = 0; d < x.size(); ++d) {
            const double t = x[d] - points_(d, static_cast<Eigen::Index>(i));
            s += t * t;
        }
        return s;
    }

    void search(std::size_t node_id, const Vector& x, std::size_t k, std::vector<Candidate>& heap) const {
        const Node& node = nodes_[node_id];
        if (node.split_dim < 0) {
            for (std::size_t i = node.begin; i < node.end; ++i) {
                Candidate c{dist2(x, perm_[i]), perm_[i]};
                if (heap.size() < k) {
                    heap.push_back(c);
                    std::push_heap(heap.begin(), heap.end());
                } else if (c < heap.front()) {
                    std::pop_heap(heap.begin(), heap.end());
                    heap.back() = c;
                    std::push_heap(heap.begin(), heap.end());
                }
            }
            return;
        }
        const double diff = x[node.split_dim] - node.split;
        const std::size_t near = diff <= 0.0 ? node.left : node.right;
        const std::size_t far = diff <= 0.0 ? node.right : node.left;
        search(near, x, k, heap);
        // Ties at the bound are visited so insertion-index ordering stays exact.
        if (heap.size() < k || diff * diff <= heap.front().dist2) search(far, x, k, heap);
    }

    Matrix points_;  // d x n, one column per point
    std::vector<std::size_t> ids_;
    std::vector<std::size_t> perm_;
    std::vector<Node> nodes_;
    std::size_t leaf_size_;
};

/// One tree per nonempty class, keyed by class index. Tree ids are dataset rows.
inline std::map<int, KdTree> build_class_trees(const Matrix& x, const ClassPartition& labels,
                                               std::size_t leaf_size = 16) {
    if (labels.nonempty_classes() < 2)
        throw Error("build_class_trees: need at least two nonempty classes to find a counterfactual class");
    std::map<int, KdTree> trees;
    for (std::size_t c = 0; c < labels.members.size(); ++c) {
        const auto& rows = labels.members[c];
        if (rows.empty()) continue;
        Matrix pts(static_cast<Eigen::Index>(rows.size()), x.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
        trees.emplace(static_cast<int>(c), KdTree(pts, rows, leaf_size));
    }
    return trees;
}

enum class PrototypeSpace { latent, input };

struct Prototype {
    int class_id = -1;
    Vector point;
    PrototypeSpace space = PrototypeSpace::input;
};

/// Per class: mean encoding of the K members whose encodings are nearest to
/// ENC(x0). Classes smaller than K use all members.
inline std::map<int, Prototype> encoder_prototypes(const DenseNet& enc, const Matrix& x, const ClassPartition& labels,
                                                   const Vector& x0, std::size_t k_nearest) {
    if (k_nearest < 1) throw Error("encoder_prototypes: K must be >= 1");
    if (static_cast<std::size_t>(x.cols()) != enc.input_dim())
        throw DimensionError("encoder_prototypes", enc.input_dim(), static_cast<std::size_t>(x.cols()));
    const Matrix codes = enc.forward_batch(x);
    const Vector code0 = enc.forward(x0);
    std::map<int, Prototype> out;
    for (std::size_t c = 0; c < labels.members.size(); ++c) {
        const auto& rows = labels.members[c];
        if (rows.empty()) continue;
        std::vector<std::pair<double, std::size_t>> order;
        order.reserve(rows.size());
        for (auto r : rows) order.emplace_back((codes.row(static_cast<Eigen::Index>(r)).transpose() - code0).norm(), r);
        std::sort(order.begin(), order.end());
        const std::size_t take = std::min(k_nearest, order.size());
        Vector mean = Vector::Zero(codes.cols());
        for (std::size_t i = 0; i < take; ++i) mean += codes.row(static_cast<Eigen::Index>(order[i].second)).transpose();
        mean /= static_cast<double>(take);
        out.emplace(static_cast<int>(c), Prototype{static_cast<int>(c), std::move(mean), PrototypeSpace::latent});
    }
    return out;
}

/// Latent prototype of the class j != t0 closest to ENC(x0); ties go to the lower class.
inline Prototype nearest_prototype(const std::map<int, Prototype>& protos, const DenseNet& enc, const Vector& x0,
                                   int t0) {
    const Vector code0 = enc.forward(x0);
    const Prototype* best = nullptr;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& [cls, proto] : protos) {
        if (cls == t0) continue;
        const double d = (code0 - proto.point).norm();
        if (!best || d < best_d) {
            best = &proto;
            best_d = d;
        }
    }
    if (!best) throw Error("nearest_prototype: no class other than the original class");
    return *best;
}

/// The k-th nearest training instance of the class j != t0 whose k-th
/// neighbour is closest to x0. Classes with fewer than k members use their
/// farthest member.
inline Prototype nearest_prototype(const std::map<int, KdTree>& trees, const Vector& x0, int t0, std::size_t k) {
    if (k < 1) throw Error("nearest_prototype: k must be >= 1");
    const KdTree* best_tree = nullptr;
    int best_cls = -1;
    Neighbor best_n{0, std::numeric_limits<double>::infinity()};
    for (const auto& [cls, tree] : trees) {
        if (cls == t0) continue;
        const auto nn = tree.knn_query(x0, std::min(k, tree.size()));
        const Neighbor& kth = nn.back();
        if (!best_tree || kth.distance < best_n.distance) {
            best_tree = &tree;
            best_cls = cls;
            best_n = kth;
        }
    }
    if (!best_tree) throw Error("nearest_prototype: no class other than the original class");
    return Prototype{best_cls, best_tree->point(best_n.index), PrototypeSpace::input};
}

inline nlohmann::json to_json(const Prototype& p) {
    return {{"class", p.class_id},
            {"space", p.space == PrototypeSpace::latent ? "latent" : "input"},
            {"point", std::vector<double>(p.point.data(), p.point.data() + p.point.size())}};
}

}  // namespace cfproto
