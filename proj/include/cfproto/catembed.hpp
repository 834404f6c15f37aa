#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "cfproto/data.hpp"
#include "cfproto/error.hpp"

namespace cfproto {

/// Pairwise distances between the categories of one feature.
struct CategoryDistances {
    std::string feature;
    Matrix matrix;  // k x k

    void validate() const {
        if (matrix.rows() != matrix.cols()) throw Error("category distance matrix is not square");
        for (Eigen::Index i = 0; i < matrix.rows(); ++i) {
            if (matrix(i, i) != 0.0) throw Error("category distance matrix has a nonzero diagonal");
            for (Eigen::Index j = 0; j < matrix.cols(); ++j) {
                if (!(matrix(i, j) >= 0.0) || !std::isfinite(matrix(i, j)))
                    throw Error("category distances must be finite and nonnegative");
                if (std::abs(matrix(i, j) - matrix(j, i)) > 1e-12) throw Error("category distance matrix is not symmetric");
            }
        }
    }
};

/// One-dimensional numeric values for the categories of one feature.
struct CategoryEmbedding {
    std::string feature;
    std::vector<std::string> categories;
    std::string distance_method;  // mvdm | abdm | given
    Matrix distances;
    Matrix coordinates;  // k x 2 classical MDS coordinates
    Vector raw;          // distance of each category to the origin category
    Vector values;       // raw after scaling
    ScalingMethod scaling = ScalingMethod::standard;
    double scale_center = 0.0;  // mean or min of raw
    double scale_spread = 1.0;  // std or max-min of raw (0 when degenerate)
    bool degenerate = false;    // all categories embed to the same value

    /// Category with the nearest embedded value; ties go to the lower index.
    std::size_t nearest(double v) const {
        std::size_t best = 0;
        double best_d = std::abs(v - values[0]);
        for (Eigen::Index i = 1; i < values.size(); ++i) {
            const double d = std::abs(v - values[i]);
            if (d < best_d) {
                best = static_cast<std::size_t>(i);
                best_d = d;
            }
        }
        return best;
    }
};

// --- pairwise distances -----------------------------------------------------

/// Modified value distance: d(v1, v2) = sum_i |c1^i/c1 - c2^i/c2|^alpha over
/// classes i, where c^i counts rows with the value classified as i.
inline CategoryDistances mvdm(const Dataset& ds, const std::vector<int>& y, std::size_t feature, double alpha = 1.0) {
    if (feature >= ds.d_raw() || !ds.schema.features[feature].is_categorical())
        throw Error("mvdm: feature is not categorical");
    if (y.size() != ds.n()) throw Error("mvdm: one class per row required");
    const auto& f = ds.schema.features[feature];
    const auto k = static_cast<Eigen::Index>(f.categories.size());
    int n_classes = 0;
    for (int c : y) {
        if (c < 0) throw Error("mvdm: negative class");
        n_classes = std::max(n_classes, c + 1);
    }
    Matrix counts = Matrix::Zero(k, n_classes);
    for (std::size_t r = 0; r < ds.n(); ++r)
        counts(static_cast<Eigen::Index>(ds.rows(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(feature))), y[r]) += 1.0;
    const Vector totals = counts.rowwise().sum();
    for (Eigen::Index v = 0; v < k; ++v)
        if (totals[v] == 0.0)
            throw Error("mvdm: category '" + f.categories[static_cast<std::size_t>(v)] + "' of feature '" + f.name +
                        "' never occurs");
    const Matrix freq = totals.cwiseInverse().asDiagonal() * counts;
    CategoryDistances out{f.name, Matrix::Zero(k, k)};
    for (Eigen::Index a = 0; a < k; ++a)
        for (Eigen::Index b = a + 1; b < k; ++b) {
            double d = 0.0;
            for (Eigen::Index i = 0; i < n_classes; ++i) d += std::pow(std::abs(freq(a, i) - freq(b, i)), alpha);
            out.matrix(a, b) = out.matrix(b, a) = d;
        }
    return out;
}

/// Symmetrised Kullback-Leibler divergence 0.5 * (KL(p||q) + KL(q||p)).
inline double symmetric_kl(const Vector& p, const Vector& q) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) s += (p[i] - q[i]) * std::log(p[i] / q[i]);
    return 0.5 * s;
}

/// Association-based distance: d(v1, v2) = sum over the other features j of
/// Psi(p(x_j | x_i = v1), p(x_j | x_i = v2)), Psi = symmetric KL of conditionals
/// smoothed by adding `smoothing` to every bin count. Numeric context features
/// are cut into `n_bins` equal-width bins.
inline CategoryDistances abdm(const Dataset& ds, std::size_t feature, std::size_t n_bins = 10,
                              double smoothing = 0.01) {
    if (feature >= ds.d_raw() || !ds.schema.features[feature].is_categorical())
        throw Error("abdm: feature is not categorical");
    if (ds.d_raw() < 2) throw Error("abdm: no context features besides '" + ds.schema.features[feature].name + "'");
    if (n_bins < 1) throw Error("abdm: n_bins must be >= 1");
    const auto& f = ds.schema.features[feature];
    const auto k = static_cast<Eigen::Index>(f.categories.size());
    const auto col = ds.rows.col(static_cast<Eigen::Index>(feature));

    std::vector<std::size_t> occurrences(static_cast<std::size_t>(k), 0);
    for (Eigen::Index r = 0; r < col.size(); ++r) ++occurrences[static_cast<std::size_t>(col[r])];
    for (Eigen::Index v = 0; v < k; ++v)
        if (occurrences[static_cast<std::size_t>(v)] == 0)
            throw Error("abdm: category '" + f.categories[static_cast<std::size_t>(v)] + "' of feature '" + f.name +
                        "' never occurs");

    CategoryDistances out{f.name, Matrix::Zero(k, k)};
    for (std::size_t j = 0; j < ds.d_raw(); ++j) {
        if (j == feature) continue;
        const auto& ctx = ds.schema.features[j];
        const auto ctx_col = ds.rows.col(static_cast<Eigen::Index>(j));
        Eigen::Index bins = 0;
        std::vector<Eigen::Index> bin_of(ds.n());
        if (ctx.is_categorical()) {
            bins = static_cast<Eigen::Index>(ctx.categories.size());
            for (std::size_t r = 0; r < ds.n(); ++r) bin_of[r] = static_cast<Eigen::Index>(ctx_col[static_cast<Eigen::Index>(r)]);
        } else {
            bins = static_cast<Eigen::Index>(n_bins);
            const double lo = ctx_col.minCoeff(), hi = ctx_col.maxCoeff();
            for (std::size_t r = 0; r < ds.n(); ++r) {
                Eigen::Index b = 0;
                if (hi > lo)
                    b = static_cast<Eigen::Index>(std::floor((ctx_col[static_cast<Eigen::Index>(r)] - lo) / (hi - lo) *
                                                             static_cast<double>(n_bins)));
                bin_of[r] = std::clamp<Eigen::Index>(b, 0, bins - 1);
            }
        }
        Matrix cond = Matrix::Constant(k, bins, smoothing);
        for (std::size_t r = 0; r < ds.n(); ++r) cond(static_cast<Eigen::Index>(col[static_cast<Eigen::Index>(r)]), bin_of[r]) += 1.0;
        for (Eigen::Index v = 0; v < k; ++v) cond.row(v) /= cond.row(v).sum();
        for (Eigen::Index a = 0; a < k; ++a)
            for (Eigen::Index b = a + 1; b < k; ++b) {
                const double d = symmetric_kl(cond.row(a).transpose(), cond.row(b).transpose());
                out.matrix(a, b) += d;
                out.matrix(b, a) += d;
            }
    }
    return out;
}

// --- multidimensional scaling -----------------------------------------------

/// Classical (Torgerson) MDS: eigendecomposition of the double-centred squared
/// distance matrix. Returns k x dims coordinates; axes with negative
/// eigenvalues collapse to zero.
inline Matrix classical_mds(const Matrix& distances, Eigen::Index dims = 2) {
    const Eigen::Index k = distances.rows();
    if (k != distances.cols()) throw Error("classical_mds: distance matrix is not square");
    Matrix coords = Matrix::Zero(k, dims);
    if (k < 2) return coords;
    const Matrix centering = Matrix::Identity(k, k) - Matrix::Constant(k, k, 1.0 / static_cast<double>(k));
    const Matrix b = -0.5 * centering * distances.cwiseProduct(distances) * centering;
    Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (b + b.transpose()));
    if (solver.info() != Eigen::Success) throw Error("classical_mds: eigendecomposition failed");
    // Eigenvalues ascend; take the largest `dims`.
    for (Eigen::Index a = 0; a < std::min(dims, k); ++a) {
        const Eigen::Index idx = k - 1 - a;
        const double lambda = std::max(solver.eigenvalues()[idx], 0.0);
        coords.col(a) = solver.eigenvectors().col(idx) * std::sqrt(lambda);
    }
    return coords;
}

/// Embeds categories in 2-D by classical MDS, moves the origin to the point
/// with the largest norm, takes each point's norm as its value and scales.
inline CategoryEmbedding mds_embed(const CategoryDistances& d, ScalingMethod scale,
                                   std::vector<std::string> categories = {}) {
    d.validate();
    const Eigen::Index k = d.matrix.rows();
    if (k == 0) throw Error("mds_embed: no categories");
    CategoryEmbedding e;
    e.feature = d.feature;
    e.categories = std::move(categories);
    if (e.categories.empty())
        for (Eigen::Index i = 0; i < k; ++i) e.categories.push_back(std::to_string(i));
    e.distance_method = "given";
    e.distances = d.matrix;
    e.coordinates = classical_mds(d.matrix, 2);
    e.scaling = scale;

    const Vector norms = e.coordinates.rowwise().norm();
    Eigen::Index origin = 0;
    for (Eigen::Index i = 1; i < k; ++i)
        if (norms[i] > norms[origin] * (1.0 + 1e-12) + 1e-300) origin = i;
    e.raw.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) e.raw[i] = (e.coordinates.row(i) - e.coordinates.row(origin)).norm();

    e.values = e.raw;
    if (scale == ScalingMethod::standard) {
        e.scale_center = e.raw.mean();
        e.scale_spread = std::sqrt((e.raw.array() - e.scale_center).square().mean());
    } else if (scale == ScalingMethod::minmax) {
        e.scale_center = e.raw.minCoeff();
        e.scale_spread = e.raw.maxCoeff() - e.raw.minCoeff();
    } else {
        e.scale_center = 0.0;
        e.scale_spread = 1.0;
    }
    e.degenerate = !(e.raw.maxCoeff() - e.raw.minCoeff() > 1e-12);
    if (scale != ScalingMethod::none) {
        if (e.scale_spread > 0.0 && !e.degenerate)
            e.values = (e.raw.array() - e.scale_center) / e.scale_spread;
        else
            e.values = Vector::Zero(k);
    }
    return e;
}

// --- numeric search space ---------------------------------------------------

/// Maps raw rows (ordinal categoricals, unscaled numerics) to the numeric
/// search space and back.
class NumericSpace {
public:
    NumericSpace() = default;
    NumericSpace(FeatureSchema schema, std::map<std::size_t, CategoryEmbedding> embeddings)
        : schema_(std::move(schema)), embeddings_(std::move(embeddings)) {
        for (const auto& [idx, e] : embeddings_) {
            if (idx >= schema_.size() || !schema_.features[idx].is_categorical())
                throw Error("embedding attached to a non-categorical feature");
            if (static_cast<std::size_t>(e.values.size()) != schema_.features[idx].categories.size())
                throw Error("embedding for '" + schema_.features[idx].name + "' has the wrong category count");
        }
    }

    const FeatureSchema& schema() const noexcept { return schema_; }
    const std::map<std::size_t, CategoryEmbedding>& embeddings() const noexcept { return embeddings_; }
    std::size_t dim() const noexcept { return schema_.size(); }
    bool has_categoricals() const { return !schema_.categorical_indices().empty(); }

    Vector to_numeric(const Vector& raw) const {
        if (static_cast<std::size_t>(raw.size()) != dim())
            throw DimensionError("to_numeric", dim(), static_cast<std::size_t>(raw.size()));
        Vector x(raw.size());
        for (std::size_t j = 0; j < dim(); ++j) {
            const auto& f = schema_.features[j];
            const auto jj = static_cast<Eigen::Index>(j);
            if (f.is_categorical()) {
                x[jj] = embedding(j).values[static_cast<Eigen::Index>(raw[jj])];
            } else {
                x[jj] = f.scaling.apply(raw[jj]);
            }
        }
        return x;
    }

    Matrix to_numeric(const Matrix& rows) const {
        Matrix out(rows.rows(), rows.cols());
        for (Eigen::Index r = 0; r < rows.rows(); ++r) out.row(r) = to_numeric(Vector(rows.row(r).transpose())).transpose();
        return out;
    }

    /// Categorical coordinates snap to the nearest category; numerics are unscaled.
    Vector from_numeric(const Vector& x) const {
        if (static_cast<std::size_t>(x.size()) != dim())
            throw DimensionError("from_numeric", dim(), static_cast<std::size_t>(x.size()));
        Vector raw(x.size());
        for (std::size_t j = 0; j < dim(); ++j) {
            const auto& f = schema_.features[j];
            const auto jj = static_cast<Eigen::Index>(j);
            raw[jj] = f.is_categorical() ? static_cast<double>(embedding(j).nearest(x[jj])) : f.scaling.invert(x[jj]);
        }
        return raw;
    }

    /// Replaces each categorical coordinate by its nearest category's value.
    Vector snap(const Vector& x) const {
        Vector out = x;
        for (const auto& [j, e] : embeddings_) {
            const auto jj = static_cast<Eigen::Index>(j);
            out[jj] = e.values[static_cast<Eigen::Index>(e.nearest(x[jj]))];
        }
        return out;
    }

    const CategoryEmbedding& embedding(std::size_t feature) const {
        auto it = embeddings_.find(feature);
        if (it == embeddings_.end())
            throw Error("no embedding for categorical feature '" + schema_.features.at(feature).name + "'");
        return it->second;
    }

private:
    FeatureSchema schema_;
    std::map<std::size_t, CategoryEmbedding> embeddings_;
};

enum class CategoryDistanceMethod { mvdm, abdm };

struct EmbeddingParams {
    CategoryDistanceMethod method = CategoryDistanceMethod::abdm;
    double alpha = 1.0;         // mvdm
    std::size_t n_bins = 10;    // abdm
    double smoothing = 0.01;    // abdm
    ScalingMethod scale = ScalingMethod::standard;
};

/// Embeddings for every categorical feature. `y` (class per row) is needed for MVDM.
inline std::map<std::size_t, CategoryEmbedding> build_embeddings(const Dataset& ds, const EmbeddingParams& params,
                                                                 const std::vector<int>& y = {}) {
    std::map<std::size_t, CategoryEmbedding> out;
    for (auto j : ds.schema.categorical_indices()) {
        const auto& f = ds.schema.features[j];
        CategoryDistances d = params.method == CategoryDistanceMethod::mvdm ? mvdm(ds, y, j, params.alpha)
                                                                           : abdm(ds, j, params.n_bins, params.smoothing);
        CategoryEmbedding e = mds_embed(d, params.scale, f.categories);
        e.distance_method = params.method == CategoryDistanceMethod::mvdm ? "mvdm" : "abdm";
        out.emplace(j, std::move(e));
    }
    return out;
}

// --- embedding documents ----------------------------------------------------

namespace detail {
inline nlohmann::json matrix_rows(const Matrix& m) {
    nlohmann::json j = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        j.push_back(row);
    }
    return j;
}

inline Matrix matrix_from_rows(const nlohmann::json& j, Eigen::Index cols_hint = -1) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j[0].size()) : std::max<Eigen::Index>(cols_hint, 0);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(r)].size()) != cols) throw ParseError("ragged matrix");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}
}  // namespace detail

inline nlohmann::json to_json(const CategoryEmbedding& e) {
    return {{"feature", e.feature},
            {"categories", e.categories},
            {"distance_method", e.distance_method},
            {"mds", "classical"},
            {"distances", detail::matrix_rows(e.distances)},
            {"coordinates", detail::matrix_rows(e.coordinates)},
            {"raw_values", std::vector<double>(e.raw.data(), e.raw.data() + e.raw.size())},
            {"values", std::vector<double>(e.values.data(), e.values.data() + e.values.size())},
            {"scaling", {{"method", to_string(e.scaling)}, {"center", e.scale_center}, {"spread", e.scale_spread}}},
            {"degenerate", e.degenerate}};
}

inline CategoryEmbedding embedding_from_json(const nlohmann::json& j) {
    try {
        CategoryEmbedding e;
        e.feature = j.at("feature").get<std::string>();
        e.categories = j.at("categories").get<std::vector<std::string>>();
        e.distance_method = j.value("distance_method", std::string("given"));
        e.distances = detail::matrix_from_rows(j.at("distances"));
        e.coordinates = detail::matrix_from_rows(j.value("coordinates", nlohmann::json::array()), 2);
        const auto raw = j.at("raw_values").get<std::vector<double>>();
        const auto values = j.at("values").get<std::vector<double>>();
        if (raw.size() != e.categories.size() || values.size() != e.categories.size())
            throw ParseError("embedding for '" + e.feature + "' has the wrong number of values");
        e.raw = Eigen::Map<const Vector>(raw.data(), static_cast<Eigen::Index>(raw.size()));
        e.values = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
        e.scaling = parse_scaling_method(j.at("scaling").value("method", std::string("standard")));
        e.scale_center = j.at("scaling").value("center", 0.0);
        e.scale_spread = j.at("scaling").value("spread", 1.0);
        e.degenerate = j.value("degenerate", false);
        return e;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("invalid embedding document: ") + ex.what());
    }
}

inline nlohmann::json embeddings_to_json(const std::map<std::size_t, CategoryEmbedding>& embeddings) {
    nlohmann::json j{{"embeddings", nlohmann::json::array()}};
    for (const auto& [idx, e] : embeddings) j["embeddings"].push_back(to_json(e));
    return j;
}

/// Reattaches stored embeddings to the schema's categorical features by name.
inline std::map<std::size_t, CategoryEmbedding> embeddings_from_json(const nlohmann::json& j,
                                                                     const FeatureSchema& schema) {
    std::map<std::size_t, CategoryEmbedding> out;
    if (!j.contains("embeddings")) throw ParseError("embedding document lacks 'embeddings'");
    for (const auto& ej : j["embeddings"]) {
        CategoryEmbedding e = embedding_from_json(ej);
        const std::size_t idx = schema.index_of(e.feature);
        if (e.categories != schema.features[idx].categories)
            throw ParseError("embedding categories for '" + e.feature + "' differ from the schema");
        out.emplace(idx, std::move(e));
    }
    return out;
}

}  // namespace cfproto
