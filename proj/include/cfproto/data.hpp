#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cfproto/error.hpp"

namespace cfproto {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class FeatureKind { numeric, categorical };
enum class ScalingMethod { none, standard, minmax };

inline std::string to_string(ScalingMethod m) {
    switch (m) {
        case ScalingMethod::standard: return "standard";
        case ScalingMethod::minmax: return "minmax";
        default: return "none";
    }
}

inline ScalingMethod parse_scaling_method(std::string_view s) {
    if (s == "standard") return ScalingMethod::standard;
    if (s == "minmax") return ScalingMethod::minmax;
    if (s == "none") return ScalingMethod::none;
    throw ParseError("unknown scaling method '" + std::string(s) + "'");
}

/// Affine scaling of one numeric column.
struct Scaling {
    ScalingMethod method = ScalingMethod::none;
    double mean = 0.0;
    double std = 1.0;
    double min = 0.0;
    double max = 1.0;

    double apply(double v) const {
        switch (method) {
            case ScalingMethod::standard: return (v - mean) / std;
            case ScalingMethod::minmax: return (v - min) / (max - min);
            default: return v;
        }
    }

    double invert(double v) const {
        switch (method) {
            case ScalingMethod::standard: return v * std + mean;
            case ScalingMethod::minmax: return v * (max - min) + min;
            default: return v;
        }
    }
};

struct Feature {
    std::string name;
    FeatureKind kind = FeatureKind::numeric;
    std::vector<std::string> categories;  // categorical only, position = ordinal index
    Scaling scaling;                      // numeric only

    bool is_categorical() const noexcept { return kind == FeatureKind::categorical; }

    std::optional<std::size_t> category_index(std::string_view value) const {
        for (std::size_t i = 0; i < categories.size(); ++i)
            if (categories[i] == value) return i;
        return std::nullopt;
    }
};

/// Label column carried alongside the features (used to train classifiers).
struct TargetSpec {
    std::string name;
    std::vector<std::string> classes;
};

class FeatureSchema {
public:
    std::vector<Feature> features;
    std::optional<TargetSpec> target;

    FeatureSchema() = default;
    FeatureSchema(std::vector<Feature> f, std::optional<TargetSpec> t = std::nullopt)
        : features(std::move(f)), target(std::move(t)) {
        validate();
    }

    std::size_t size() const noexcept { return features.size(); }

    std::size_t index_of(std::string_view name) const {
        for (std::size_t i = 0; i < features.size(); ++i)
            if (features[i].name == name) return i;
        throw Error("unknown feature '" + std::string(name) + "'");
    }

    std::vector<std::size_t> categorical_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < features.size(); ++i)
            if (features[i].is_categorical()) out.push_back(i);
        return out;
    }

    void validate() const {
        std::set<std::string> seen;
        for (const auto& f : features) {
            if (f.name.empty()) throw Error("feature with empty name");
            if (!seen.insert(f.name).second) throw Error("duplicate feature name '" + f.name + "'");
            if (f.is_categorical()) {
                if (f.categories.empty())
                    throw Error("categorical feature '" + f.name + "' has no categories");
                std::set<std::string> cats(f.categories.begin(), f.categories.end());
                if (cats.size() != f.categories.size())
                    throw Error("categorical feature '" + f.name + "' has duplicate categories");
            } else {
                const auto& s = f.scaling;
                if (s.method == ScalingMethod::standard && !(s.std > 0.0 && std::isfinite(s.std)))
                    throw Error("feature '" + f.name + "': standard scaling requires std > 0");
                if (s.method == ScalingMethod::minmax && !(s.max > s.min))
                    throw Error("feature '" + f.name + "': minmax scaling requires max > min");
            }
        }
        if (target) {
            if (seen.count(target->name)) throw Error("target name collides with a feature");
            if (target->classes.size() < 2) throw Error("target needs at least two classes");
        }
    }
};

/// Raw tabular data: numerics as reals, categoricals as ordinal indices.
struct Dataset {
    FeatureSchema schema;
    Matrix rows;              // n x d_raw
    std::vector<int> labels;  // empty unless the schema declares a target

    std::size_t n() const noexcept { return static_cast<std::size_t>(rows.rows()); }
    std::size_t d_raw() const noexcept { return schema.size(); }
    bool has_labels() const noexcept { return schema.target.has_value(); }

    /// Contiguous row range [begin, end).
    Dataset slice(std::size_t begin, std::size_t end) const {
        if (begin > end || end > n()) throw Error("dataset slice out of range");
        Dataset out{schema, rows.middleRows(static_cast<Eigen::Index>(begin),
                                            static_cast<Eigen::Index>(end - begin)),
                    {}};
        if (!labels.empty()) out.labels.assign(labels.begin() + begin, labels.begin() + end);
        return out;
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    for (auto& c : cells) {
        auto b = c.find_first_not_of(" \t");
        auto e = c.find_last_not_of(" \t");
        c = (b == std::string::npos) ? std::string{} : c.substr(b, e - b + 1);
    }
    return cells;
}

inline std::optional<double> parse_double(std::string_view s) {
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return os.str();
}

}  // namespace detail

/// Parses CSV text whose header lists the schema's features in order,
/// followed by the target column when the schema has one.
inline Dataset read_csv(std::istream& in, const FeatureSchema& schema) {
    schema.validate();
    std::vector<std::string> expected;
    for (const auto& f : schema.features) expected.push_back(f.name);
    if (schema.target) expected.push_back(schema.target->name);

    std::string line;
    if (!std::getline(in, line)) throw ParseError("missing CSV header");
    auto header = detail::split_csv_line(line);
    if (header != expected) throw ParseError("CSV header does not match schema feature names");

    const std::size_t d = schema.size();
    std::vector<double> values;
    std::vector<int> labels;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != expected.size())
            throw ParseError("expected " + std::to_string(expected.size()) + " cells, got " +
                                 std::to_string(cells.size()),
                             row, "*");
        for (std::size_t j = 0; j < d; ++j) {
            const auto& f = schema.features[j];
            if (cells[j].empty()) throw ParseError("missing value", row, f.name);
            if (f.is_categorical()) {
                auto idx = f.category_index(cells[j]);
                if (!idx) throw ParseError("unknown category '" + cells[j] + "'", row, f.name);
                values.push_back(static_cast<double>(*idx));
            } else {
                auto v = detail::parse_double(cells[j]);
                if (!v || !std::isfinite(*v))
                    throw ParseError("non-numeric value '" + cells[j] + "'", row, f.name);
                values.push_back(*v);
            }
        }
        if (schema.target) {
            const auto& t = *schema.target;
            const auto& cell = cells[d];
            int label = -1;
            for (std::size_t c = 0; c < t.classes.size(); ++c)
                if (t.classes[c] == cell) label = static_cast<int>(c);
            if (label < 0) throw ParseError("unknown class '" + cell + "'", row, t.name);
            labels.push_back(label);
        }
    }

    Dataset ds{schema, Matrix(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(d)),
               std::move(labels)};
    for (std::size_t i = 0; i < row; ++i)
        for (std::size_t j = 0; j < d; ++j)
            ds.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i * d + j];
    return ds;
}

inline Dataset load_csv(const std::string& path, const FeatureSchema& schema) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open CSV file '" + path + "'");
    return read_csv(in, schema);
}

inline void write_csv(std::ostream& out, const Dataset& ds) {
    const auto& schema = ds.schema;
    for (std::size_t j = 0; j < schema.size(); ++j) out << (j ? "," : "") << schema.features[j].name;
    if (schema.target) out << ',' << schema.target->name;
    out << '\n';
    for (std::size_t i = 0; i < ds.n(); ++i) {
        for (std::size_t j = 0; j < schema.size(); ++j) {
            const double v = ds.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            const auto& f = schema.features[j];
            if (j) out << ',';
            if (f.is_categorical())
                out << f.categories.at(static_cast<std::size_t>(v));
            else
                out << detail::format_double(v);
        }
        if (schema.target) out << ',' << schema.target->classes.at(static_cast<std::size_t>(ds.labels[i]));
        out << '\n';
    }
}

/// Fits per-numeric-feature scaling parameters. Standard scaling uses the
/// population standard deviation.
inline FeatureSchema fit_scaling(const Dataset& ds, ScalingMethod method) {
    FeatureSchema out = ds.schema;
    if (method == ScalingMethod::standard && ds.n() < 2)
        throw Error("standard scaling needs at least two rows");
    if (method == ScalingMethod::minmax && ds.n() < 1) throw Error("minmax scaling needs data");
    for (std::size_t j = 0; j < out.size(); ++j) {
        auto& f = out.features[j];
        if (f.is_categorical()) continue;
        const auto col = ds.rows.col(static_cast<Eigen::Index>(j));
        Scaling s;
        s.method = method;
        if (method == ScalingMethod::standard) {
            s.mean = col.mean();
            s.std = std::sqrt((col.array() - s.mean).square().mean());
            if (!(s.std > 0.0)) throw Error("feature '" + f.name + "' has zero variance");
        } else if (method == ScalingMethod::minmax) {
            s.min = col.minCoeff();
            s.max = col.maxCoeff();
            if (!(s.max > s.min)) throw Error("feature '" + f.name + "' is constant");
        }
        f.scaling = s;
    }
    return out;
}

/// Scales numeric cells of a raw row; categorical cells pass through unchanged.
inline Vector apply_scaling(const FeatureSchema& schema, const Vector& raw) {
    if (static_cast<std::size_t>(raw.size()) != schema.size())
        throw DimensionError("apply_scaling", schema.size(), static_cast<std::size_t>(raw.size()));
    Vector out = raw;
    for (std::size_t j = 0; j < schema.size(); ++j)
        if (!schema.features[j].is_categorical())
            out[static_cast<Eigen::Index>(j)] = schema.features[j].scaling.apply(raw[static_cast<Eigen::Index>(j)]);
    return out;
}

inline Vector invert_scaling(const FeatureSchema& schema, const Vector& scaled) {
    if (static_cast<std::size_t>(scaled.size()) != schema.size())
        throw DimensionError("invert_scaling", schema.size(), static_cast<std::size_t>(scaled.size()));
    Vector out = scaled;
    for (std::size_t j = 0; j < schema.size(); ++j)
        if (!schema.features[j].is_categorical())
            out[static_cast<Eigen::Index>(j)] =
                schema.features[j].scaling.invert(scaled[static_cast<Eigen::Index>(j)]);
    return out;
}

/// Box constraints on the numeric search space plus features held fixed.
struct FeasibleBox {
    Vector lower;
    Vector upper;
    std::vector<std::size_t> frozen;

    static FeasibleBox unbounded(std::size_t d) {
        const double inf = std::numeric_limits<double>::infinity();
        return {Vector::Constant(static_cast<Eigen::Index>(d), -inf),
                Vector::Constant(static_cast<Eigen::Index>(d), inf),
                {}};
    }

    /// Column-wise min/max of the given rows, widened to contain `x0`.
    static FeasibleBox from_data(const Matrix& rows, const Vector& x0) {
        FeasibleBox box{rows.colwise().minCoeff().transpose(), rows.colwise().maxCoeff().transpose(), {}};
        box.lower = box.lower.cwiseMin(x0);
        box.upper = box.upper.cwiseMax(x0);
        return box;
    }

    std::size_t dim() const noexcept { return static_cast<std::size_t>(lower.size()); }

    void validate() const {
        if (lower.size() != upper.size()) throw Error("feasible box bounds differ in length");
        for (Eigen::Index i = 0; i < lower.size(); ++i)
            if (!(lower[i] <= upper[i])) throw Error("feasible box has lower > upper");
        for (auto f : frozen)
            if (f >= dim()) throw Error("frozen feature index out of range");
    }

    bool contains(const Vector& x) const {
        for (Eigen::Index i = 0; i < x.size(); ++i)
            if (x[i] < lower[i] || x[i] > upper[i]) return false;
        return true;
    }
};

// --- schema documents ------------------------------------------------------

inline nlohmann::json to_json(const FeatureSchema& schema) {
    nlohmann::json j;
    j["features"] = nlohmann::json::array();
    for (const auto& f : schema.features) {
        nlohmann::json fj{{"name", f.name}};
        if (f.is_categorical()) {
            fj["kind"] = "categorical";
            fj["categories"] = f.categories;
        } else {
            fj["kind"] = "numeric";
            nlohmann::json sj{{"method", to_string(f.scaling.method)}};
            if (f.scaling.method == ScalingMethod::standard) {
                sj["mean"] = f.scaling.mean;
                sj["std"] = f.scaling.std;
            } else if (f.scaling.method == ScalingMethod::minmax) {
                sj["min"] = f.scaling.min;
                sj["max"] = f.scaling.max;
            }
            fj["scaling"] = sj;
        }
        j["features"].push_back(fj);
    }
    if (schema.target) j["target"] = {{"name", schema.target->name}, {"classes", schema.target->classes}};
    return j;
}

inline FeatureSchema schema_from_json(const nlohmann::json& j) {
    try {
        FeatureSchema s;
        for (const auto& fj : j.at("features")) {
            Feature f;
            f.name = fj.at("name").get<std::string>();
            const auto kind = fj.value("kind", std::string("numeric"));
            if (kind == "categorical") {
                f.kind = FeatureKind::categorical;
                f.categories = fj.at("categories").get<std::vector<std::string>>();
            } else if (kind == "numeric") {
                if (fj.contains("scaling")) {
                    const auto& sj = fj["scaling"];
                    f.scaling.method = parse_scaling_method(sj.value("method", std::string("none")));
                    f.scaling.mean = sj.value("mean", 0.0);
                    f.scaling.std = sj.value("std", 1.0);
                    f.scaling.min = sj.value("min", 0.0);
                    f.scaling.max = sj.value("max", 1.0);
                }
            } else {
                throw ParseError("feature '" + f.name + "' has unknown kind '" + kind + "'");
            }
            s.features.push_back(std::move(f));
        }
        if (j.contains("target"))
            s.target = TargetSpec{j["target"].at("name").get<std::string>(),
                                  j["target"].at("classes").get<std::vector<std::string>>()};
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid schema document: ") + e.what());
    }
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("'" + path + "': " + e.what());
    }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

inline FeatureSchema load_schema(const std::string& path) { return schema_from_json(read_json_file(path)); }
inline void save_schema(const std::string& path, const FeatureSchema& s) { write_json_file(path, to_json(s)); }

}  // namespace cfproto
