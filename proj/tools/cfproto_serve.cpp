// cfproto_serve: answers line-delimited JSON prediction requests on stdin.
//   request  {"id": n, "x": [[...], ...]}
//   response {"id": n, "p": [[...], ...]}
// Serves a saved classifier, a fixed probability vector, or a 1-D logistic
// model on the first feature. Optionally records how many rows it evaluated.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cfproto/data.hpp"
#include "cfproto/nn.hpp"

using nlohmann::json;

int main(int argc, char** argv) {
    CLI::App app{"Line-delimited JSON model server"};
    std::string model_path, fixed, count_file;
    double logistic = 0.0;
    int sleep_ms = 0;
    auto* model_opt = app.add_option("--model", model_path, "Classifier file to serve");
    auto* fixed_opt = app.add_option("--fixed", fixed, "Comma-separated probabilities returned for every row");
    auto* logistic_opt = app.add_option("--logistic", logistic, "Two classes, p1 = sigmoid(scale * x[0])");
    model_opt->excludes(fixed_opt)->excludes(logistic_opt);
    fixed_opt->excludes(logistic_opt);
    app.add_option("--count-file", count_file, "Write the number of evaluated rows here after every request");
    app.add_option("--sleep-ms", sleep_ms, "Delay before each response");
    CLI11_PARSE(app, argc, argv);

    std::optional<cfproto::DenseNet> net;
    std::vector<double> fixed_p;
    try {
        if (!model_path.empty()) {
            net = cfproto::load_model(model_path);
        } else if (!fixed.empty()) {
            std::stringstream ss(fixed);
            std::string item;
            while (std::getline(ss, item, ',')) fixed_p.push_back(std::stod(item));
        } else if (app.count("--logistic") == 0) {
            std::cerr << "one of --model, --fixed or --logistic is required\n";
            return 2;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }

    std::uint64_t rows_seen = 0;
    std::string line;
    while (std::getline(std::cin, line)) {
        if (line.empty()) continue;
        json req;
        try {
            req = json::parse(line);
        } catch (const json::exception&) {
            std::cerr << "malformed request\n";
            return 3;
        }
        const auto& x = req.at("x");
        json p = json::array();
        for (const auto& row : x) {
            const auto v = row.get<std::vector<double>>();
            if (net) {
                const cfproto::Vector in = Eigen::Map<const cfproto::Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
                const cfproto::Vector out = net->forward(in);
                p.push_back(std::vector<double>(out.data(), out.data() + out.size()));
            } else if (!fixed_p.empty()) {
                p.push_back(fixed_p);
            } else {
                const double p1 = 1.0 / (1.0 + std::exp(-logistic * v.at(0)));
                p.push_back({1.0 - p1, p1});
            }
            ++rows_seen;
        }
        if (sleep_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(sleep_ms));
        if (!count_file.empty()) {
            std::ofstream(count_file) << rows_seen << "\n";
        }
        std::cout << json{{"id", req.at("id")}, {"p", p}}.dump(-1, ' ', false, json::error_handler_t::replace) << "\n"
                  << std::flush;
    }
    return 0;
}
