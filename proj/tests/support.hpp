#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "cad/net.hpp"
#include "cad/rng.hpp"

namespace cad::testing {

using net::Matrix;
using net::ParamVector;
using net::Vector;

// Central differences of f around theta, one coordinate at a time.
inline std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> theta, double h = 1e-5) {
    std::vector<double> x(theta.begin(), theta.end());
    std::vector<double> g(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double keep = x[k];
        x[k] = keep + h;
        const double up = f(x);
        x[k] = keep - h;
        const double down = f(x);
        x[k] = keep;
        g[k] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double relative_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
    return std::sqrt(diff) / scale;
}

inline std::span<const double> span_of(const Vector& v) {
    return {v.data(), static_cast<std::size_t>(v.size())};
}

// Small random network with at most `max_params` parameters.
inline net::NetworkSpec random_spec(Rng& rng, std::size_t max_params = 50) {
    const net::Activation acts[] = {net::Activation::Tanh, net::Activation::Relu, net::Activation::Linear};
    for (;;) {
        net::NetworkSpec spec;
        const std::size_t layers = 1 + rng.below(3);
        spec.widths.push_back(1 + rng.below(4));
        for (std::size_t l = 0; l < layers; ++l) spec.widths.push_back(1 + rng.below(4));
        for (std::size_t l = 0; l + 1 < layers; ++l) spec.hidden.push_back(acts[rng.below(3)]);
        spec.init_seed = rng.next_u64();
        if (spec.param_count() <= max_params) return spec;
    }
}

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(lo, hi);
    return m;
}

inline ParamVector random_params(Rng& rng, std::size_t n, double scale = 1.0) {
    ParamVector p(n);
    for (auto& v : p) v = rng.uniform(-scale, scale);
    return p;
}

// True when some ReLU pre-activation sits close enough to its kink that a
// finite difference would straddle it.
inline bool near_relu_kink(std::span<const double> theta, const net::NetworkSpec& spec, const Matrix& x,
                           double margin = 1e-3) {
    const auto trace = net::forward(theta, spec, x);
    for (std::size_t l = 0; l + 1 < spec.layer_count(); ++l) {
        if (spec.activation(l) != net::Activation::Relu) continue;
        if ((trace.pre[l].array().abs() < margin).any()) return true;
    }
    return false;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        Rng rng(static_cast<std::uint64_t>(std::hash<std::string>{}(tag)) ^
                static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()));
        path_ = std::filesystem::temp_directory_path() / ("cad-" + tag + "-" + std::to_string(rng.next_u64() % 1000000007));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

} // namespace cad::testing
