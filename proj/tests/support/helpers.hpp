#pragma once

// Shared helpers for the test suites.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "coved/tensor.hpp"

namespace coved::testing {

inline bool approx_eq(double a, double b, double tol = 1e-9) {
    return std::fabs(a - b) <= tol;
}

inline bool all_close(std::span<const double> a, std::span<const double> b, double tol = 1e-9) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!approx_eq(a[i], b[i], tol)) return false;
    return true;
}

inline bool all_finite(std::span<const double> a) {
    for (double v : a)
        if (!std::isfinite(v)) return false;
    return true;
}

// Scratch directory under the system temp dir, wiped on construction.
class TempDir {
public:
    explicit TempDir(const std::string& name)
        : path_(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path file(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p);
    out << content;
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace coved::testing
