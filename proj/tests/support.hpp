#pragma once

#include "timerag/metrics.hpp"
#include "timerag/random.hpp"

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("timerag-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Compares against tests/golden/<name>. With TIMERAG_UPDATE_GOLDEN set the
/// file is rewritten instead.
inline std::string golden(const std::string& name, const std::string& actual) {
    const auto path = std::filesystem::path(TIMERAG_GOLDEN_DIR) / name;
    if (std::getenv("TIMERAG_UPDATE_GOLDEN")) write_file(path, actual);
    return read_file(path);
}

inline timerag::MetricSample make_sample(const std::string& id, const timerag::MatrixXd& values) {
    timerag::MetricSample s;
    s.id = id;
    s.values = values;
    for (Eigen::Index f = 0; f < values.cols(); ++f) s.metric_names.push_back("m" + std::to_string(f));
    s.frequency_seconds = 1.0;
    s.period_start = "2024-01-01T00:00:00Z";
    s.period_end = "2024-01-01T00:14:59Z";
    return s;
}

inline timerag::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, timerag::Rng& rng, double lo = -1,
                                       double hi = 1) {
    timerag::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
    return m;
}

}  // namespace testing
