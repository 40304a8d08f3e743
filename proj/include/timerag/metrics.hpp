#pragma once

#include "timerag/math.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace timerag {

/// One multivariate performance-metric window, values are T rows x F columns.
struct MetricSample {
    std::string id;
    MatrixXd values;
    std::vector<std::string> metric_names;
    double frequency_seconds = 1.0;
    std::string period_start;
    std::string period_end;
    std::optional<int> failure_label;
    // Populated by normalize_minmax; empty until then.
    VectorXd raw_min;
    VectorXd raw_max;

    Eigen::Index length() const { return values.rows(); }
    Eigen::Index features() const { return values.cols(); }
    bool normalized() const { return raw_min.size() == values.cols(); }
};

/// Contiguous segment of a sample, patch_len rows x F columns.
struct Patch {
    std::string sample_id;
    int index = 0;
    MatrixXd values;
};

enum class SampleFormat { Jsonl, CsvDir };

SampleFormat parse_sample_format(const std::string& name);

/// Loads samples from a JSONL file or a directory of CSV files with JSON sidecars.
std::vector<MetricSample> load_samples(const std::filesystem::path& path, SampleFormat format);

/// Writes samples as JSONL. raw_min/raw_max are included when the sample is normalized.
void save_samples(const std::filesystem::path& path, const std::vector<MetricSample>& samples);

/// Throws if the sample violates the MetricSample invariants.
void validate_sample(const MetricSample& sample);

/// Predicts the next time step from a history matrix (T x F).
class Forecaster {
public:
    virtual ~Forecaster() = default;
    virtual VectorXd next(const MatrixXd& history) const = 0;
};

/// Per-feature least-squares line over the trailing window, evaluated one step ahead.
class LinearForecaster final : public Forecaster {
public:
    explicit LinearForecaster(int window = 64) : window_(window) {}
    VectorXd next(const MatrixXd& history) const override;

private:
    int window_;
};

inline constexpr int kStandardLength = 900;
inline constexpr int kDefaultPatchLen = 30;

/// Extends a short sample to target_len rows by repeated one-step forecasts.
/// The observed prefix is copied unchanged.
MetricSample extrapolate(const MetricSample& sample, int target_len, const Forecaster& forecaster);

/// Splits long samples into non-overlapping windows and extrapolates short ones.
/// A trailing remainder of at least target_len/2 rows is extrapolated, shorter ones are dropped.
std::vector<MetricSample> standardize_length(const MetricSample& sample, int target_len = kStandardLength,
                                             const Forecaster& forecaster = LinearForecaster{});

MetricSample normalize_minmax(const MetricSample& sample);

/// Inverse of normalize_minmax using the stored extrema.
MatrixXd denormalize(const MetricSample& sample);

std::vector<Patch> segment_into_patches(const MetricSample& sample, int patch_len = kDefaultPatchLen);

/// Shifts an ISO-8601 UTC timestamp by a number of seconds. Returns nullopt when
/// the timestamp cannot be parsed.
std::optional<std::string> shift_timestamp(const std::string& iso, double seconds);

}  // namespace timerag
