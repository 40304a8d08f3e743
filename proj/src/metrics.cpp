#include "timerag/metrics.hpp"

#include "timerag/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

namespace timerag {

using nlohmann::json;

namespace {

std::string line_context(const std::filesystem::path& path, std::size_t line) {
    return path.string() + ":" + std::to_string(line);
}

MetricSample sample_from_json(const json& rec, const std::string& where) {
    MetricSample s;
    try {
        s.id = rec.at("id").get<std::string>();
        s.metric_names = rec.at("metric_names").get<std::vector<std::string>>();
        s.frequency_seconds = rec.value("frequency_seconds", 1.0);
        s.period_start = rec.value("period_start", std::string{});
        s.period_end = rec.value("period_end", std::string{});
        if (rec.contains("failure_label") && !rec["failure_label"].is_null()) {
            s.failure_label = rec["failure_label"].get<int>();
        }
        const auto& rows = rec.at("values");
        if (!rows.is_array() || rows.empty()) throw ParseError(where + ": 'values' must be a non-empty array");
        const auto n_cols = s.metric_names.size();
        s.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(n_cols));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto& row = rows[r];
            if (!row.is_array() || row.size() != n_cols) {
                throw ParseError(where + ": row " + std::to_string(r) + " has " + std::to_string(row.size()) +
                                 " columns, expected " + std::to_string(n_cols) + " (one per metric name)");
            }
            for (std::size_t c = 0; c < n_cols; ++c) {
                if (row[c].is_null()) throw DataError(where + ": null value at row " + std::to_string(r));
                s.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c].get<double>();
            }
        }
        if (rec.contains("raw_min") && rec.contains("raw_max")) {
            const auto mn = rec["raw_min"].get<std::vector<double>>();
            const auto mx = rec["raw_max"].get<std::vector<double>>();
            if (mn.size() != n_cols || mx.size() != n_cols) throw ParseError(where + ": raw_min/raw_max size mismatch");
            s.raw_min = Eigen::Map<const VectorXd>(mn.data(), static_cast<Eigen::Index>(n_cols));
            s.raw_max = Eigen::Map<const VectorXd>(mx.data(), static_cast<Eigen::Index>(n_cols));
        }
    } catch (const json::exception& e) {
        throw ParseError(where + ": " + e.what());
    }
    return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& text, const std::string& where) {
    double v = 0;
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    while (first < last && *first == ' ') ++first;
    if (first < last && *first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) throw ParseError(where + ": cannot parse number '" + text + "'");
    return v;
}

std::vector<MetricSample> load_csv_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ArgumentError(dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<MetricSample> out;
    for (const auto& file : files) {
        std::ifstream in(file);
        std::string line;
        std::size_t line_no = 0;
        if (!std::getline(in, line)) throw ParseError(line_context(file, 1) + ": missing header");
        ++line_no;
        auto header = split_csv_line(line);
        if (header.size() < 2) throw ParseError(line_context(file, 1) + ": header needs timestamp and at least one metric");
        MetricSample s;
        s.metric_names.assign(header.begin() + 1, header.end());
        std::vector<std::vector<double>> rows;
        std::vector<std::string> stamps;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty() || line == "\r") continue;
            auto cells = split_csv_line(line);
            if (cells.size() != header.size()) {
                throw ParseError(line_context(file, line_no) + ": expected " + std::to_string(header.size()) +
                                 " cells, got " + std::to_string(cells.size()));
            }
            stamps.push_back(cells[0]);
            std::vector<double> row;
            for (std::size_t c = 1; c < cells.size(); ++c) {
                row.push_back(parse_double(cells[c], line_context(file, line_no)));
            }
            rows.push_back(std::move(row));
        }
        if (rows.empty()) throw ParseError(file.string() + ": no data rows");
        s.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(s.metric_names.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t c = 0; c < rows[r].size(); ++c) {
                s.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
            }
        }
        s.period_start = stamps.front();
        s.period_end = stamps.back();
        s.id = file.stem().string();
        auto sidecar = file;
        sidecar.replace_extension(".json");
        if (std::filesystem::exists(sidecar)) {
            std::ifstream sc(sidecar);
            json meta;
            try {
                meta = json::parse(sc);
                s.id = meta.value("id", s.id);
                if (meta.contains("failure_label") && !meta["failure_label"].is_null()) {
                    s.failure_label = meta["failure_label"].get<int>();
                }
                s.frequency_seconds = meta.value("frequency_seconds", 1.0);
            } catch (const json::exception& e) {
                throw ParseError(sidecar.string() + ": " + e.what());
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

bool parse_iso(const std::string& iso, std::time_t& t, double& frac, bool& zulu) {
    int y, mo, d, h, mi;
    double sec;
    char sep;
    if (std::sscanf(iso.c_str(), "%4d-%2d-%2d%c%2d:%2d:%lf", &y, &mo, &d, &sep, &h, &mi, &sec) != 7) return false;
    if (sep != 'T' && sep != ' ') return false;
    std::tm tm{};
    tm.tm_year = y - 1900;
    tm.tm_mon = mo - 1;
    tm.tm_mday = d;
    tm.tm_hour = h;
    tm.tm_min = mi;
    tm.tm_sec = static_cast<int>(sec);
    frac = sec - std::floor(sec);
    t = timegm(&tm);
    zulu = !iso.empty() && iso.back() == 'Z';
    return true;
}

}  // namespace

SampleFormat parse_sample_format(const std::string& name) {
    if (name == "jsonl") return SampleFormat::Jsonl;
    if (name == "csv-dir") return SampleFormat::CsvDir;
    throw ArgumentError("unknown sample format '" + name + "' (expected jsonl or csv-dir)");
}

void validate_sample(const MetricSample& s) {
    if (s.values.rows() < 1 || s.values.cols() < 1) throw DataError("sample '" + s.id + "' is empty");
    if (static_cast<Eigen::Index>(s.metric_names.size()) != s.values.cols()) {
        throw ParseError("sample '" + s.id + "' has " + std::to_string(s.metric_names.size()) + " metric names but " +
                         std::to_string(s.values.cols()) + " columns");
    }
    if (!(s.frequency_seconds > 0)) throw DataError("sample '" + s.id + "' has non-positive frequency");
    if (!s.values.allFinite()) throw DataError("sample '" + s.id + "' contains non-finite values");
}

std::vector<MetricSample> load_samples(const std::filesystem::path& path, SampleFormat format) {
    if (!std::filesystem::exists(path)) throw ArgumentError(path.string() + " does not exist");
    std::vector<MetricSample> out;
    if (format == SampleFormat::CsvDir) {
        out = load_csv_dir(path);
    } else {
        std::ifstream in(path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            json rec;
            try {
                rec = json::parse(line);
            } catch (const json::parse_error& e) {
                throw ParseError(line_context(path, line_no) + ": " + e.what());
            }
            auto s = sample_from_json(rec, line_context(path, line_no));
            try {
                validate_sample(s);
            } catch (const ParseError& e) {
                throw ParseError(line_context(path, line_no) + ": " + e.what());
            } catch (const DataError& e) {
                throw DataError(line_context(path, line_no) + ": " + e.what());
            }
            out.push_back(std::move(s));
        }
    }
    std::set<std::string> ids;
    for (const auto& s : out) {
        validate_sample(s);
        if (!ids.insert(s.id).second) throw ConflictError("duplicate sample id '" + s.id + "'");
    }
    return out;
}

void save_samples(const std::filesystem::path& path, const std::vector<MetricSample>& samples) {
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write " + path.string());
    for (const auto& s : samples) {
        json rows = json::array();
        for (Eigen::Index r = 0; r < s.values.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < s.values.cols(); ++c) row.push_back(s.values(r, c));
            rows.push_back(std::move(row));
        }
        json rec = {{"id", s.id},
                    {"metric_names", s.metric_names},
                    {"frequency_seconds", s.frequency_seconds},
                    {"period_start", s.period_start},
                    {"period_end", s.period_end},
                    {"values", std::move(rows)},
                    {"failure_label", s.failure_label ? json(*s.failure_label) : json(nullptr)}};
        if (s.normalized()) {
            rec["raw_min"] = std::vector<double>(s.raw_min.data(), s.raw_min.data() + s.raw_min.size());
            rec["raw_max"] = std::vector<double>(s.raw_max.data(), s.raw_max.data() + s.raw_max.size());
        }
        out << rec.dump() << '\n';
    }
}

VectorXd LinearForecaster::next(const MatrixXd& history) const {
    const Eigen::Index t = history.rows();
    const Eigen::Index n = std::min<Eigen::Index>(t, window_);
    const auto tail = history.bottomRows(n);
    if (n == 1) return tail.row(0).transpose();
    // Local time axis 0..n-1; prediction at n.
    const double t_mean = static_cast<double>(n - 1) / 2.0;
    VectorXd out(history.cols());
    double sxx = 0;
    for (Eigen::Index i = 0; i < n; ++i) sxx += (static_cast<double>(i) - t_mean) * (static_cast<double>(i) - t_mean);
    for (Eigen::Index f = 0; f < history.cols(); ++f) {
        const double y_mean = tail.col(f).mean();
        double sxy = 0;
        for (Eigen::Index i = 0; i < n; ++i) sxy += (static_cast<double>(i) - t_mean) * (tail(i, f) - y_mean);
        out(f) = y_mean + (sxy / sxx) * (static_cast<double>(n) - t_mean);
    }
    return out;
}

MetricSample extrapolate(const MetricSample& sample, int target_len, const Forecaster& forecaster) {
    if (sample.length() >= target_len) {
        throw ArgumentError("extrapolate: sample '" + sample.id + "' already has " + std::to_string(sample.length()) +
                            " >= " + std::to_string(target_len) + " rows");
    }
    MetricSample out = sample;
    out.values.resize(target_len, sample.features());
    out.values.topRows(sample.length()) = sample.values;
    for (Eigen::Index t = sample.length(); t < target_len; ++t) {
        const VectorXd next = forecaster.next(out.values.topRows(t));
        if (next.size() != sample.features() || !next.allFinite()) {
            throw DataError("forecaster produced a non-finite or mis-sized step at row " + std::to_string(t) +
                            " for sample '" + sample.id + "'");
        }
        out.values.row(t) = next.transpose();
    }
    if (auto end = shift_timestamp(sample.period_start, (target_len - 1) * sample.frequency_seconds)) {
        out.period_end = *end;
    }
    return out;
}

std::vector<MetricSample> standardize_length(const MetricSample& sample, int target_len,
                                             const Forecaster& forecaster) {
    if (target_len < 2) throw ArgumentError("target_len must be >= 2");
    const Eigen::Index t = sample.length();
    if (t == target_len) return {sample};
    if (t < target_len) return {extrapolate(sample, target_len, forecaster)};

    std::vector<MetricSample> out;
    const Eigen::Index full = t / target_len;
    const Eigen::Index remainder = t % target_len;
    auto window = [&](Eigen::Index w, Eigen::Index rows) {
        MetricSample s = sample;
        s.id = sample.id + "_w" + std::to_string(w);
        s.values = sample.values.middleRows(w * target_len, rows);
        const double offset = static_cast<double>(w * target_len) * sample.frequency_seconds;
        if (auto start = shift_timestamp(sample.period_start, offset)) {
            s.period_start = *start;
            s.period_end = *shift_timestamp(sample.period_start, offset + (rows - 1) * sample.frequency_seconds);
        }
        return s;
    };
    for (Eigen::Index w = 0; w < full; ++w) out.push_back(window(w, target_len));
    if (remainder > 0 && 2 * remainder >= target_len) {
        out.push_back(extrapolate(window(full, remainder), target_len, forecaster));
    }
    return out;
}

MetricSample normalize_minmax(const MetricSample& sample) {
    MetricSample out = sample;
    out.raw_min = sample.values.colwise().minCoeff().transpose();
    out.raw_max = sample.values.colwise().maxCoeff().transpose();
    for (Eigen::Index f = 0; f < sample.features(); ++f) {
        const double range = out.raw_max(f) - out.raw_min(f);
        if (range > 0) {
            out.values.col(f) = (sample.values.col(f).array() - out.raw_min(f)) / range;
        } else {
            out.values.col(f).setZero();
        }
    }
    return out;
}

MatrixXd denormalize(const MetricSample& sample) {
    if (!sample.normalized()) throw ArgumentError("sample '" + sample.id + "' carries no min/max metadata");
    MatrixXd out(sample.values.rows(), sample.values.cols());
    for (Eigen::Index f = 0; f < sample.features(); ++f) {
        out.col(f) = sample.values.col(f).array() * (sample.raw_max(f) - sample.raw_min(f)) + sample.raw_min(f);
    }
    return out;
}

std::vector<Patch> segment_into_patches(const MetricSample& sample, int patch_len) {
    if (patch_len < 1) throw ArgumentError("patch_len must be >= 1");
    if (patch_len > sample.length()) {
        throw ArgumentError("patch_len " + std::to_string(patch_len) + " exceeds sample length " +
                            std::to_string(sample.length()));
    }
    const auto n = sample.length() / patch_len;
    std::vector<Patch> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        out.push_back(Patch{sample.id, static_cast<int>(i), sample.values.middleRows(i * patch_len, patch_len)});
    }
    return out;
}

std::optional<std::string> shift_timestamp(const std::string& iso, double seconds) {
    std::time_t t;
    double frac;
    bool zulu;
    if (!parse_iso(iso, t, frac, zulu)) return std::nullopt;
    double total = frac + seconds;
    const double whole = std::floor(total);
    t += static_cast<std::time_t>(whole);
    frac = total - whole;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    std::string out = buf;
    if (frac > 1e-9) {
        char fb[16];
        std::snprintf(fb, sizeof fb, "%.3f", frac);
        out += (fb + 1);
    }
    if (zulu) out += 'Z';
    return out;
}

}  // namespace timerag
