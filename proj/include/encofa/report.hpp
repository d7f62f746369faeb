#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "encofa/common.hpp"
#include "encofa/trainer.hpp"

namespace encofa {

struct MetricsReport {
    double acc_test = 0.0;
    double acc_test_best_val = 0.0;
    double acc_val = 0.0;
    double best_acc_val = 0.0;
    int best_val_epoch = -1;
    double acc_type_train = 0.0;
    double f1_on_train = 0.0;
    double pre_on_train = 0.0;
    std::vector<EpochMetrics> history;
};

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& file);

// Rebuilds every reported number from the CSV files of a finished run.
MetricsReport recompute_report(const std::filesystem::path& run_dir);

std::string report_to_json(const MetricsReport& report);

enum class ProjectionKind { pca, random };
ProjectionKind parse_projection(std::string_view text);

// 2 x d matrix mapping features to the plane.
Matrix feature_projection(const Matrix& features, ProjectionKind kind, std::uint64_t seed);

void write_curves_svg(const std::filesystem::path& file, const std::vector<EpochMetrics>& history);
void write_scatter_svg(const std::filesystem::path& file, const Matrix& points, const std::vector<int>& labels);

struct ReportOptions {
    std::filesystem::path out_dir;  // defaults to <run_dir>/report
    ProjectionKind projection = ProjectionKind::pca;
    std::uint64_t seed = 0;
};

// Writes summary.json, metrics_collated.csv, curves.svg and features.svg.
MetricsReport write_report(const std::vector<std::filesystem::path>& run_dirs, const ReportOptions& options);

}  // namespace encofa
