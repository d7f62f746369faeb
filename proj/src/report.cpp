#include "encofa/report.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "encofa/metrics.hpp"

namespace encofa {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double to_double(const std::string& s, const std::filesystem::path& file) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError(file.string() + ": bad number '" + s + "'");
    return v;
}

long long to_int(const std::string& s, const std::filesystem::path& file) {
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError(file.string() + ": bad integer '" + s + "'");
    return v;
}

// Reads a CSV with a header; returns rows keyed by header position.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name, const std::filesystem::path& file) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw DataError(file.string() + ": missing column " + name);
        return static_cast<std::size_t>(it - header.begin());
    }
};

Table read_table(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw DataError("cannot read " + file.string());
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw DataError(file.string() + ": empty file");
    t.header = split_csv(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto row = split_csv(line);
        if (row.size() != t.header.size()) throw DataError(file.string() + ": ragged row");
        t.rows.push_back(std::move(row));
    }
    return t;
}

std::string esc(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

}  // namespace

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& file) {
    const Table t = read_table(file);
    if (t.header != split_csv(kMetricsHeader)) throw DataError(file.string() + ": unexpected metrics header");
    std::vector<EpochMetrics> out;
    for (const auto& r : t.rows) {
        EpochMetrics m;
        m.epoch = static_cast<int>(to_int(r[0], file));
        m.lr = to_double(r[1], file);
        m.loss_cls = to_double(r[2], file);
        m.loss_ensc = to_double(r[3], file);
        m.acc_val = to_double(r[4], file);
        m.acc_type_train = to_double(r[5], file);
        m.f1_on_train = to_double(r[6], file);
        m.pre_on_train = to_double(r[7], file);
        m.n_clean = static_cast<std::size_t>(to_int(r[8], file));
        m.n_closed = static_cast<std::size_t>(to_int(r[9], file));
        m.n_open = static_cast<std::size_t>(to_int(r[10], file));
        out.push_back(m);
    }
    return out;
}

MetricsReport recompute_report(const std::filesystem::path& run_dir) {
    MetricsReport rep;
    rep.history = read_metrics_csv(run_dir / "metrics.csv");
    if (rep.history.empty()) throw DataError((run_dir / "metrics.csv").string() + ": no epochs");
    rep.acc_val = rep.history.back().acc_val;
    for (const auto& m : rep.history) {
        if (rep.best_val_epoch < 0 || m.acc_val > rep.best_acc_val) {
            rep.best_val_epoch = m.epoch;
            rep.best_acc_val = m.acc_val;
        }
    }

    const auto pred_file = run_dir / "test_predictions.csv";
    const Table pred = read_table(pred_file);
    std::vector<int> truth, final_pred, best_pred;
    const auto c_true = pred.column("true_label", pred_file);
    const auto c_pred = pred.column("predicted", pred_file);
    const auto c_best = pred.column("predicted_best_val", pred_file);
    for (const auto& r : pred.rows) {
        truth.push_back(static_cast<int>(to_int(r[c_true], pred_file)));
        final_pred.push_back(static_cast<int>(to_int(r[c_pred], pred_file)));
        best_pred.push_back(static_cast<int>(to_int(r[c_best], pred_file)));
    }
    rep.acc_test = classification_accuracy(final_pred, truth);
    rep.acc_test_best_val = classification_accuracy(best_pred, truth);

    // Triage metrics of the last triaged epoch.
    const auto triage_file = run_dir / "triage_audit.csv";
    const Table tri = read_table(triage_file);
    const auto c_epoch = tri.column("epoch", triage_file);
    const auto c_assigned = tri.column("assigned", triage_file);
    const auto c_type = tri.column("true_type", triage_file);
    long long last = -1;
    for (const auto& r : tri.rows) last = std::max(last, to_int(r[c_epoch], triage_file));
    std::vector<NoiseType> assigned, types;
    for (const auto& r : tri.rows) {
        if (to_int(r[c_epoch], triage_file) != last) continue;
        assigned.push_back(parse_noise_type(r[c_assigned]));
        types.push_back(parse_noise_type(r[c_type]));
    }
    if (!assigned.empty()) {
        const auto nt = noise_type_metrics(assigned, types);
        rep.acc_type_train = nt.acc_type;
        rep.f1_on_train = nt.f1_on;
        rep.pre_on_train = nt.pre_on;
    } else {
        rep.acc_type_train = rep.history.back().acc_type_train;
        rep.f1_on_train = rep.history.back().f1_on_train;
        rep.pre_on_train = rep.history.back().pre_on_train;
    }
    return rep;
}

std::string report_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j = {
        {"acc_test", r.acc_test},
        {"acc_test_best_val", r.acc_test_best_val},
        {"acc_val", r.acc_val},
        {"best_acc_val", r.best_acc_val},
        {"best_val_epoch", r.best_val_epoch},
        {"acc_type_train", r.acc_type_train},
        {"f1_on_train", r.f1_on_train},
        {"pre_on_train", r.pre_on_train},
    };
    nlohmann::ordered_json history = nlohmann::ordered_json::array();
    for (const auto& m : r.history) {
        history.push_back({{"epoch", m.epoch},
                           {"lr", m.lr},
                           {"loss_cls", m.loss_cls},
                           {"loss_ensc", m.loss_ensc},
                           {"acc_val", m.acc_val},
                           {"acc_type_train", m.acc_type_train},
                           {"f1_on_train", m.f1_on_train},
                           {"pre_on_train", m.pre_on_train},
                           {"n_clean", m.n_clean},
                           {"n_closed", m.n_closed},
                           {"n_open", m.n_open}});
    }
    j["history"] = std::move(history);
    return j.dump(2);
}

ProjectionKind parse_projection(std::string_view text) {
    if (text == "pca") return ProjectionKind::pca;
    if (text == "random") return ProjectionKind::random;
    throw ConfigError("report.projection", "expected pca or random");
}

Matrix feature_projection(const Matrix& features, ProjectionKind kind, std::uint64_t seed) {
    const auto d = features.rows();
    Matrix proj(2, d);
    if (kind == ProjectionKind::random || features.cols() < 2 || d < 2) {
        Rng rng(derive_seed(seed, Stream::projection));
        for (Eigen::Index r = 0; r < 2; ++r)
            for (Eigen::Index c = 0; c < d; ++c) proj(r, c) = rng.normal() / std::sqrt(static_cast<double>(d));
        return proj;
    }
    const Matrix centered = features.colwise() - features.rowwise().mean();
    const Matrix cov = centered * centered.transpose() / static_cast<double>(features.cols() - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    // Eigenvalues ascend; take the two largest.
    proj.row(0) = eig.eigenvectors().col(d - 1).transpose();
    proj.row(1) = eig.eigenvectors().col(d - 2).transpose();
    return proj;
}

void write_curves_svg(const std::filesystem::path& file, const std::vector<EpochMetrics>& history) {
    constexpr double W = 900, H = 360, pad = 50, panel = (W - 3 * pad) / 2;
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (history.empty()) {
        out << "</svg>\n";
        return;
    }
    const double e0 = history.front().epoch, e1 = std::max<double>(history.back().epoch, e0 + 1);
    struct Series {
        const char* name;
        double EpochMetrics::*field;
        const char* color;
    };
    auto panel_plot = [&](double x0, const char* title, std::vector<Series> series, bool unit_range) {
        double lo = 0.0, hi = unit_range ? 1.0 : 0.0;
        if (!unit_range)
            for (const auto& s : series)
                for (const auto& m : history) hi = std::max(hi, m.*(s.field));
        if (hi <= lo) hi = lo + 1.0;
        const double y0 = pad, h = H - 2 * pad;
        out << "<rect x=\"" << esc(x0) << "\" y=\"" << esc(y0) << "\" width=\"" << esc(panel) << "\" height=\""
            << esc(h) << "\" fill=\"none\" stroke=\"#444\"/>\n";
        out << "<text x=\"" << esc(x0) << "\" y=\"" << esc(y0 - 10) << "\" font-size=\"14\">" << title << "</text>\n";
        out << "<text x=\"" << esc(x0 - 5) << "\" y=\"" << esc(y0 + 5) << "\" font-size=\"10\" text-anchor=\"end\">"
            << esc(hi) << "</text>\n";
        out << "<text x=\"" << esc(x0 - 5) << "\" y=\"" << esc(y0 + h) << "\" font-size=\"10\" text-anchor=\"end\">"
            << esc(lo) << "</text>\n";
        out << "<text x=\"" << esc(x0 + panel / 2) << "\" y=\"" << esc(y0 + h + 30)
            << "\" font-size=\"11\" text-anchor=\"middle\">epoch</text>\n";
        double ly = y0 + 15;
        for (const auto& s : series) {
            out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& m : history) {
                const double px = x0 + (m.epoch - e0) / (e1 - e0) * panel;
                const double py = y0 + h - (m.*(s.field) - lo) / (hi - lo) * h;
                out << esc(px) << ',' << esc(py) << ' ';
            }
            out << "\"/>\n";
            out << "<text x=\"" << esc(x0 + panel - 5) << "\" y=\"" << esc(ly) << "\" font-size=\"11\" fill=\""
                << s.color << "\" text-anchor=\"end\">" << s.name << "</text>\n";
            ly += 14;
        }
    };
    panel_plot(pad, "training losses",
               {{"loss_cls", &EpochMetrics::loss_cls, kPalette[0]}, {"loss_ensc", &EpochMetrics::loss_ensc, kPalette[1]}},
               false);
    panel_plot(2 * pad + panel, "accuracy",
               {{"acc_val", &EpochMetrics::acc_val, kPalette[2]},
                {"acc_type_train", &EpochMetrics::acc_type_train, kPalette[3]},
                {"f1_on_train", &EpochMetrics::f1_on_train, kPalette[4]}},
               true);
    out << "</svg>\n";
}

void write_scatter_svg(const std::filesystem::path& file, const Matrix& points, const std::vector<int>& labels) {
    constexpr double S = 520, pad = 30;
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << S << "\" height=\"" << S << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (points.cols() > 0) {
        const double x0 = points.row(0).minCoeff(), x1 = points.row(0).maxCoeff();
        const double y0 = points.row(1).minCoeff(), y1 = points.row(1).maxCoeff();
        const double sx = x1 > x0 ? (S - 2 * pad) / (x1 - x0) : 1.0;
        const double sy = y1 > y0 ? (S - 2 * pad) / (y1 - y0) : 1.0;
        for (Eigen::Index i = 0; i < points.cols(); ++i) {
            const int label = labels[static_cast<std::size_t>(i)];
            const char* color = kPalette[static_cast<std::size_t>(std::abs(label)) % std::size(kPalette)];
            out << "<circle cx=\"" << esc(pad + (points(0, i) - x0) * sx) << "\" cy=\""
                << esc(S - pad - (points(1, i) - y0) * sy) << "\" r=\"3\" fill=\"" << color
                << "\" fill-opacity=\"0.7\"/>\n";
        }
    }
    out << "</svg>\n";
}

MetricsReport write_report(const std::vector<std::filesystem::path>& run_dirs, const ReportOptions& options) {
    if (run_dirs.empty()) throw ConfigError("run_dir", "at least one run directory is required");
    const auto out_dir = options.out_dir.empty() ? run_dirs.front() / "report" : options.out_dir;
    std::filesystem::create_directories(out_dir);

    MetricsReport first;
    std::ofstream collated(out_dir / "metrics_collated.csv", std::ios::binary);
    collated << "run," << kMetricsHeader << '\n';
    nlohmann::ordered_json runs = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < run_dirs.size(); ++k) {
        const MetricsReport rep = recompute_report(run_dirs[k]);
        for (const auto& m : rep.history) collated << run_dirs[k].generic_string() << ',' << format_metrics_row(m) << '\n';
        auto j = nlohmann::ordered_json::parse(report_to_json(rep));
        j.erase("history");
        j["run_dir"] = run_dirs[k].generic_string();
        runs.push_back(std::move(j));
        if (k == 0) first = rep;
    }

    nlohmann::ordered_json summary = nlohmann::ordered_json::parse(report_to_json(first));
    if (run_dirs.size() > 1) summary["runs"] = std::move(runs);
    std::ofstream(out_dir / "summary.json") << summary.dump(2) << '\n';

    write_curves_svg(out_dir / "curves.svg", first.history);

    const auto feat_file = run_dirs.front() / "test_features.csv";
    const Table t = read_table(feat_file);
    const auto c_label = t.column("true_label", feat_file);
    std::vector<std::size_t> feat_cols;
    for (std::size_t c = 0; c < t.header.size(); ++c)
        if (!t.header[c].empty() && t.header[c][0] == 'f') feat_cols.push_back(c);
    Matrix features(static_cast<Eigen::Index>(feat_cols.size()), static_cast<Eigen::Index>(t.rows.size()));
    std::vector<int> labels;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        labels.push_back(static_cast<int>(to_int(t.rows[i][c_label], feat_file)));
        for (std::size_t c = 0; c < feat_cols.size(); ++c)
            features(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)) =
                to_double(t.rows[i][feat_cols[c]], feat_file);
    }
    if (features.rows() > 0)
        write_scatter_svg(out_dir / "features.svg",
                          feature_projection(features, options.projection, options.seed) * features, labels);
    return first;
}

}  // namespace encofa
