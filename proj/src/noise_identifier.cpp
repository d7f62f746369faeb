#include "encofa/noise_identifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace encofa {

namespace {

double log_normal(double x, double mean, double var) {
    const double d = x - mean;
    return -0.5 * std::log(2.0 * std::numbers::pi * var) - d * d / (2.0 * var);
}

double log_add(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double log_weight(double w) { return w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity(); }

// Uncapped Bayes posterior of component 0.
double raw_posterior(const Gmm2& g, double x) {
    const double a0 = log_weight(g.mix_weights[0]) + log_normal(x, g.means[0], g.variances[0]);
    const double a1 = log_weight(g.mix_weights[1]) + log_normal(x, g.means[1], g.variances[1]);
    const double norm = log_add(a0, a1);
    if (!std::isfinite(norm)) return 0.5;
    return std::exp(a0 - norm);
}

// Hard 2-means on sorted data, seeded with two centers.
Gmm2 init_from_centers(std::span<const double> x, double c0, double c1, double var_floor) {
    if (c0 > c1) std::swap(c0, c1);
    for (int iter = 0; iter < 10; ++iter) {
        double s0 = 0, s1 = 0;
        std::size_t n0 = 0, n1 = 0;
        for (double v : x) {
            if (std::abs(v - c0) <= std::abs(v - c1)) {
                s0 += v;
                ++n0;
            } else {
                s1 += v;
                ++n1;
            }
        }
        if (n0 == 0 || n1 == 0) break;
        c0 = s0 / n0;
        c1 = s1 / n1;
    }
    Gmm2 g;
    double v0 = 0, v1 = 0;
    std::size_t n0 = 0, n1 = 0;
    for (double v : x) {
        if (std::abs(v - c0) <= std::abs(v - c1)) {
            v0 += (v - c0) * (v - c0);
            ++n0;
        } else {
            v1 += (v - c1) * (v - c1);
            ++n1;
        }
    }
    const double n = static_cast<double>(x.size());
    g.means = {c0, c1};
    g.variances = {std::max(n0 ? v0 / n0 : var_floor, var_floor), std::max(n1 ? v1 / n1 : var_floor, var_floor)};
    // Keep both components alive even if one seed captured everything.
    g.mix_weights = {std::clamp(n0 / n, 1e-3, 1.0 - 1e-3), 0.0};
    g.mix_weights[1] = 1.0 - g.mix_weights[0];
    return g;
}

struct EmRun {
    Gmm2 model;
    double log_likelihood;
    int iterations;
    std::vector<double> trace;
    bool monotone;
};

EmRun run_em(std::span<const double> x, Gmm2 g, const GmmFitOptions& opt) {
    const std::size_t n = x.size();
    std::vector<double> resp(n);
    double ll = log_likelihood(g, x);
    EmRun run{g, ll, 0, {ll}, true};
    for (int iter = 1; iter <= opt.max_iter; ++iter) {
        for (std::size_t i = 0; i < n; ++i) resp[i] = raw_posterior(g, x[i]);
        std::array<double, 2> mass{0, 0}, sum{0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            mass[0] += resp[i];
            mass[1] += 1.0 - resp[i];
            sum[0] += resp[i] * x[i];
            sum[1] += (1.0 - resp[i]) * x[i];
        }
        for (int k = 0; k < 2; ++k) {
            g.mix_weights[k] = mass[k] / static_cast<double>(n);
            if (mass[k] <= 0.0) continue;
            g.means[k] = sum[k] / mass[k];
        }
        std::array<double, 2> sq{0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            sq[0] += resp[i] * (x[i] - g.means[0]) * (x[i] - g.means[0]);
            sq[1] += (1.0 - resp[i]) * (x[i] - g.means[1]) * (x[i] - g.means[1]);
        }
        for (int k = 0; k < 2; ++k) {
            if (mass[k] > 0.0) g.variances[k] = std::max(sq[k] / mass[k], opt.var_floor);
        }
        const double next = log_likelihood(g, x);
        if (next < ll - 1e-9 * std::max(1.0, std::abs(ll))) run.monotone = false;
        run.trace.push_back(next);
        run.iterations = iter;
        const bool converged = (next - ll) / static_cast<double>(n) < opt.tol;
        ll = next;
        if (converged) break;
    }
    run.model = g;
    run.log_likelihood = ll;
    return run;
}

}  // namespace

double log_likelihood(const Gmm2& g, std::span<const double> values) {
    double total = 0.0;
    for (double x : values) {
        total += log_add(log_weight(g.mix_weights[0]) + log_normal(x, g.means[0], g.variances[0]),
                         log_weight(g.mix_weights[1]) + log_normal(x, g.means[1], g.variances[1]));
    }
    return total;
}

GmmFit fit_gmm_em(std::span<const double> losses, const GmmFitOptions& opt) {
    if (losses.size() < 2) throw std::invalid_argument("fit_gmm_em needs at least 2 values");
    std::vector<double> x(losses.begin(), losses.end());
    std::sort(x.begin(), x.end());
    const double lo = x.front(), hi = x.back();

    GmmFit fit;
    if (!(hi - lo > 1e-12 * std::max(1.0, std::abs(hi)))) {
        fit.model.means = {lo, lo};
        fit.model.variances = {opt.var_floor, opt.var_floor};
        fit.model.mix_weights = {0.5, 0.5};
        fit.model.degenerate = true;
        fit.log_likelihood = log_likelihood(fit.model, x);
        fit.trace = {fit.log_likelihood};
        return fit;
    }

    bool have_best = false;
    for (int r = 0; r < std::max(1, opt.restarts); ++r) {
        double c0 = lo, c1 = hi;
        if (r > 0) {
            // k-means++ seeding: first uniformly, second proportional to D^2.
            Rng rng(derive_seed(opt.seed, Stream::gmm, {static_cast<std::uint64_t>(r)}));
            c0 = x[rng.index(x.size())];
            double total = 0.0;
            for (double v : x) total += (v - c0) * (v - c0);
            double u = rng.uniform() * total;
            c1 = x.back();
            for (double v : x) {
                u -= (v - c0) * (v - c0);
                if (u <= 0.0) {
                    c1 = v;
                    break;
                }
            }
        }
        EmRun run = run_em(x, init_from_centers(x, c0, c1, opt.var_floor), opt);
        fit.monotone = fit.monotone && run.monotone;
        if (!have_best || run.log_likelihood > fit.log_likelihood) {
            have_best = true;
            fit.model = run.model;
            fit.log_likelihood = run.log_likelihood;
            fit.iterations = run.iterations;
            fit.trace = std::move(run.trace);
        }
    }
    auto& m = fit.model;
    if (m.means[0] > m.means[1]) {
        std::swap(m.means[0], m.means[1]);
        std::swap(m.variances[0], m.variances[1]);
        std::swap(m.mix_weights[0], m.mix_weights[1]);
    }
    return fit;
}

double posterior_clean(const Gmm2& gmm, double loss) {
    if (gmm.degenerate) return 0.5;
    if (std::isnan(loss)) return 0.0;
    double p = raw_posterior(gmm, loss);
    if (loss > gmm.means[1]) p = std::min(p, raw_posterior(gmm, gmm.means[1]));
    if (loss < gmm.means[0]) p = std::max(p, raw_posterior(gmm, gmm.means[0]));
    return p;
}

CleanSplit partition_clean(std::span<const double> losses, const Gmm2& gmm, double gamma_cl) {
    CleanSplit out;
    out.posteriors.reserve(losses.size());
    for (std::size_t i = 0; i < losses.size(); ++i) {
        const double p = posterior_clean(gmm, losses[i]);
        out.posteriors.push_back(p);
        (p > gamma_cl ? out.clean : out.noisy).push_back(i);
    }
    return out;
}

KnnOodScorer::KnnOodScorer(const Matrix& clean_features, int k)
    : reference_(clean_features.rows(), clean_features.cols()), k_(k) {
    if (k < 1) throw std::invalid_argument("knn k must be >= 1");
    if (clean_features.cols() == 0) throw std::invalid_argument("knn reference set is empty");
    for (Eigen::Index c = 0; c < clean_features.cols(); ++c) reference_.col(c) = l2_normalized(clean_features.col(c));
    if (k_ > reference_.cols()) {
        k_ = static_cast<int>(reference_.cols());
        clamped_ = true;
    }
}

double KnnOodScorer::kth_distance(const Vector& q, std::ptrdiff_t skip) const {
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(reference_.cols()));
    for (Eigen::Index c = 0; c < reference_.cols(); ++c) {
        if (c == skip) continue;
        d.push_back((reference_.col(c) - q).norm());
    }
    if (d.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(k_), d.size());
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    return d[k - 1];
}

double KnnOodScorer::score(const Vector& feature) const { return -kth_distance(l2_normalized(feature), -1); }

double KnnOodScorer::score_excluding(const Vector& feature, std::size_t reference_index) const {
    return -kth_distance(l2_normalized(feature), static_cast<std::ptrdiff_t>(reference_index));
}

double knn_ood_score(const Vector& feature, const Matrix& clean_features, int k) {
    return KnnOodScorer(clean_features, k).score(feature);
}

double select_ood_threshold(std::span<const double> clean_scores, double gamma_ood) {
    if (clean_scores.empty()) throw std::invalid_argument("select_ood_threshold needs clean scores");
    if (!(gamma_ood > 0.0 && gamma_ood <= 1.0)) throw std::invalid_argument("gamma_ood must be in (0, 1]");
    std::vector<double> s(clean_scores.begin(), clean_scores.end());
    std::sort(s.begin(), s.end());
    const auto n = s.size();
    const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(gamma_ood * static_cast<double>(n) - 1e-9)));
    const auto below = n - keep;
    return s[std::max<std::size_t>(below, 1) - 1];
}

OpenSplit partition_open_set(std::span<const std::size_t> noisy_indices, std::span<const double> scores,
                             double threshold) {
    OpenSplit out;
    for (auto i : noisy_indices) (scores[i] <= threshold ? out.open_noisy : out.closed_noisy).push_back(i);
    return out;
}

std::vector<NoiseType> Partition::assignments(std::size_t n) const {
    std::vector<NoiseType> out(n, NoiseType::clean);
    for (auto i : closed_noisy) out.at(i) = NoiseType::closed;
    for (auto i : open_noisy) out.at(i) = NoiseType::open;
    return out;
}

Partition Partition::all_clean(std::size_t n) {
    Partition p;
    p.clean.resize(n);
    for (std::size_t i = 0; i < n; ++i) p.clean[i] = i;
    return p;
}

TriageResult triage(std::span<const double> losses, const Matrix& features, const TriageOptions& opt) {
    const auto n = losses.size();
    if (static_cast<std::size_t>(features.cols()) != n)
        throw std::invalid_argument("triage: losses and features disagree on sample count");
    TriageResult out;
    out.ood_scores.assign(n, std::numeric_limits<double>::quiet_NaN());
    out.threshold = std::numeric_limits<double>::quiet_NaN();

    const GmmFit fit = fit_gmm_em(losses, opt.gmm);
    out.gmm = fit.model;
    CleanSplit split = partition_clean(losses, fit.model, opt.gamma_cl);
    out.posteriors = std::move(split.posteriors);
    if (split.clean.empty()) {
        out.partition = Partition::all_clean(n);
        out.fallback_all_clean = true;
        return out;
    }
    out.partition.clean = std::move(split.clean);
    if (!opt.detect_open_set || split.noisy.empty()) {
        out.partition.closed_noisy = std::move(split.noisy);
        return out;
    }

    const auto& clean = out.partition.clean;
    Matrix reference(features.rows(), static_cast<Eigen::Index>(clean.size()));
    for (std::size_t c = 0; c < clean.size(); ++c)
        reference.col(static_cast<Eigen::Index>(c)) = features.col(static_cast<Eigen::Index>(clean[c]));
    int k = opt.knn_k;
    if (opt.knn_divisor > 0) {
        const auto cap = static_cast<int>((clean.size() + opt.knn_divisor - 1) / opt.knn_divisor);
        k = std::min(k, std::max(1, cap));
    }
    const KnnOodScorer scorer(reference, k);
    out.knn_k = scorer.k();
    out.knn_clamped = scorer.clamped();

    std::vector<double> clean_scores;
    if (clean.size() >= 2) {
        for (std::size_t c = 0; c < clean.size(); ++c) {
            const double s = scorer.score_excluding(features.col(static_cast<Eigen::Index>(clean[c])), c);
            out.ood_scores[clean[c]] = s;
            clean_scores.push_back(s);
        }
    }
    for (auto i : split.noisy) out.ood_scores[i] = scorer.score(features.col(static_cast<Eigen::Index>(i)));

    if (clean_scores.empty()) {
        out.partition.closed_noisy = std::move(split.noisy);
        return out;
    }
    out.threshold = select_ood_threshold(clean_scores, opt.gamma_ood);
    auto open = partition_open_set(split.noisy, out.ood_scores, out.threshold);
    out.partition.open_noisy = std::move(open.open_noisy);
    out.partition.closed_noisy = std::move(open.closed_noisy);
    return out;
}

}  // namespace encofa
