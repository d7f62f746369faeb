#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "encofa/common.hpp"

namespace encofa {

// Two-component 1-D Gaussian mixture. Component 0 has the lower mean.
struct Gmm2 {
    std::array<double, 2> means{0.0, 0.0};
    std::array<double, 2> variances{1.0, 1.0};
    std::array<double, 2> mix_weights{0.5, 0.5};
    // Set when the input has no spread; posteriors are then 0.5 everywhere.
    bool degenerate = false;
};

struct GmmFitOptions {
    int max_iter = 100;
    double tol = 1e-8;
    int restarts = 10;
    double var_floor = 1e-6;
    std::uint64_t seed = 0;
};

struct GmmFit {
    Gmm2 model;
    double log_likelihood = 0.0;
    int iterations = 0;
    // Log-likelihood after every EM iteration of the kept restart.
    std::vector<double> trace;
    // False if any restart ever decreased its log-likelihood.
    bool monotone = true;
};

// EM with k-means++-seeded restarts on the sorted losses, so the fit does not
// depend on input order.
GmmFit fit_gmm_em(std::span<const double> losses, const GmmFitOptions& options = {});

double log_likelihood(const Gmm2& gmm, std::span<const double> values);

// Posterior of the lower-mean component. Outside [mean0, mean1] the value is
// clamped to its level at the nearer mean, so a larger loss never reads as
// cleaner than a smaller one in the tails.
double posterior_clean(const Gmm2& gmm, double loss);

struct CleanSplit {
    std::vector<std::size_t> clean;
    std::vector<std::size_t> noisy;
    std::vector<double> posteriors;
};

CleanSplit partition_clean(std::span<const double> losses, const Gmm2& gmm, double gamma_cl);

// Scores against a fixed reference set of clean features (one per column).
// Both sides are L2-normalized; the score is minus the distance to the k-th
// nearest reference. k larger than the reference set is clamped.
class KnnOodScorer {
public:
    KnnOodScorer(const Matrix& clean_features, int k);

    double score(const Vector& feature) const;
    // Leave-one-out score for a member of the reference set.
    double score_excluding(const Vector& feature, std::size_t reference_index) const;

    int k() const noexcept { return k_; }
    bool clamped() const noexcept { return clamped_; }
    std::size_t size() const noexcept { return static_cast<std::size_t>(reference_.cols()); }

private:
    double kth_distance(const Vector& normalized, std::ptrdiff_t skip) const;

    Matrix reference_;
    int k_;
    bool clamped_ = false;
};

double knn_ood_score(const Vector& feature, const Matrix& clean_features, int k);

// Raw threshold such that a fraction gamma_ood of the clean scores lie
// strictly above it.
double select_ood_threshold(std::span<const double> clean_scores, double gamma_ood);

struct OpenSplit {
    std::vector<std::size_t> open_noisy;
    std::vector<std::size_t> closed_noisy;
};

// score <= threshold -> open-set.
OpenSplit partition_open_set(std::span<const std::size_t> noisy_indices, std::span<const double> scores,
                             double threshold);

struct Partition {
    std::vector<std::size_t> clean;
    std::vector<std::size_t> closed_noisy;
    std::vector<std::size_t> open_noisy;

    std::size_t size() const noexcept { return clean.size() + closed_noisy.size() + open_noisy.size(); }
    std::vector<NoiseType> assignments(std::size_t n) const;
    static Partition all_clean(std::size_t n);
};

struct TriageOptions {
    double gamma_cl = 0.98;
    double gamma_ood = 0.96;
    int knn_k = 200;
    // k = min(knn_k, ceil(|clean| / knn_fraction_divisor)); 0 disables the cap.
    int knn_divisor = 10;
    bool detect_open_set = true;
    GmmFitOptions gmm;
};

struct TriageResult {
    Partition partition;
    std::vector<double> posteriors;
    // NaN where no score was computed.
    std::vector<double> ood_scores;
    double threshold = 0.0;
    int knn_k = 0;
    Gmm2 gmm;
    bool fallback_all_clean = false;
    bool knn_clamped = false;
};

// Clean/noisy split on losses, then open/closed split of the noisy group by
// KNN distance to the clean features (columns of `features`).
TriageResult triage(std::span<const double> losses, const Matrix& features, const TriageOptions& options);

}  // namespace encofa
