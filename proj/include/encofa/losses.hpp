#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "encofa/common.hpp"
#include "encofa/noise_identifier.hpp"

namespace encofa {

struct HyperParams {
    double gamma_cl = 0.98;
    double gamma_ood = 0.96;
    double gamma_gen = 0.1;
    double gamma_p = 0.7;
    double lambda = 1.0;
    double tau = 0.2;
    int knn_k = 200;
    int warmup_epochs = 1;

    // Throws ConfigError naming the offending "encofa.*" key.
    void validate() const;
};

// Hard class index or soft distribution over the K classes.
using Target = std::variant<int, std::vector<double>>;

// Labels are 0-based; detected open-set samples get refined_label == K.
struct SupervisionRecord {
    int refined_label = 0;
    Target target = 0;
    double weight = 1.0;
    NoiseType kind = NoiseType::clean;
};

// Sharpened average of two views: normalize(((p1 + p2) / 2)^2).
std::vector<double> pseudo_label(std::span<const double> p_view1, std::span<const double> p_view2);

// Clean-component posterior of a 2-GMM fitted to the pseudo-label losses.
// Fewer than two losses, or no spread, gives 0.5 everywhere.
std::vector<double> pseudo_weights(std::span<const double> pseudo_losses, const GmmFitOptions& gmm = {});

// Uniform in [0, K); a pure function of (seed, epoch, sample_id).
int dynamic_label(int num_classes, std::int64_t epoch, std::int64_t sample_id, std::uint64_t seed);

inline constexpr double kProbabilityFloor = 1e-12;

// -sum_c t_c log max(p_c, floor).
double cross_entropy(const Target& target, std::span<const double> probs, bool* clamped = nullptr);

struct ClassificationLoss {
    double value = 0.0;
    double clean = 0.0;
    double closed = 0.0;
    double open = 0.0;
    // Gradient of `value` with respect to the logits that produced `probs`.
    Matrix d_logits;
    bool clamped = false;
};

// Each branch is averaged over its own members; branches are summed.
// probs is K x B with one column per record.
ClassificationLoss classification_loss(std::span<const SupervisionRecord> records, const Matrix& probs);

struct EnscLoss {
    double value = 0.0;
    Matrix d_z;
    int contributing_anchors = 0;
    // Set when a zero weight removed a positive pair or a whole anchor.
    bool skipped_zero_weight = false;
};

// Weighted supervised contrastive loss over the columns of z. Anchors whose
// positive set is empty contribute nothing; the result is the mean over the
// remaining anchors.
EnscLoss ensc_loss(const Matrix& z, std::span<const int> labels, std::span<const double> weights, double tau);

// Per-sample inputs indexed by training position. pseudo and pseudo_weight are
// read for closed-set members, dynamic for open-set members.
struct RefineInputs {
    std::span<const int> observed;
    std::span<const std::vector<double>> pseudo;
    std::span<const double> pseudo_weight;
    std::span<const int> dynamic;
};

std::vector<SupervisionRecord> refine_labels(const Partition& partition, const RefineInputs& inputs,
                                             int num_classes);

inline double total_loss(double loss_cls, double loss_ensc, double lambda) { return loss_cls + lambda * loss_ensc; }

}  // namespace encofa
