#include "encofa/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace encofa {

namespace {

void require(bool ok, const char* key, const char* what) {
    if (!ok) throw ConfigError(key, what);
}

}  // namespace

void HyperParams::validate() const {
    require(gamma_cl >= 0.0 && gamma_cl <= 1.0, "encofa.gamma_cl", "must be in [0, 1]");
    require(gamma_ood > 0.0 && gamma_ood <= 1.0, "encofa.gamma_ood", "must be in (0, 1]");
    require(gamma_gen >= 0.0 && gamma_gen <= 1.0, "encofa.gamma_gen", "must be in [0, 1]");
    require(gamma_p >= 0.0 && gamma_p <= 1.0, "encofa.gamma_p", "must be in [0, 1]");
    require(lambda >= 0.0 && std::isfinite(lambda), "encofa.lambda", "must be finite and >= 0");
    require(tau > 0.0 && std::isfinite(tau), "encofa.tau", "must be > 0");
    require(knn_k >= 1, "encofa.knn_k", "must be >= 1");
    require(warmup_epochs >= 0, "encofa.warmup_epochs", "must be >= 0");
}

std::vector<double> pseudo_label(std::span<const double> p1, std::span<const double> p2) {
    if (p1.size() != p2.size() || p1.empty()) throw std::invalid_argument("pseudo_label: view sizes differ");
    std::vector<double> out(p1.size());
    double total = 0.0;
    for (std::size_t c = 0; c < p1.size(); ++c) {
        const double m = 0.5 * (p1[c] + p2[c]);
        out[c] = m * m;
        total += out[c];
    }
    if (total <= 0.0) {
        std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(out.size()));
        return out;
    }
    for (double& v : out) v /= total;
    return out;
}

std::vector<double> pseudo_weights(std::span<const double> losses, const GmmFitOptions& gmm) {
    std::vector<double> out(losses.size(), 0.5);
    if (losses.size() < 2) return out;
    const GmmFit fit = fit_gmm_em(losses, gmm);
    for (std::size_t i = 0; i < losses.size(); ++i) out[i] = posterior_clean(fit.model, losses[i]);
    return out;
}

int dynamic_label(int num_classes, std::int64_t epoch, std::int64_t sample_id, std::uint64_t seed) {
    if (num_classes < 1) throw std::invalid_argument("dynamic_label: num_classes must be >= 1");
    const double u = hash_uniform(derive_seed(seed, Stream::dynamic_labels,
                                              {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(sample_id)}));
    return std::min(num_classes - 1, static_cast<int>(u * num_classes));
}

double cross_entropy(const Target& target, std::span<const double> probs, bool* clamped) {
    auto term = [&](double p) {
        if (p < kProbabilityFloor) {
            if (clamped) *clamped = true;
            p = kProbabilityFloor;
        }
        return -std::log(p);
    };
    if (const int* label = std::get_if<int>(&target)) return term(probs[static_cast<std::size_t>(*label)]);
    const auto& soft = std::get<std::vector<double>>(target);
    double loss = 0.0;
    for (std::size_t c = 0; c < soft.size(); ++c)
        if (soft[c] != 0.0) loss += soft[c] * term(probs[c]);
    return loss;
}

ClassificationLoss classification_loss(std::span<const SupervisionRecord> records, const Matrix& probs) {
    if (static_cast<std::size_t>(probs.cols()) != records.size())
        throw std::invalid_argument("classification_loss: one probability column per record");
    std::array<int, 3> counts{0, 0, 0};
    for (const auto& r : records) ++counts[static_cast<int>(r.kind)];

    ClassificationLoss out;
    out.d_logits = Matrix::Zero(probs.rows(), probs.cols());
    std::array<double, 3> sums{0, 0, 0};
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        const int b = static_cast<int>(r.kind);
        const auto col = static_cast<Eigen::Index>(i);
        const std::span<const double> p(probs.col(col).data(), static_cast<std::size_t>(probs.rows()));
        const double w = r.kind == NoiseType::closed ? r.weight : 1.0;
        sums[b] += w * cross_entropy(r.target, p, &out.clamped);

        // Softmax + CE with a target summing to 1: d/dlogits = p - t.
        const double scale = w / counts[b];
        out.d_logits.col(col) = scale * probs.col(col);
        if (const int* label = std::get_if<int>(&r.target)) {
            out.d_logits(*label, col) -= scale;
        } else {
            const auto& soft = std::get<std::vector<double>>(r.target);
            for (std::size_t c = 0; c < soft.size(); ++c) out.d_logits(static_cast<Eigen::Index>(c), col) -= scale * soft[c];
        }
    }
    out.clean = counts[0] ? sums[0] / counts[0] : 0.0;
    out.closed = counts[1] ? sums[1] / counts[1] : 0.0;
    out.open = counts[2] ? sums[2] / counts[2] : 0.0;
    out.value = out.clean + out.closed + out.open;
    return out;
}

EnscLoss ensc_loss(const Matrix& z, std::span<const int> labels, std::span<const double> weights, double tau) {
    const auto n = static_cast<std::size_t>(z.cols());
    if (labels.size() != n || weights.size() != n) throw std::invalid_argument("ensc_loss: size mismatch");
    if (!(tau > 0.0)) throw std::invalid_argument("ensc_loss: tau must be > 0");

    EnscLoss out;
    out.d_z = Matrix::Zero(z.rows(), z.cols());
    if (n < 2) return out;

    const Matrix s = (z.transpose() * z) / tau;
    // coeff(i, a) = d loss_i / d s(i, a), before averaging over anchors.
    Matrix coeff = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    double total = 0.0;
    std::vector<double> logit(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> positives;
        std::size_t same_class = 0;
        for (std::size_t p = 0; p < n; ++p) {
            if (p == i || labels[p] != labels[i]) continue;
            ++same_class;
            if (weights[p] > 0.0) positives.push_back(p);
        }
        if (same_class == 0) continue;
        if (weights[i] <= 0.0 || positives.size() < same_class) out.skipped_zero_weight = true;
        if (weights[i] <= 0.0 || positives.empty()) continue;

        // The anchor weight cancels; the denominator is a weighted softmax over a != i.
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < n; ++a) {
            if (a == i || weights[a] <= 0.0) {
                logit[a] = -std::numeric_limits<double>::infinity();
                continue;
            }
            logit[a] = std::log(weights[a]) + s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a));
            peak = std::max(peak, logit[a]);
        }
        double denom = 0.0;
        for (std::size_t a = 0; a < n; ++a)
            if (std::isfinite(logit[a])) denom += std::exp(logit[a] - peak);
        const double log_denom = peak + std::log(denom);

        const double np = static_cast<double>(positives.size());
        double loss_i = 0.0;
        for (auto p : positives) loss_i -= (logit[p] - log_denom) / np;
        total += loss_i;
        ++out.contributing_anchors;

        const auto row = static_cast<Eigen::Index>(i);
        for (std::size_t a = 0; a < n; ++a)
            if (std::isfinite(logit[a])) coeff(row, static_cast<Eigen::Index>(a)) = std::exp(logit[a] - log_denom);
        for (auto p : positives) coeff(row, static_cast<Eigen::Index>(p)) -= 1.0 / np;
    }
    if (out.contributing_anchors == 0) return out;
    const double m = out.contributing_anchors;
    out.value = total / m;
    // s(i, a) = z_i . z_a / tau touches both columns.
    out.d_z = z * (coeff + coeff.transpose()) / (tau * m);
    return out;
}

std::vector<SupervisionRecord> refine_labels(const Partition& partition, const RefineInputs& in, int num_classes) {
    const std::size_t n = partition.size();
    if (in.observed.size() < n) throw std::invalid_argument("refine_labels: observed labels missing");
    std::vector<SupervisionRecord> out(in.observed.size());
    std::vector<bool> seen(out.size(), false);
    auto claim = [&](std::size_t i) {
        if (i >= out.size() || seen[i]) throw std::invalid_argument("refine_labels: partition is not disjoint");
        seen[i] = true;
    };
    for (auto i : partition.clean) {
        claim(i);
        out[i] = {in.observed[i], in.observed[i], 1.0, NoiseType::clean};
    }
    for (auto i : partition.closed_noisy) {
        claim(i);
        const auto& soft = in.pseudo[i];
        const int label = static_cast<int>(std::max_element(soft.begin(), soft.end()) - soft.begin());
        out[i] = {label, soft, in.pseudo_weight[i], NoiseType::closed};
    }
    for (auto i : partition.open_noisy) {
        claim(i);
        out[i] = {num_classes, in.dynamic[i], 1.0, NoiseType::open};
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
        throw std::invalid_argument("refine_labels: partition does not cover every sample");
    return out;
}

}  // namespace encofa
