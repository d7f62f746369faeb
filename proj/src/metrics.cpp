#include "encofa/metrics.hpp"

#include <stdexcept>

namespace encofa {

NoiseTypeMetrics noise_type_metrics(std::span<const NoiseType> assigned, std::span<const NoiseType> truth) {
    if (assigned.size() != truth.size()) throw std::invalid_argument("noise_type_metrics: size mismatch");
    NoiseTypeMetrics m;
    if (assigned.empty()) return m;
    std::size_t match = 0, tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < assigned.size(); ++i) {
        if (assigned[i] == truth[i]) ++match;
        const bool pred_on = assigned[i] == NoiseType::open;
        const bool true_on = truth[i] == NoiseType::open;
        tp += pred_on && true_on;
        fp += pred_on && !true_on;
        fn += !pred_on && true_on;
    }
    m.acc_type = static_cast<double>(match) / static_cast<double>(assigned.size());
    m.pre_on = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    m.rec_on = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.f1_on = m.pre_on + m.rec_on > 0.0 ? 2.0 * m.pre_on * m.rec_on / (m.pre_on + m.rec_on) : 0.0;
    return m;
}

double classification_accuracy(std::span<const int> predicted, std::span<const int> labels) {
    if (predicted.size() != labels.size()) throw std::invalid_argument("classification_accuracy: size mismatch");
    if (predicted.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

std::vector<int> predict_labels(const Backbone& model, std::span<const Sample> split) {
    std::vector<int> out;
    out.reserve(split.size());
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < split.size(); start += kChunk) {
        const auto chunk = split.subspan(start, std::min(kChunk, split.size() - start));
        const Matrix logits = model.logits(model.encode(gather_inputs(chunk)));
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            Eigen::Index best;
            logits.col(c).maxCoeff(&best);
            out.push_back(static_cast<int>(best));
        }
    }
    return out;
}

double classification_accuracy(const Backbone& model, std::span<const Sample> split, bool use_observed) {
    const auto predicted = predict_labels(model, split);
    std::vector<int> labels;
    labels.reserve(split.size());
    for (const auto& s : split) labels.push_back(use_observed ? s.observed_label : s.true_label);
    return classification_accuracy(predicted, labels);
}

}  // namespace encofa
