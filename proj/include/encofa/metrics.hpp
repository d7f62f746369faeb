#pragma once

#include <span>
#include <vector>

#include "encofa/backbone.hpp"
#include "encofa/common.hpp"
#include "encofa/dataset.hpp"

namespace encofa {

struct NoiseTypeMetrics {
    double acc_type = 0.0;
    double f1_on = 0.0;
    double pre_on = 0.0;
    double rec_on = 0.0;
};

// Open-set is the positive class. Precision, recall and F1 are 0 when undefined.
NoiseTypeMetrics noise_type_metrics(std::span<const NoiseType> assigned, std::span<const NoiseType> truth);

double classification_accuracy(std::span<const int> predicted, std::span<const int> labels);
// Against true labels, or against observed labels when use_observed is set.
double classification_accuracy(const Backbone& model, std::span<const Sample> split, bool use_observed = false);

std::vector<int> predict_labels(const Backbone& model, std::span<const Sample> split);

}  // namespace encofa
