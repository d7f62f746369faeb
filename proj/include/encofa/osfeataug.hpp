#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "encofa/common.hpp"

namespace encofa {

struct ChannelImportance {
    Vector raw;         // mean gradient per channel
    Vector normalized;  // min-max scaled to [0, 1]
    // Raw vector was constant; normalized is all ones.
    bool constant_fallback = false;
};

// gradients: d x N, one pooled channel gradient per column.
ChannelImportance compute_channel_importance(const Matrix& gradients);
// Same, averaged over the listed columns only.
ChannelImportance compute_channel_importance(const Matrix& gradients, std::span<const std::size_t> columns);

struct ChannelMask {
    std::vector<bool> general;

    std::size_t size() const noexcept { return general.size(); }
    std::size_t count() const;
};

// general[c] iff normalized[c] < gamma_gen.
ChannelMask select_general_channels(const Vector& normalized, double gamma_gen);

// With probability gamma_p, copy the general channels of f_j into f_i.
// One uniform draw per call.
Vector augment_feature(const Vector& f_i, const Vector& f_j, const ChannelMask& mask, double gamma_p, Rng& rng,
                       bool* swapped = nullptr);

struct SwapRecord {
    std::size_t member = 0;  // batch column
    std::size_t donor = 0;   // batch column, meaningful when fired
    bool fired = false;
};

struct BatchAugmentation {
    Matrix features;
    std::vector<SwapRecord> swaps;
    // Some member had no possible donor (batch of one).
    bool no_donor = false;
};

// Augments the listed columns. Each member draws a donor uniformly from the
// other columns, then a coin with probability gamma_p. Donors use the
// un-augmented features.
BatchAugmentation augment_batch(const Matrix& features, std::span<const std::size_t> members,
                                const ChannelMask& mask, double gamma_p, Rng& rng);

// Gradient with respect to the un-augmented features: general-channel
// gradients of a swapped member flow to its donor.
Matrix route_gradient(const Matrix& d_augmented, const BatchAugmentation& augmentation, const ChannelMask& mask);

// CSV: channel,importance,is_general
void write_mask_csv(const std::filesystem::path& file, const ChannelImportance& importance, const ChannelMask& mask);

}  // namespace encofa
