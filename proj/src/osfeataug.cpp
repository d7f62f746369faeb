#include "encofa/osfeataug.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace encofa {

namespace {

ChannelImportance normalize(Vector raw) {
    ChannelImportance out;
    const double lo = raw.minCoeff();
    const double hi = raw.maxCoeff();
    out.raw = std::move(raw);
    if (!(hi > lo)) {
        out.normalized = Vector::Ones(out.raw.size());
        out.constant_fallback = true;
    } else {
        out.normalized = (out.raw.array() - lo) / (hi - lo);
    }
    return out;
}

}  // namespace

ChannelImportance compute_channel_importance(const Matrix& gradients) {
    if (gradients.cols() == 0 || gradients.rows() == 0) throw std::invalid_argument("no channel gradients");
    return normalize(gradients.rowwise().mean());
}

ChannelImportance compute_channel_importance(const Matrix& gradients, std::span<const std::size_t> columns) {
    if (columns.empty() || gradients.rows() == 0) throw std::invalid_argument("no channel gradients");
    Vector sum = Vector::Zero(gradients.rows());
    for (auto c : columns) sum += gradients.col(static_cast<Eigen::Index>(c));
    return normalize(sum / static_cast<double>(columns.size()));
}

std::size_t ChannelMask::count() const { return static_cast<std::size_t>(std::count(general.begin(), general.end(), true)); }

ChannelMask select_general_channels(const Vector& normalized, double gamma_gen) {
    ChannelMask mask;
    mask.general.resize(static_cast<std::size_t>(normalized.size()));
    for (Eigen::Index c = 0; c < normalized.size(); ++c) mask.general[static_cast<std::size_t>(c)] = normalized[c] < gamma_gen;
    return mask;
}

Vector augment_feature(const Vector& f_i, const Vector& f_j, const ChannelMask& mask, double gamma_p, Rng& rng,
                       bool* swapped) {
    if (f_i.size() != f_j.size() || static_cast<std::size_t>(f_i.size()) != mask.size())
        throw std::invalid_argument("augment_feature: dimension mismatch");
    const bool fire = rng.uniform() < gamma_p;
    if (swapped) *swapped = fire;
    Vector out = f_i;
    if (!fire) return out;
    for (std::size_t c = 0; c < mask.size(); ++c)
        if (mask.general[c]) out[static_cast<Eigen::Index>(c)] = f_j[static_cast<Eigen::Index>(c)];
    return out;
}

BatchAugmentation augment_batch(const Matrix& features, std::span<const std::size_t> members,
                                const ChannelMask& mask, double gamma_p, Rng& rng) {
    BatchAugmentation out;
    out.features = features;
    const auto batch = static_cast<std::size_t>(features.cols());
    for (auto i : members) {
        if (i >= batch) throw std::out_of_range("augment_batch: member outside batch");
        SwapRecord rec{i, i, false};
        if (batch < 2) {
            out.no_donor = true;
            out.swaps.push_back(rec);
            continue;
        }
        std::size_t j = rng.index(batch - 1);
        if (j >= i) ++j;
        rec.donor = j;
        out.features.col(static_cast<Eigen::Index>(i)) =
            augment_feature(features.col(static_cast<Eigen::Index>(i)), features.col(static_cast<Eigen::Index>(j)),
                            mask, gamma_p, rng, &rec.fired);
        out.swaps.push_back(rec);
    }
    return out;
}

Matrix route_gradient(const Matrix& d_augmented, const BatchAugmentation& aug, const ChannelMask& mask) {
    Matrix d = d_augmented;
    for (const auto& s : aug.swaps) {
        if (!s.fired) continue;
        const auto i = static_cast<Eigen::Index>(s.member);
        const auto j = static_cast<Eigen::Index>(s.donor);
        for (std::size_t c = 0; c < mask.size(); ++c) {
            if (!mask.general[c]) continue;
            const auto r = static_cast<Eigen::Index>(c);
            d(r, j) += d_augmented(r, i);
            d(r, i) -= d_augmented(r, i);
        }
    }
    return d;
}

void write_mask_csv(const std::filesystem::path& file, const ChannelImportance& importance, const ChannelMask& mask) {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "channel,importance,is_general\n";
    out.precision(17);
    for (std::size_t c = 0; c < mask.size(); ++c)
        out << c << ',' << importance.normalized[static_cast<Eigen::Index>(c)] << ',' << (mask.general[c] ? 1 : 0)
            << '\n';
}

}  // namespace encofa
