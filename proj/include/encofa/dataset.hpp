#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "encofa/common.hpp"

namespace encofa {

// Layout of one input. Vector data uses channels = D, height = width = 1;
// images are stored channel-major (C x H x W) in the flat input vector.
struct InputShape {
    int channels = 1;
    int height = 1;
    int width = 1;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(channels) * height * width;
    }
    bool is_image() const noexcept { return height > 1 || width > 1; }
    bool operator==(const InputShape&) const = default;
};

// Labels are 0-based: observed labels live in [0, K); OOD classes occupy
// [K, K + K_ood) in true_label.
struct Sample {
    std::int64_t id = 0;
    std::vector<double> input;
    int observed_label = 0;
    int true_label = 0;
    NoiseType true_type = NoiseType::clean;

    bool operator==(const Sample&) const = default;
};

struct DatasetSplits {
    InputShape shape;
    int num_classes = 0;
    int num_ood_classes = 0;
    std::vector<Sample> train;
    std::vector<Sample> val;
    std::vector<Sample> test;
};

struct Dataset {
    DatasetSplits splits;
    std::vector<Sample> ood_pool;
};

enum class InstanceProfile { probe_confusion, truncated_gaussian };

std::string_view to_string(InstanceProfile profile);
InstanceProfile parse_instance_profile(std::string_view text);

struct NoiseSpec {
    double alpha = 0.0;
    double beta = 0.0;
    std::uint64_t seed = 0;
    int id_class_count = 0;
    int ood_class_count = 0;
    InstanceProfile instance_profile = InstanceProfile::probe_confusion;
};

struct BlobParams {
    int n_per_class = 200;
    int num_classes = 5;
    int num_ood_classes = 3;
    int dim = 32;
    double separation = 4.0;
    std::uint64_t seed = 0;
};

// Isotropic unit-variance Gaussian clusters, one per ID and OOD class, with
// pairwise center distance >= separation. ID samples are split 70/10/20 per
// class; OOD classes form the pool.
Dataset generate_blobs(const BlobParams& params);

struct ImageFolderOptions {
    int channels = 3;
    int height = 32;
    int width = 32;
    std::uint64_t seed = 0;
};

// Directory-per-class layout: root/<class>/<image files>.
Dataset load_image_folder(const std::filesystem::path& root,
                          const std::vector<std::string>& id_classes,
                          const std::vector<std::string>& ood_classes,
                          const ImageFolderOptions& options);

// Per-sample corruption probabilities with mean alpha (before selection).
std::vector<double> corruption_probabilities(std::span<const Sample> samples,
                                             const DatasetSplits& reference,
                                             const NoiseSpec& spec);

// Corrupts train and val in place of a copy; test is returned untouched.
DatasetSplits inject_noise(const DatasetSplits& splits, std::span<const Sample> ood_pool,
                           const NoiseSpec& spec);

// Delimited-text persistence. One CSV per split plus meta.json.
void write_samples_csv(const std::filesystem::path& file, std::span<const Sample> samples,
                       std::size_t dim);
std::vector<Sample> read_samples_csv(const std::filesystem::path& file);

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace encofa
