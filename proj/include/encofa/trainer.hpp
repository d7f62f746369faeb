#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "encofa/backbone.hpp"
#include "encofa/common.hpp"
#include "encofa/dataset.hpp"
#include "encofa/losses.hpp"
#include "encofa/noise_identifier.hpp"
#include "encofa/osfeataug.hpp"

namespace encofa {

// Per-sample quantities from the end-of-epoch pass, indexed by train position.
struct EpochCache {
    std::vector<double> losses;
    Matrix features;       // d x N
    Matrix channel_grads;  // d x N
    int epoch_index = -1;

    std::size_t size() const noexcept { return losses.size(); }
};

// Which loss terms and triage outputs are active.
//   ce         cross-entropy on observed labels
//   cls_cl_cn  clean + closed-set branches; noisy samples are never open-set
//   cls        all three classification branches
//   cls_ensc   cls plus the contrastive term
//   encofa     cls_ensc plus open-set feature augmentation
enum class Method { ce, cls_cl_cn, cls, cls_ensc, encofa };

std::string_view to_string(Method method);
Method parse_method(std::string_view text);

enum class TriageMode { automatic, all_clean };

enum class ImportanceScope { all, open_set };

enum class DataSource { blobs, saved, images };

struct DataConfig {
    DataSource source = DataSource::blobs;
    BlobParams blobs;
    // saved: directory written by save_dataset; images: image-folder root.
    std::filesystem::path path;
    std::vector<std::string> id_classes;
    std::vector<std::string> ood_classes;
    ImageFolderOptions image;
};

struct OptimConfig {
    double lr = 1e-2;
    double weight_decay = 1e-4;
    int batch_size = 64;
    double power = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct RunConfig {
    std::uint64_t seed = 0;
    int epochs = 30;
    Method method = Method::encofa;
    TriageMode triage = TriageMode::automatic;
    std::filesystem::path output_dir = "runs/default";
    bool save_checkpoints = true;

    DataConfig data;
    // Seed for data generation, splitting and noise; defaults to `seed`.
    std::optional<std::uint64_t> data_seed;
    std::uint64_t effective_data_seed() const { return data_seed.value_or(seed); }
    // Applied to blobs and images; ignored for saved datasets.
    double alpha = 0.4;
    double beta = 0.25;
    InstanceProfile profile = InstanceProfile::probe_confusion;

    BackboneSpec model;  // input shape and class count filled from the data
    OptimConfig optim;
    HyperParams hp;
    int knn_divisor = 10;
    ImportanceScope importance_scope = ImportanceScope::all;
    int gmm_restarts = 10;
    WeakAugmentConfig augment;
    // Weakly augment inputs in the optimization pass as well as the pseudo-label views.
    bool augment_train_inputs = true;

    // Throws ConfigError naming the offending key.
    void validate() const;
};

RunConfig load_config(const std::filesystem::path& file);
RunConfig parse_config(std::string_view toml_text, const std::string& source_name = "config");
std::string config_to_toml(const RunConfig& config);

// lr0 * (1 - t / T)^power
double poly_lr(double lr0, int epoch, int total_epochs, double power = 0.9);

// Adam with weight decay added to the gradient.
class Adam {
public:
    Adam(std::vector<Parameter*> params, const OptimConfig& config);
    void step(double lr);
    std::int64_t steps() const noexcept { return t_; }

private:
    std::vector<Parameter*> params_;
    std::vector<Matrix> m_, v_;
    OptimConfig cfg_;
    std::int64_t t_ = 0;
};

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double loss_cls = 0.0;
    double loss_ensc = 0.0;
    double acc_val = 0.0;
    double acc_type_train = 0.0;
    double f1_on_train = 0.0;
    double pre_on_train = 0.0;
    std::size_t n_clean = 0;
    std::size_t n_closed = 0;
    std::size_t n_open = 0;
    bool warmup = false;
    bool fallback_all_clean = false;
    bool clamped = false;
    bool ensc_skipped = false;
    bool mask_fallback = false;
};

inline constexpr const char* kMetricsHeader =
    "epoch,lr,loss_cls,loss_ensc,acc_val,acc_type_train,f1_on_train,pre_on_train,n_clean,n_closed,n_open";

std::string format_metrics_row(const EpochMetrics& m);

struct FitResult {
    std::vector<EpochMetrics> history;
    double acc_test_final = 0.0;
    double acc_test_best_val = 0.0;
    int best_val_epoch = -1;
    double best_acc_val = 0.0;
};

class Trainer {
public:
    Trainer(RunConfig config, DatasetSplits data);
    // The optimizer holds pointers into the model.
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    // Plain CE epochs, then a cache from one evaluation pass. Zero epochs
    // leaves the model untouched.
    EpochCache warmup(int epochs);
    // One ENCOFA epoch; `cache` must come from the previous epoch.
    EpochMetrics train_epoch(EpochCache& cache);
    // Full schedule. Writes artifacts when `out_dir` is set.
    FitResult fit(const std::optional<std::filesystem::path>& out_dir);

    // Un-augmented pass over the training set; records activations for the
    // channel gradients but leaves parameters untouched.
    EpochCache build_cache();
    double evaluate_accuracy(std::span<const Sample> split, bool use_observed) const;

    Backbone& model() noexcept { return model_; }
    const Backbone& model() const noexcept { return model_; }
    const DatasetSplits& data() const noexcept { return data_; }
    const RunConfig& config() const noexcept { return cfg_; }
    int next_epoch() const noexcept { return epoch_; }
    const Partition& last_partition() const noexcept { return partition_; }

    struct SwapEvent {
        int batch;
        std::int64_t member_id;
        NoiseType member_kind;
        std::int64_t donor_id;
        bool fired;
    };
    const std::vector<SwapEvent>& last_swaps() const noexcept { return swaps_; }
    const TriageResult& last_triage() const noexcept { return last_triage_; }
    const std::optional<ChannelImportance>& last_importance() const noexcept { return importance_; }
    const ChannelMask& last_mask() const noexcept { return mask_; }
    const std::vector<SupervisionRecord>& last_records() const noexcept { return last_records_; }
    const std::vector<EpochMetrics>& warmup_history() const noexcept { return warmup_history_; }

private:
    EpochMetrics run_epoch(const std::vector<SupervisionRecord>& records, bool augment_features, bool use_ensc);
    std::vector<SupervisionRecord> assemble_supervision(const Partition& partition);
    // view < 0: raw inputs; otherwise an independent weak augmentation per view.
    Matrix batch_inputs(std::span<const std::size_t> indices, int epoch, int view) const;
    void finish_metrics(EpochMetrics& m, const Partition& partition) const;

    RunConfig cfg_;
    DatasetSplits data_;
    Backbone model_;
    Adam optimizer_;
    std::optional<WeakAugmenter> augmenter_;
    int epoch_ = 0;
    Partition partition_;
    TriageResult last_triage_;
    std::vector<SupervisionRecord> last_records_;
    std::vector<SwapEvent> swaps_;
    std::optional<ChannelImportance> importance_;
    ChannelMask mask_;
    std::vector<EpochMetrics> warmup_history_;
};

BackboneSpec resolve_model_spec(const RunConfig& config, const DatasetSplits& data);
Dataset build_dataset(const RunConfig& config);

}  // namespace encofa
