#include "encofa/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "encofa/metrics.hpp"

namespace encofa {

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    return order;
}

std::span<const double> column(const Matrix& m, Eigen::Index c) {
    return {m.col(c).data(), static_cast<std::size_t>(m.rows())};
}

std::vector<Matrix> snapshot(Backbone& model) {
    std::vector<Matrix> out;
    for (auto* p : model.parameters()) out.push_back(p->value);
    return out;
}

void restore(Backbone& model, const std::vector<Matrix>& values) {
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

std::ofstream open_out(const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    return out;
}

}  // namespace

double poly_lr(double lr0, int epoch, int total_epochs, double power) {
    if (total_epochs <= 0) throw std::invalid_argument("poly_lr: total_epochs must be > 0");
    const double remaining = 1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return remaining <= 0.0 ? 0.0 : lr0 * std::pow(remaining, power);
}

Adam::Adam(std::vector<Parameter*> params, const OptimConfig& config) : params_(std::move(params)), cfg_(config) {
    for (const auto* p : params_) {
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

void Adam::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Parameter& p = *params_[k];
        const Matrix g = p.grad + cfg_.weight_decay * p.value;
        m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g;
        v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const Matrix denom = (v_[k].cwiseSqrt() / std::sqrt(bc2)).array() + cfg_.eps;
        p.value -= (lr / bc1) * m_[k].cwiseQuotient(denom);
    }
}

std::string format_metrics_row(const EpochMetrics& m) {
    std::string row = std::to_string(m.epoch);
    for (double v : {m.lr, m.loss_cls, m.loss_ensc, m.acc_val, m.acc_type_train, m.f1_on_train, m.pre_on_train})
        row += "," + format_double(v);
    for (std::size_t n : {m.n_clean, m.n_closed, m.n_open}) row += "," + std::to_string(n);
    return row;
}

BackboneSpec resolve_model_spec(const RunConfig& config, const DatasetSplits& data) {
    BackboneSpec spec = config.model;
    spec.input = data.shape;
    spec.num_classes = data.num_classes;
    return spec;
}

Dataset build_dataset(const RunConfig& config) {
    const std::uint64_t seed = config.effective_data_seed();
    Dataset d;
    switch (config.data.source) {
        case DataSource::saved: return load_dataset(config.data.path);
        case DataSource::blobs: {
            BlobParams p = config.data.blobs;
            p.seed = seed;
            d = generate_blobs(p);
            break;
        }
        case DataSource::images: {
            ImageFolderOptions opt = config.data.image;
            opt.seed = seed;
            d = load_image_folder(config.data.path, config.data.id_classes, config.data.ood_classes, opt);
            break;
        }
    }
    NoiseSpec spec;
    spec.alpha = config.alpha;
    spec.beta = config.beta;
    spec.seed = seed;
    spec.id_class_count = d.splits.num_classes;
    spec.ood_class_count = d.splits.num_ood_classes;
    spec.instance_profile = config.profile;
    d.splits = inject_noise(d.splits, d.ood_pool, spec);
    return d;
}

Trainer::Trainer(RunConfig config, DatasetSplits data)
    : cfg_(std::move(config)),
      data_(std::move(data)),
      model_(resolve_model_spec(cfg_, data_), cfg_.seed),
      optimizer_(model_.parameters(), cfg_.optim) {
    cfg_.validate();
    if (data_.train.empty()) throw DataError("training split is empty");
    if (cfg_.augment.enabled) augmenter_.emplace(data_.shape, data_.train, cfg_.augment);
}

Matrix Trainer::batch_inputs(std::span<const std::size_t> indices, int epoch, int view) const {
    const auto dim = static_cast<Eigen::Index>(data_.shape.size());
    Matrix x(dim, static_cast<Eigen::Index>(indices.size()));
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const Sample& s = data_.train[indices[b]];
        const auto col = static_cast<Eigen::Index>(b);
        if (view < 0 || !augmenter_) {
            x.col(col) = Eigen::Map<const Vector>(s.input.data(), dim);
            continue;
        }
        Rng rng(derive_seed(cfg_.seed, Stream::augmentation,
                            {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(s.id),
                             static_cast<std::uint64_t>(view)}));
        const auto aug = (*augmenter_)(s.input, rng);
        x.col(col) = Eigen::Map<const Vector>(aug.data(), dim);
    }
    return x;
}

EpochCache Trainer::build_cache() {
    const std::size_t n = data_.train.size();
    EpochCache cache;
    cache.losses.resize(n);
    cache.features.resize(model_.spec().feature_dim, static_cast<Eigen::Index>(n));
    cache.channel_grads.resize(model_.spec().feature_dim, static_cast<Eigen::Index>(n));
    const auto chunk = static_cast<std::size_t>(std::max(cfg_.optim.batch_size, 1));
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += chunk) {
        idx.clear();
        for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
        const Matrix f = model_.encode(batch_inputs(idx, epoch_, -1), Pass::record);
        const Matrix p = softmax_columns(model_.logits(f, Pass::record));
        const Matrix g = model_.record_channel_gradients();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const auto col = static_cast<Eigen::Index>(b);
            const auto dst = static_cast<Eigen::Index>(idx[b]);
            cache.features.col(dst) = f.col(col);
            cache.channel_grads.col(dst) = g.col(col);
            cache.losses[idx[b]] = cross_entropy(data_.train[idx[b]].observed_label, column(p, col));
        }
    }
    cache.epoch_index = epoch_ - 1;
    return cache;
}

double Trainer::evaluate_accuracy(std::span<const Sample> split, bool use_observed) const {
    return classification_accuracy(model_, split, use_observed);
}

std::vector<SupervisionRecord> Trainer::assemble_supervision(const Partition& partition) {
    const std::size_t n = data_.train.size();
    const int K = data_.num_classes;
    std::vector<int> observed(n), dynamic(n, 0);
    std::vector<std::vector<double>> pseudo(n);
    std::vector<double> weight(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) observed[i] = data_.train[i].observed_label;

    const auto& closed = partition.closed_noisy;
    if (!closed.empty()) {
        std::vector<double> pseudo_losses(closed.size());
        const Matrix p1 = model_.predict_proba(batch_inputs(closed, epoch_, 1));
        const Matrix p2 = model_.predict_proba(batch_inputs(closed, epoch_, 2));
        const Matrix p0 = model_.predict_proba(batch_inputs(closed, epoch_, -1));
        for (std::size_t k = 0; k < closed.size(); ++k) {
            const auto col = static_cast<Eigen::Index>(k);
            pseudo[closed[k]] = pseudo_label(column(p1, col), column(p2, col));
            pseudo_losses[k] = cross_entropy(pseudo[closed[k]], column(p0, col));
        }
        GmmFitOptions gmm;
        gmm.restarts = cfg_.gmm_restarts;
        gmm.seed = derive_seed(cfg_.seed, Stream::gmm, {static_cast<std::uint64_t>(epoch_), 1});
        const auto w = pseudo_weights(pseudo_losses, gmm);
        for (std::size_t k = 0; k < closed.size(); ++k) weight[closed[k]] = w[k];
    }
    for (auto i : partition.open_noisy) dynamic[i] = dynamic_label(K, epoch_, data_.train[i].id, cfg_.seed);

    return refine_labels(partition, {observed, pseudo, weight, dynamic}, K);
}

EpochMetrics Trainer::run_epoch(const std::vector<SupervisionRecord>& records, bool augment_features, bool use_ensc) {
    const std::size_t n = data_.train.size();
    EpochMetrics m;
    m.epoch = epoch_;
    m.lr = poly_lr(cfg_.optim.lr, epoch_, cfg_.epochs, cfg_.optim.power);
    swaps_.clear();

    Rng order_rng(derive_seed(cfg_.seed, Stream::data_order, {static_cast<std::uint64_t>(epoch_)}));
    const auto order = shuffled_indices(n, order_rng);
    const auto bs = static_cast<std::size_t>(cfg_.optim.batch_size);
    const bool ensc_active = use_ensc && cfg_.hp.lambda > 0.0;

    int batches = 0;
    double sum_cls = 0.0, sum_ensc = 0.0;
    std::vector<SupervisionRecord> batch_records;
    std::vector<std::size_t> members;
    std::vector<int> labels;
    std::vector<double> weights;
    for (std::size_t start = 0; start < n; start += bs, ++batches) {
        const std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
        batch_records.clear();
        members.clear();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            batch_records.push_back(records[idx[b]]);
            if (records[idx[b]].kind == NoiseType::open) members.push_back(b);
        }

        model_.zero_grad();
        const Matrix features = model_.encode(batch_inputs(idx, epoch_, cfg_.augment_train_inputs ? 0 : -1),
                                              Pass::record);
        std::optional<BatchAugmentation> aug;
        if (augment_features && !members.empty()) {
            Rng swap_rng(derive_seed(cfg_.seed, Stream::feature_swap,
                                     {static_cast<std::uint64_t>(epoch_), static_cast<std::uint64_t>(batches)}));
            aug = augment_batch(features, members, mask_, cfg_.hp.gamma_p, swap_rng);
            for (const auto& s : aug->swaps)
                swaps_.push_back({batches, data_.train[idx[s.member]].id, records[idx[s.member]].kind,
                                  data_.train[idx[s.donor]].id, s.fired});
        }
        const Matrix& used = aug ? aug->features : features;

        const Matrix probs = softmax_columns(model_.logits(used, Pass::record));
        const ClassificationLoss cls = classification_loss(batch_records, probs);
        m.clamped = m.clamped || cls.clamped;
        sum_cls += cls.value;
        Matrix d_features = model_.head_backward(cls.d_logits);

        if (ensc_active) {
            const Matrix z = model_.project(used, Pass::record);
            labels.clear();
            weights.clear();
            for (const auto& r : batch_records) {
                labels.push_back(r.refined_label);
                weights.push_back(r.weight);
            }
            const EnscLoss ensc = ensc_loss(z, labels, weights, cfg_.hp.tau);
            m.ensc_skipped = m.ensc_skipped || ensc.skipped_zero_weight;
            sum_ensc += ensc.value;
            d_features += model_.projector_backward(cfg_.hp.lambda * ensc.d_z);
        }
        if (aug) d_features = route_gradient(d_features, *aug, mask_);
        model_.encoder_backward(d_features);
        optimizer_.step(m.lr);
    }
    m.loss_cls = batches ? sum_cls / batches : 0.0;
    m.loss_ensc = batches ? sum_ensc / batches : 0.0;
    return m;
}

void Trainer::finish_metrics(EpochMetrics& m, const Partition& partition) const {
    const std::size_t n = data_.train.size();
    m.n_clean = partition.clean.size();
    m.n_closed = partition.closed_noisy.size();
    m.n_open = partition.open_noisy.size();
    m.acc_val = data_.val.empty() ? 0.0 : classification_accuracy(model_, data_.val, true);
    std::vector<NoiseType> truth(n);
    for (std::size_t i = 0; i < n; ++i) truth[i] = data_.train[i].true_type;
    const auto nt = noise_type_metrics(partition.assignments(n), truth);
    m.acc_type_train = nt.acc_type;
    m.f1_on_train = nt.f1_on;
    m.pre_on_train = nt.pre_on;
}

EpochCache Trainer::warmup(int epochs) {
    if (epoch_ != 0) throw StateError("warmup must run before any other epoch");
    const std::size_t n = data_.train.size();
    partition_ = Partition::all_clean(n);
    std::vector<SupervisionRecord> records(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = data_.train[i].observed_label;
        records[i] = {y, y, 1.0, NoiseType::clean};
    }
    for (int e = 0; e < epochs; ++e) {
        EpochMetrics m = run_epoch(records, false, false);
        m.warmup = true;
        finish_metrics(m, partition_);
        warmup_history_.push_back(m);
        ++epoch_;
    }
    last_records_ = std::move(records);
    return build_cache();
}

EpochMetrics Trainer::train_epoch(EpochCache& cache) {
    const std::size_t n = data_.train.size();
    if (cache.epoch_index != epoch_ - 1)
        throw StateError("epoch cache is from epoch " + std::to_string(cache.epoch_index) + ", expected " +
                         std::to_string(epoch_ - 1));
    if (cache.size() != n || static_cast<std::size_t>(cache.features.cols()) != n ||
        static_cast<std::size_t>(cache.channel_grads.cols()) != n)
        throw StateError("epoch cache does not cover the training set");

    const bool triage_on = cfg_.method != Method::ce && cfg_.triage == TriageMode::automatic;
    last_triage_ = TriageResult{};
    if (triage_on) {
        TriageOptions opt;
        opt.gamma_cl = cfg_.hp.gamma_cl;
        opt.gamma_ood = cfg_.hp.gamma_ood;
        opt.knn_k = cfg_.hp.knn_k;
        opt.knn_divisor = cfg_.knn_divisor;
        opt.detect_open_set = cfg_.method != Method::cls_cl_cn;
        opt.gmm.restarts = cfg_.gmm_restarts;
        opt.gmm.seed = derive_seed(cfg_.seed, Stream::gmm, {static_cast<std::uint64_t>(epoch_), 0});
        last_triage_ = triage(cache.losses, cache.features, opt);
        partition_ = last_triage_.partition;
    } else {
        partition_ = Partition::all_clean(n);
        last_triage_.partition = partition_;
    }

    last_records_ = assemble_supervision(partition_);

    importance_.reset();
    mask_ = ChannelMask{};
    const bool augment = cfg_.method == Method::encofa && !partition_.open_noisy.empty();
    bool mask_fallback = false;
    if (augment) {
        importance_ = cfg_.importance_scope == ImportanceScope::all
                          ? compute_channel_importance(cache.channel_grads)
                          : compute_channel_importance(cache.channel_grads, partition_.open_noisy);
        mask_ = select_general_channels(importance_->normalized, cfg_.hp.gamma_gen);
        mask_fallback = importance_->constant_fallback;
    }

    const bool ensc = cfg_.method == Method::cls_ensc || cfg_.method == Method::encofa;
    EpochMetrics m = run_epoch(last_records_, augment, ensc);
    m.fallback_all_clean = last_triage_.fallback_all_clean;
    m.mask_fallback = mask_fallback;
    finish_metrics(m, partition_);
    ++epoch_;
    cache = build_cache();
    return m;
}

FitResult Trainer::fit(const std::optional<std::filesystem::path>& out_dir) {
    FitResult result;
    const std::size_t n = data_.train.size();
    std::ofstream metrics_csv, triage_csv, augment_csv;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir / "masks");
        open_out(*out_dir / "config.toml") << config_to_toml(cfg_);
        metrics_csv = open_out(*out_dir / "metrics.csv");
        metrics_csv << kMetricsHeader << '\n';
        triage_csv = open_out(*out_dir / "triage_audit.csv");
        triage_csv << "epoch,index,id,assigned,true_type,cache_loss,posterior_clean,ood_score\n";
        augment_csv = open_out(*out_dir / "augment_audit.csv");
        augment_csv << "epoch,batch,member_id,member_assigned,donor_id,fired\n";
    }

    std::vector<Matrix> best;
    auto track = [&](const EpochMetrics& m) {
        result.history.push_back(m);
        if (metrics_csv.is_open()) metrics_csv << format_metrics_row(m) << '\n';
        if (result.best_val_epoch < 0 || m.acc_val > result.best_acc_val) {
            result.best_val_epoch = m.epoch;
            result.best_acc_val = m.acc_val;
            best = snapshot(model_);
        }
    };

    EpochCache cache = warmup(cfg_.hp.warmup_epochs);
    for (const auto& m : warmup_history_) track(m);

    while (epoch_ < cfg_.epochs) {
        const std::vector<double> cache_losses = cache.losses;
        const int epoch = epoch_;
        const EpochMetrics m = train_epoch(cache);
        track(m);
        if (!out_dir) continue;

        const auto assigned = partition_.assignments(n);
        for (std::size_t i = 0; i < n; ++i) {
            triage_csv << epoch << ',' << i << ',' << data_.train[i].id << ',' << to_string(assigned[i]) << ','
                       << to_string(data_.train[i].true_type) << ',' << format_double(cache_losses[i]) << ',';
            if (!last_triage_.posteriors.empty()) triage_csv << format_double(last_triage_.posteriors[i]);
            triage_csv << ',';
            if (!last_triage_.ood_scores.empty() && !std::isnan(last_triage_.ood_scores[i]))
                triage_csv << format_double(last_triage_.ood_scores[i]);
            triage_csv << '\n';
        }
        for (const auto& s : swaps_)
            augment_csv << epoch << ',' << s.batch << ',' << s.member_id << ',' << to_string(s.member_kind)
                        << ',' << s.donor_id << ',' << (s.fired ? 1 : 0) << '\n';
        if (importance_) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04d.csv", epoch);
            write_mask_csv(*out_dir / "masks" / name, *importance_, mask_);
        }
    }

    const auto final_params = snapshot(model_);
    const auto pred_final = predict_labels(model_, data_.test);
    result.acc_test_final = classification_accuracy(model_, data_.test);
    restore(model_, best);
    const auto pred_best = predict_labels(model_, data_.test);
    result.acc_test_best_val = classification_accuracy(model_, data_.test);
    if (out_dir && cfg_.save_checkpoints) save_checkpoint(model_, *out_dir / "model_best.ckpt");
    restore(model_, final_params);

    if (!out_dir) return result;
    if (cfg_.save_checkpoints) save_checkpoint(model_, *out_dir / "model_final.ckpt");

    auto pred_csv = open_out(*out_dir / "test_predictions.csv");
    pred_csv << "id,true_label,predicted,predicted_best_val\n";
    for (std::size_t i = 0; i < data_.test.size(); ++i)
        pred_csv << data_.test[i].id << ',' << data_.test[i].true_label << ',' << pred_final[i] << ',' << pred_best[i]
                 << '\n';

    auto feat_csv = open_out(*out_dir / "test_features.csv");
    feat_csv << "id,true_label";
    for (int c = 0; c < model_.spec().feature_dim; ++c) feat_csv << ",f" << c;
    feat_csv << '\n';
    const Matrix feats = model_.encode(gather_inputs(data_.test));
    for (std::size_t i = 0; i < data_.test.size(); ++i) {
        feat_csv << data_.test[i].id << ',' << data_.test[i].true_label;
        for (Eigen::Index c = 0; c < feats.rows(); ++c)
            feat_csv << ',' << format_double(feats(c, static_cast<Eigen::Index>(i)));
        feat_csv << '\n';
    }

    const auto& last = result.history.back();
    nlohmann::ordered_json summary = {
        {"method", to_string(cfg_.method)},
        {"seed", cfg_.seed},
        {"epochs", cfg_.epochs},
        {"n_train", n},
        {"acc_test", result.acc_test_final},
        {"acc_test_best_val", result.acc_test_best_val},
        {"acc_val", last.acc_val},
        {"best_acc_val", result.best_acc_val},
        {"best_val_epoch", result.best_val_epoch},
        {"acc_type_train", last.acc_type_train},
        {"f1_on_train", last.f1_on_train},
        {"pre_on_train", last.pre_on_train},
    };
    open_out(*out_dir / "summary.json") << summary.dump(2) << '\n';
    return result;
}

}  // namespace encofa
