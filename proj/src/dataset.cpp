#include "encofa/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace encofa {

namespace fs = std::filesystem;

std::string_view to_string(InstanceProfile profile) {
    return profile == InstanceProfile::probe_confusion ? "probe_confusion" : "truncated_gaussian";
}

InstanceProfile parse_instance_profile(std::string_view text) {
    if (text == "probe_confusion") return InstanceProfile::probe_confusion;
    if (text == "truncated_gaussian") return InstanceProfile::truncated_gaussian;
    throw ConfigError("noise.instance_profile", "expected probe_confusion or truncated_gaussian");
}

namespace {

constexpr double kTrainFraction = 0.7;
constexpr double kValFraction = 0.1;

// Splits one class worth of samples 70/10/20 after a seeded shuffle.
void split_class(std::vector<Sample> samples, std::uint64_t seed, int class_index,
                 DatasetSplits& out) {
    Rng rng(derive_seed(seed, Stream::split, {static_cast<std::uint64_t>(class_index)}));
    std::shuffle(samples.begin(), samples.end(), rng.engine());
    const auto n = samples.size();
    const auto n_train = static_cast<std::size_t>(std::llround(kTrainFraction * n));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(kValFraction * n)));
    for (std::size_t i = 0; i < n; ++i) {
        auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
        dst.push_back(std::move(samples[i]));
    }
}

std::vector<Vector> blob_centers(const BlobParams& p, Rng& rng) {
    const int total = p.num_classes + p.num_ood_classes;
    double radius = p.separation;
    std::vector<Vector> centers;
    int failures = 0;
    while (static_cast<int>(centers.size()) < total) {
        Vector dir(p.dim);
        for (int j = 0; j < p.dim; ++j) dir(j) = rng.normal();
        Vector c = l2_normalized(dir) * radius;
        const bool ok = std::all_of(centers.begin(), centers.end(), [&](const Vector& o) {
            return (o - c).norm() >= p.separation;
        });
        if (ok) {
            centers.push_back(std::move(c));
            continue;
        }
        if (++failures % 200 == 0) {
            // Crowded sphere: grow it and restart the placement.
            radius *= 1.05;
            centers.clear();
        }
    }
    return centers;
}

// Multinomial logistic regression on standardized inputs; the weak model
// whose confusion drives instance-dependent corruption.
class LinearProbe {
public:
    LinearProbe(std::span<const Sample> train, int num_classes, std::uint64_t seed) {
        const auto n = train.size();
        const auto dim = train.front().input.size();
        mean_ = Vector::Zero(dim);
        scale_ = Vector::Zero(dim);
        for (const auto& s : train) mean_ += Eigen::Map<const Vector>(s.input.data(), dim);
        mean_ /= static_cast<double>(n);
        for (const auto& s : train) {
            scale_ += (Eigen::Map<const Vector>(s.input.data(), dim) - mean_).array().square().matrix();
        }
        scale_ = (scale_ / static_cast<double>(n)).cwiseSqrt();
        for (Eigen::Index j = 0; j < scale_.size(); ++j) scale_(j) = scale_(j) > 1e-12 ? 1.0 / scale_(j) : 1.0;

        weights_ = Matrix::Zero(num_classes, dim);
        bias_ = Vector::Zero(num_classes);
        constexpr int kEpochs = 5;
        constexpr std::size_t kBatch = 32;
        constexpr double kLearningRate = 0.1;
        Rng rng(derive_seed(seed, Stream::probe));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < kEpochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng.engine());
            for (std::size_t start = 0; start < n; start += kBatch) {
                const auto end = std::min(n, start + kBatch);
                Matrix gw = Matrix::Zero(weights_.rows(), weights_.cols());
                Vector gb = Vector::Zero(bias_.size());
                for (auto b = start; b < end; ++b) {
                    const auto& s = train[order[b]];
                    const Vector x = standardize(s.input);
                    Vector p = probabilities_of(x);
                    p(s.observed_label) -= 1.0;
                    gw += p * x.transpose();
                    gb += p;
                }
                const double scale = kLearningRate / static_cast<double>(end - start);
                weights_ -= scale * gw;
                bias_ -= scale * gb;
            }
        }
    }

    Vector probabilities(const std::vector<double>& input) const {
        return probabilities_of(standardize(input));
    }

private:
    Vector standardize(const std::vector<double>& input) const {
        return (Eigen::Map<const Vector>(input.data(), mean_.size()) - mean_).cwiseProduct(scale_);
    }
    Vector probabilities_of(const Vector& x) const {
        Vector logits = weights_ * x + bias_;
        logits.array() -= logits.maxCoeff();
        Vector e = logits.array().exp();
        return e / e.sum();
    }

    Vector mean_, scale_;
    Matrix weights_;
    Vector bias_;
};

// Scales q so its mean is alpha while keeping every entry in [0, 1].
void rescale_to_mean(std::vector<double>& q, double alpha) {
    const double n = static_cast<double>(q.size());
    for (int iter = 0; iter < 100; ++iter) {
        double saturated = 0.0;
        double free_mass = 0.0;
        for (double v : q) {
            if (v >= 1.0) saturated += 1.0;
            else free_mass += v;
        }
        const double target = alpha * n - saturated;
        if (free_mass <= 0.0 || target <= 0.0) break;
        const double factor = target / free_mass;
        if (std::abs(factor - 1.0) < 1e-15) break;
        for (double& v : q) {
            if (v < 1.0) v = std::min(1.0, v * factor);
        }
    }
}

struct Ranked {
    double key;
    std::int64_t id;
    std::size_t index;
};

// Indices of the `count` largest keys, ties broken by sample id.
std::vector<std::size_t> top_by_key(std::vector<Ranked> ranked, std::size_t count) {
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        return a.key != b.key ? a.key > b.key : a.id < b.id;
    });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(count, ranked.size()); ++i) out.push_back(ranked[i].index);
    return out;
}

std::uint64_t as_key(std::int64_t id) { return static_cast<std::uint64_t>(id); }

std::vector<cv::String> list_images(const fs::path& dir) {
    static const std::vector<std::string> kExt = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm", ".pgm"};
    std::vector<cv::String> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (std::find(kExt.begin(), kExt.end(), ext) != kExt.end()) files.emplace_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    return files;
}

std::vector<double> image_to_chw(const cv::Mat& image, const ImageFolderOptions& opt) {
    cv::Mat resized;
    cv::resize(image, resized, cv::Size(opt.width, opt.height), 0, 0, cv::INTER_AREA);
    if (opt.channels == 3) cv::cvtColor(resized, resized, cv::COLOR_BGR2RGB);
    std::vector<double> out(static_cast<std::size_t>(opt.channels) * opt.height * opt.width);
    for (int c = 0; c < opt.channels; ++c)
        for (int y = 0; y < opt.height; ++y)
            for (int x = 0; x < opt.width; ++x) {
                const double v = opt.channels == 1 ? resized.at<std::uint8_t>(y, x)
                                                   : resized.at<cv::Vec3b>(y, x)[c];
                out[(static_cast<std::size_t>(c) * opt.height + y) * opt.width + x] = v / 255.0;
            }
    return out;
}

}  // namespace

Dataset generate_blobs(const BlobParams& p) {
    if (p.num_classes < 2) throw ConfigError("data.num_classes", "at least 2 ID classes are required");
    if (p.num_ood_classes < 0) throw ConfigError("data.num_ood_classes", "must be >= 0");
    if (p.n_per_class < 10) throw ConfigError("data.n_per_class", "must be >= 10");
    if (p.dim < 2) throw ConfigError("data.dim", "must be >= 2");
    if (!(p.separation > 0.0)) throw ConfigError("data.separation", "must be > 0");

    Rng rng(derive_seed(p.seed, Stream::blobs));
    const auto centers = blob_centers(p, rng);

    Dataset out;
    out.splits.shape = InputShape{p.dim, 1, 1};
    out.splits.num_classes = p.num_classes;
    out.splits.num_ood_classes = p.num_ood_classes;
    std::int64_t next_id = 0;
    for (int c = 0; c < p.num_classes + p.num_ood_classes; ++c) {
        std::vector<Sample> cls;
        for (int i = 0; i < p.n_per_class; ++i) {
            Sample s;
            s.id = next_id++;
            s.input.resize(p.dim);
            for (int j = 0; j < p.dim; ++j) s.input[j] = centers[c](j) + rng.normal();
            s.true_label = c;
            if (c < p.num_classes) {
                s.observed_label = c;
                s.true_type = NoiseType::clean;
            } else {
                s.observed_label = -1;
                s.true_type = NoiseType::open;
            }
            cls.push_back(std::move(s));
        }
        if (c < p.num_classes) {
            split_class(std::move(cls), p.seed, c, out.splits);
        } else {
            for (auto& s : cls) out.ood_pool.push_back(std::move(s));
        }
    }
    return out;
}

Dataset load_image_folder(const fs::path& root, const std::vector<std::string>& id_classes,
                          const std::vector<std::string>& ood_classes,
                          const ImageFolderOptions& opt) {
    if (!fs::is_directory(root)) throw DataError("image folder not found: " + root.string());
    if (id_classes.size() < 2) throw ConfigError("data.id_classes", "at least 2 ID classes are required");
    if (opt.channels != 1 && opt.channels != 3) throw ConfigError("data.channels", "must be 1 or 3");

    Dataset out;
    out.splits.shape = InputShape{opt.channels, opt.height, opt.width};
    out.splits.num_classes = static_cast<int>(id_classes.size());
    out.splits.num_ood_classes = static_cast<int>(ood_classes.size());
    std::int64_t next_id = 0;
    const int flag = opt.channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR;

    std::vector<std::string> all = id_classes;
    all.insert(all.end(), ood_classes.begin(), ood_classes.end());
    for (std::size_t c = 0; c < all.size(); ++c) {
        const fs::path dir = root / all[c];
        if (!fs::is_directory(dir)) throw DataError("missing class directory: " + dir.string());
        const bool is_id = c < id_classes.size();
        std::vector<Sample> cls;
        for (const auto& file : list_images(dir)) {
            cv::Mat image = cv::imread(file, flag);
            if (image.empty()) throw DataError("cannot decode image: " + file);
            Sample s;
            s.id = next_id++;
            s.input = image_to_chw(image, opt);
            s.true_label = static_cast<int>(c);
            s.observed_label = is_id ? static_cast<int>(c) : -1;
            s.true_type = is_id ? NoiseType::clean : NoiseType::open;
            cls.push_back(std::move(s));
        }
        if (cls.empty()) throw DataError("class directory has no images: " + dir.string());
        if (is_id) {
            split_class(std::move(cls), opt.seed, static_cast<int>(c), out.splits);
        } else {
            for (auto& s : cls) out.ood_pool.push_back(std::move(s));
        }
    }
    return out;
}

namespace {

std::vector<double> probabilities_with_probe(std::span<const Sample> samples, const NoiseSpec& spec,
                                             const LinearProbe* probe) {
    std::vector<double> q(samples.size(), 0.0);
    if (samples.empty() || spec.alpha <= 0.0) return q;
    if (spec.alpha >= 1.0) return std::vector<double>(samples.size(), 1.0);

    if (spec.instance_profile == InstanceProfile::truncated_gaussian) {
        constexpr double kSpread = 0.1;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            Rng rng(derive_seed(spec.seed, Stream::noise, {as_key(samples[i].id), 3}));
            double v = -1.0;
            for (int tries = 0; tries < 1000 && (v < 0.0 || v > 1.0); ++tries) {
                v = spec.alpha + kSpread * rng.normal();
            }
            q[i] = std::clamp(v, 0.0, 1.0);
        }
    } else {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            q[i] = 1.0 - probe->probabilities(samples[i].input)(samples[i].observed_label);
        }
    }
    const double mean = std::accumulate(q.begin(), q.end(), 0.0) / static_cast<double>(q.size());
    if (mean <= 0.0) return std::vector<double>(samples.size(), spec.alpha);
    for (double& v : q) v = std::min(1.0, v * spec.alpha / mean);
    rescale_to_mean(q, spec.alpha);
    return q;
}

std::optional<LinearProbe> make_probe(const DatasetSplits& reference, const NoiseSpec& spec) {
    if (spec.alpha <= 0.0 || spec.instance_profile != InstanceProfile::probe_confusion) return std::nullopt;
    std::vector<Sample> clean;
    for (const auto& s : reference.train)
        if (s.true_type == NoiseType::clean) clean.push_back(s);
    if (clean.empty()) throw DataError("probe confusion requires clean training samples");
    return LinearProbe(clean, reference.num_classes, spec.seed);
}

}  // namespace

std::vector<double> corruption_probabilities(std::span<const Sample> samples,
                                             const DatasetSplits& reference,
                                             const NoiseSpec& spec) {
    const auto probe = make_probe(reference, spec);
    return probabilities_with_probe(samples, spec, probe ? &*probe : nullptr);
}

DatasetSplits inject_noise(const DatasetSplits& splits, std::span<const Sample> ood_pool,
                           const NoiseSpec& spec) {
    if (!(spec.alpha >= 0.0 && spec.alpha <= 1.0)) throw ConfigError("noise.alpha", "must be in [0, 1]");
    if (!(spec.beta >= 0.0 && spec.beta <= 1.0)) throw ConfigError("noise.beta", "must be in [0, 1]");
    if (spec.id_class_count != 0 && spec.id_class_count != splits.num_classes)
        throw ConfigError("noise.id_class_count", "does not match the dataset");
    if (spec.alpha * spec.beta > 0.0 && ood_pool.empty())
        throw ConfigError("noise.beta", "open-set noise requested but the OOD pool is empty");
    if (spec.alpha * (1.0 - spec.beta) > 0.0 && splits.num_classes < 2)
        throw ConfigError("noise.alpha", "closed-set flips need at least 2 classes");

    DatasetSplits out = splits;
    const int K = splits.num_classes;

    const auto probe = make_probe(splits, spec);

    // OOD draws walk a seeded permutation of the pool, shared across splits.
    std::vector<Ranked> pool_rank;
    for (std::size_t i = 0; i < ood_pool.size(); ++i) {
        pool_rank.push_back({hash_uniform(derive_seed(spec.seed, Stream::noise, {as_key(ood_pool[i].id), 7})),
                             ood_pool[i].id, i});
    }
    const auto pool_order = top_by_key(pool_rank, pool_rank.size());
    std::size_t cursor = 0;

    auto corrupt = [&](std::vector<Sample>& samples) {
        if (samples.empty() || spec.alpha <= 0.0) return;
        const auto q = probabilities_with_probe(samples, spec, probe ? &*probe : nullptr);
        const auto n_corrupt = static_cast<std::size_t>(std::llround(spec.alpha * samples.size()));

        // Weighted sampling without replacement: key = log(u) / q.
        std::vector<Ranked> ranked;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const double u = hash_uniform(derive_seed(spec.seed, Stream::noise, {as_key(samples[i].id), 1}));
            const double key = q[i] > 0.0 ? std::log(std::max(u, 1e-300)) / q[i]
                                          : -std::numeric_limits<double>::infinity();
            ranked.push_back({key, samples[i].id, i});
        }
        const auto corrupted = top_by_key(std::move(ranked), n_corrupt);

        const auto n_open = static_cast<std::size_t>(std::llround(spec.beta * corrupted.size()));
        std::vector<Ranked> open_rank;
        for (auto i : corrupted) {
            open_rank.push_back({hash_uniform(derive_seed(spec.seed, Stream::noise, {as_key(samples[i].id), 2})),
                                 samples[i].id, i});
        }
        auto open_sel = top_by_key(open_rank, n_open);
        std::sort(open_sel.begin(), open_sel.end(),
                  [&](std::size_t a, std::size_t b) { return samples[a].id < samples[b].id; });
        std::vector<bool> is_open(samples.size(), false);
        for (auto i : open_sel) is_open[i] = true;

        for (auto i : open_sel) {
            const Sample& donor = ood_pool[pool_order[cursor++ % pool_order.size()]];
            samples[i].input = donor.input;
            samples[i].true_label = donor.true_label;
            samples[i].true_type = NoiseType::open;
        }
        for (auto i : corrupted) {
            if (is_open[i]) continue;
            Sample& s = samples[i];
            int target = -1;
            if (probe) {
                const Vector p = probe->probabilities(s.input);
                for (int c = 0; c < K; ++c) {
                    if (c != s.observed_label && (target < 0 || p(c) > p(target))) target = c;
                }
            } else {
                const double u = hash_uniform(derive_seed(spec.seed, Stream::noise, {as_key(s.id), 4}));
                target = static_cast<int>(u * (K - 1));
                if (target >= s.observed_label) ++target;
            }
            s.observed_label = target;
            s.true_type = NoiseType::closed;
        }
    };
    corrupt(out.train);
    corrupt(out.val);
    return out;
}

namespace {

void append_double(std::string& line, double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    line.append(buf, res.ptr);
}

template <class T>
T parse_number(std::string_view field, const fs::path& file, std::size_t line_no) {
    T value{};
    auto res = std::from_chars(field.data(), field.data() + field.size(), value);
    if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
        throw DataError(file.string() + ":" + std::to_string(line_no) + ": bad number '" +
                        std::string(field) + "'");
    }
    return value;
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace

void write_samples_csv(const fs::path& file, std::span<const Sample> samples, std::size_t dim) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write " + file.string());
    std::string line = "id,true_label,observed_label,true_type";
    for (std::size_t j = 0; j < dim; ++j) line += ",x" + std::to_string(j);
    out << line << '\n';
    for (const auto& s : samples) {
        line = std::to_string(s.id) + ',' + std::to_string(s.true_label) + ',' +
               std::to_string(s.observed_label) + ',' + std::string(to_string(s.true_type));
        for (double v : s.input) {
            line += ',';
            append_double(line, v);
        }
        out << line << '\n';
    }
}

std::vector<Sample> read_samples_csv(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot read " + file.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("id,true_label,observed_label,true_type", 0) != 0)
        throw DataError(file.string() + ": unexpected header");
    const auto dim = split_fields(line).size() - 4;
    std::vector<Sample> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != dim + 4)
            throw DataError(file.string() + ":" + std::to_string(line_no) + ": wrong field count");
        Sample s;
        s.id = parse_number<std::int64_t>(fields[0], file, line_no);
        s.true_label = parse_number<int>(fields[1], file, line_no);
        s.observed_label = parse_number<int>(fields[2], file, line_no);
        s.true_type = parse_noise_type(fields[3]);
        s.input.reserve(dim);
        for (std::size_t j = 0; j < dim; ++j) s.input.push_back(parse_number<double>(fields[4 + j], file, line_no));
        out.push_back(std::move(s));
    }
    return out;
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
    fs::create_directories(dir);
    const auto dim = dataset.splits.shape.size();
    write_samples_csv(dir / "train.csv", dataset.splits.train, dim);
    write_samples_csv(dir / "val.csv", dataset.splits.val, dim);
    write_samples_csv(dir / "test.csv", dataset.splits.test, dim);
    write_samples_csv(dir / "ood_pool.csv", dataset.ood_pool, dim);
    nlohmann::json meta = {
        {"num_classes", dataset.splits.num_classes},
        {"num_ood_classes", dataset.splits.num_ood_classes},
        {"shape", {{"channels", dataset.splits.shape.channels},
                   {"height", dataset.splits.shape.height},
                   {"width", dataset.splits.shape.width}}},
    };
    std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw DataError("missing " + (dir / "meta.json").string());
    Dataset out;
    try {
        const auto meta = nlohmann::json::parse(meta_in);
        out.splits.num_classes = meta.at("num_classes").get<int>();
        out.splits.num_ood_classes = meta.at("num_ood_classes").get<int>();
        const auto& shape = meta.at("shape");
        out.splits.shape = InputShape{shape.at("channels").get<int>(), shape.at("height").get<int>(),
                                      shape.at("width").get<int>()};
    } catch (const nlohmann::json::exception& e) {
        throw DataError((dir / "meta.json").string() + ": " + e.what());
    }
    out.splits.train = read_samples_csv(dir / "train.csv");
    out.splits.val = read_samples_csv(dir / "val.csv");
    out.splits.test = read_samples_csv(dir / "test.csv");
    if (fs::exists(dir / "ood_pool.csv")) out.ood_pool = read_samples_csv(dir / "ood_pool.csv");
    for (const auto* split : {&out.splits.train, &out.splits.val, &out.splits.test, &out.ood_pool}) {
        for (const auto& s : *split) {
            if (s.input.size() != out.splits.shape.size())
                throw DataError("sample " + std::to_string(s.id) + " does not match the shape in meta.json");
        }
    }
    return out;
}

}  // namespace encofa
