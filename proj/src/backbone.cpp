#include "encofa/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

namespace encofa {

namespace {

Parameter make_parameter(std::string name, Eigen::Index rows, Eigen::Index cols) {
    return Parameter{std::move(name), Matrix::Zero(rows, cols), Matrix::Zero(rows, cols)};
}

// Uniform(-b, b) with b = gain * sqrt(3 / fan_in); biases start at zero.
void init_uniform(Parameter& w, Parameter& b, Eigen::Index fan_in, double gain, Rng& rng) {
    const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = rng.uniform(-bound, bound);
    b.value.setZero();
}

constexpr double kReluGain = std::numbers::sqrt2;

Matrix relu_mask(const Matrix& x) { return (x.array() > 0.0).cast<double>(); }

// 2x2 average pooling on channel-major maps, one column per sample.
Matrix avg_pool2(const Matrix& x, int channels, int height, int width) {
    const int oh = height / 2, ow = width / 2;
    Matrix out(static_cast<Eigen::Index>(channels) * oh * ow, x.cols());
    for (Eigen::Index b = 0; b < x.cols(); ++b)
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    auto at = [&](int yy, int xc) { return x((static_cast<Eigen::Index>(c) * height + yy) * width + xc, b); };
                    out((static_cast<Eigen::Index>(c) * oh + y) * ow + xx, b) =
                        0.25 * (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1));
                }
    return out;
}

Matrix avg_pool2_backward(const Matrix& dy, int channels, int height, int width) {
    const int oh = height / 2, ow = width / 2;
    Matrix dx = Matrix::Zero(static_cast<Eigen::Index>(channels) * height * width, dy.cols());
    for (Eigen::Index b = 0; b < dy.cols(); ++b)
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    const double g = 0.25 * dy((static_cast<Eigen::Index>(c) * oh + y) * ow + xx, b);
                    for (int dy_ = 0; dy_ < 2; ++dy_)
                        for (int dx_ = 0; dx_ < 2; ++dx_)
                            dx((static_cast<Eigen::Index>(c) * height + 2 * y + dy_) * width + 2 * xx + dx_, b) = g;
                }
    return dx;
}

}  // namespace

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in, int out)
    : weight(make_parameter(name + ".weight", out, in)), bias(make_parameter(name + ".bias", out, 1)) {}

void Linear::initialize(Rng& rng) { init_uniform(weight, bias, weight.value.cols(), kReluGain, rng); }

Matrix Linear::infer(const Matrix& x) const { return (weight.value * x).colwise() + bias.value.col(0); }

Matrix Linear::forward(const Matrix& x, Pass pass) {
    if (pass == Pass::record) input_ = x;
    return infer(x);
}

Matrix Linear::backward(const Matrix& dy) {
    if (input_.cols() != dy.cols()) throw StateError(weight.name + ": backward without a recorded forward");
    weight.grad.noalias() += dy * input_.transpose();
    bias.grad.col(0) += dy.rowwise().sum();
    return weight.value.transpose() * dy;
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int height, int width)
    : weight(make_parameter(name + ".weight", out_channels, in_channels * 9)),
      bias(make_parameter(name + ".bias", out_channels, 1)),
      in_channels_(in_channels), out_channels_(out_channels), height_(height), width_(width) {}

void Conv2d::initialize(Rng& rng) { init_uniform(weight, bias, weight.value.cols(), kReluGain, rng); }

// Rows are output pixels, columns (c, ky, kx) taps.
Matrix Conv2d::im2col(const double* image) const {
    Matrix patches = Matrix::Zero(static_cast<Eigen::Index>(height_) * width_, in_channels_ * 9);
    for (int c = 0; c < in_channels_; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const int col = c * 9 + ky * 3 + kx;
                for (int y = 0; y < height_; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= height_) continue;
                    for (int x = 0; x < width_; ++x) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= width_) continue;
                        patches(y * width_ + x, col) = image[(c * height_ + sy) * width_ + sx];
                    }
                }
            }
    return patches;
}

void Conv2d::col2im(const Matrix& cols, double* image) const {
    for (int c = 0; c < in_channels_; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const int col = c * 9 + ky * 3 + kx;
                for (int y = 0; y < height_; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= height_) continue;
                    for (int x = 0; x < width_; ++x) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= width_) continue;
                        image[(c * height_ + sy) * width_ + sx] += cols(y * width_ + x, col);
                    }
                }
            }
}

Matrix Conv2d::forward(const Matrix& x, Pass pass) {
    if (pass == Pass::record) input_ = x;
    return infer(x);
}

Matrix Conv2d::infer(const Matrix& x) const {
    const Eigen::Index pixels = static_cast<Eigen::Index>(height_) * width_;
    Matrix out(pixels * out_channels_, x.cols());
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
        const Matrix patches = im2col(x.col(b).data());
        Eigen::Map<Matrix> y(out.col(b).data(), pixels, out_channels_);
        y.noalias() = patches * weight.value.transpose();
        y.rowwise() += bias.value.col(0).transpose();
    }
    return out;
}

Matrix Conv2d::backward(const Matrix& dy) {
    if (input_.cols() != dy.cols()) throw StateError(weight.name + ": backward without a recorded forward");
    const Eigen::Index pixels = static_cast<Eigen::Index>(height_) * width_;
    Matrix dx = Matrix::Zero(input_.rows(), input_.cols());
    for (Eigen::Index b = 0; b < dy.cols(); ++b) {
        const Matrix patches = im2col(input_.col(b).data());
        Eigen::Map<const Matrix> g(dy.col(b).data(), pixels, out_channels_);
        weight.grad.noalias() += g.transpose() * patches;
        bias.grad.col(0) += g.colwise().sum().transpose();
        const Matrix dpatches = g * weight.value;
        col2im(dpatches, dx.col(b).data());
    }
    return dx;
}

// ---------------------------------------------------------------- MLP encoder

MlpEncoder::MlpEncoder(int input_dim, const std::vector<int>& hidden, int feature_dim) {
    int in = input_dim;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        layers_.emplace_back("encoder.fc" + std::to_string(i), in, hidden[i]);
        in = hidden[i];
    }
    layers_.emplace_back("encoder.fc" + std::to_string(hidden.size()), in, feature_dim);
}

void MlpEncoder::initialize(Rng& rng) {
    for (auto& l : layers_) l.initialize(rng);
}

Matrix MlpEncoder::infer(const Matrix& x) const {
    Matrix h = x;
    for (const auto& layer : layers_) h = layer.infer(h).cwiseMax(0.0);
    return h;
}

Matrix MlpEncoder::forward(const Matrix& x, Pass pass) {
    if (pass == Pass::inference) return infer(x);
    masks_.clear();
    Matrix h = x;
    for (auto& layer : layers_) {
        h = layer.forward(h, pass);
        masks_.push_back(relu_mask(h));
        h = h.cwiseMax(0.0);
    }
    return h;
}

void MlpEncoder::backward(const Matrix& d_features) {
    if (!recorded()) throw StateError("encoder backward without a recorded forward");
    Matrix g = d_features;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        g = g.cwiseProduct(masks_[i]);
        g = layers_[i].backward(g);
    }
}

Matrix MlpEncoder::pooled_map_gradient(const Matrix& d_features) const {
    if (!recorded()) throw StateError("channel gradients requested before any recorded forward pass");
    return d_features.cwiseProduct(masks_.back());
}

std::vector<Parameter*> MlpEncoder::parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

// ---------------------------------------------------------------- CNN encoder

CnnEncoder::CnnEncoder(InputShape input, const std::vector<int>& channels, int feature_dim) {
    int c = input.channels, h = input.height, w = input.width;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        const bool pool = h >= 2 && w >= 2;
        stages_.push_back({Conv2d("encoder.conv" + std::to_string(i), c, channels[i], h, w), channels[i], h, w, pool});
        c = channels[i];
        if (pool) {
            h /= 2;
            w /= 2;
        }
    }
    stages_.push_back({Conv2d("encoder.conv" + std::to_string(channels.size()), c, feature_dim, h, w), feature_dim, h, w, false});
}

void CnnEncoder::initialize(Rng& rng) {
    for (auto& s : stages_) s.conv.initialize(rng);
}

namespace {

Matrix global_average(const Matrix& maps, int channels, int height, int width) {
    const Eigen::Index pixels = static_cast<Eigen::Index>(height) * width;
    Matrix features(channels, maps.cols());
    for (Eigen::Index b = 0; b < maps.cols(); ++b) {
        Eigen::Map<const Matrix> map(maps.col(b).data(), pixels, channels);
        features.col(b) = map.colwise().mean().transpose();
    }
    return features;
}

}  // namespace

Matrix CnnEncoder::infer(const Matrix& x) const {
    Matrix h = x;
    for (const auto& s : stages_) {
        h = s.conv.infer(h).cwiseMax(0.0);
        if (s.pool) h = avg_pool2(h, s.channels, s.height, s.width);
    }
    const auto& last = stages_.back();
    return global_average(h, last.channels, last.height, last.width);
}

Matrix CnnEncoder::forward(const Matrix& x, Pass pass) {
    if (pass == Pass::inference) return infer(x);
    masks_.clear();
    Matrix h = x;
    for (auto& s : stages_) {
        h = s.conv.forward(h, pass);
        masks_.push_back(relu_mask(h));
        h = h.cwiseMax(0.0);
        if (s.pool) h = avg_pool2(h, s.channels, s.height, s.width);
    }
    const auto& last = stages_.back();
    return global_average(h, last.channels, last.height, last.width);
}

void CnnEncoder::backward(const Matrix& d_features) {
    if (!recorded()) throw StateError("encoder backward without a recorded forward");
    const auto& last = stages_.back();
    const Eigen::Index pixels = static_cast<Eigen::Index>(last.height) * last.width;
    Matrix g(pixels * last.channels, d_features.cols());
    for (Eigen::Index b = 0; b < d_features.cols(); ++b) {
        Eigen::Map<Matrix> map(g.col(b).data(), pixels, last.channels);
        map.rowwise() = d_features.col(b).transpose() / static_cast<double>(pixels);
    }
    for (std::size_t i = stages_.size(); i-- > 0;) {
        auto& s = stages_[i];
        if (s.pool) g = avg_pool2_backward(g, s.channels, s.height, s.width);
        g = g.cwiseProduct(masks_[i]);
        g = s.conv.backward(g);
    }
}

Matrix CnnEncoder::pooled_map_gradient(const Matrix& d_features) const {
    if (!recorded()) throw StateError("channel gradients requested before any recorded forward pass");
    const auto& last = stages_.back();
    const Eigen::Index pixels = static_cast<Eigen::Index>(last.height) * last.width;
    Matrix out(last.channels, d_features.cols());
    for (Eigen::Index b = 0; b < d_features.cols(); ++b) {
        Eigen::Map<const Matrix> mask(masks_.back().col(b).data(), pixels, last.channels);
        // d logit / d map[k, p] = d_features[k] / pixels * mask[k, p], then spatially averaged.
        const Vector active = mask.colwise().mean().transpose();
        out.col(b) = d_features.col(b).cwiseProduct(active) / static_cast<double>(pixels);
    }
    return out;
}

std::vector<Parameter*> CnnEncoder::parameters() {
    std::vector<Parameter*> out;
    for (auto& s : stages_) {
        out.push_back(&s.conv.weight);
        out.push_back(&s.conv.bias);
    }
    return out;
}

// ---------------------------------------------------------------- Projector

Projector::Projector(int feature_dim, int projection_dim) : fc("projector.fc", feature_dim, projection_dim) {}

void Projector::initialize(Rng& rng) { init_uniform(fc.weight, fc.bias, fc.weight.value.cols(), 1.0, rng); }

namespace {

Matrix normalize_columns(const Matrix& raw) {
    Matrix z(raw.rows(), raw.cols());
    for (Eigen::Index b = 0; b < raw.cols(); ++b) z.col(b) = l2_normalized(raw.col(b));
    return z;
}

}  // namespace

Matrix Projector::infer(const Matrix& features) const { return normalize_columns(fc.infer(features)); }

Matrix Projector::forward(const Matrix& features, Pass pass) {
    if (pass == Pass::inference) return infer(features);
    raw_ = fc.forward(features, pass);
    return normalize_columns(raw_);
}

Matrix Projector::backward(const Matrix& d_projected) {
    Matrix d_raw = Matrix::Zero(raw_.rows(), raw_.cols());
    for (Eigen::Index b = 0; b < raw_.cols(); ++b) {
        const double n = raw_.col(b).norm();
        if (!(n > 0.0)) continue;  // fallback basis vector is constant
        const Vector z = raw_.col(b) / n;
        d_raw.col(b) = (d_projected.col(b) - z * z.dot(d_projected.col(b))) / n;
    }
    return fc.backward(d_raw);
}

// ---------------------------------------------------------------- Backbone

std::string_view to_string(BackboneFamily family) { return family == BackboneFamily::mlp ? "mlp" : "cnn"; }

BackboneFamily parse_backbone_family(std::string_view text) {
    if (text == "mlp") return BackboneFamily::mlp;
    if (text == "cnn") return BackboneFamily::cnn;
    throw ConfigError("model.family", "expected mlp or cnn");
}

namespace {

std::variant<MlpEncoder, CnnEncoder> make_encoder(const BackboneSpec& spec) {
    if (spec.family == BackboneFamily::cnn) {
        if (!spec.input.is_image()) throw ConfigError("model.family", "cnn backbone needs image inputs");
        return CnnEncoder(spec.input, spec.hidden, spec.feature_dim);
    }
    return MlpEncoder(static_cast<int>(spec.input.size()), spec.hidden, spec.feature_dim);
}

}  // namespace

Backbone::Backbone(BackboneSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)),
      encoder_(make_encoder(spec_)),
      head_("head.fc", spec_.feature_dim, spec_.num_classes),
      projector_(spec_.feature_dim, spec_.projection_dim) {
    if (spec_.num_classes < 1) throw ConfigError("model.num_classes", "must be >= 1");
    if (spec_.feature_dim < 1) throw ConfigError("model.feature_dim", "must be >= 1");
    if (spec_.projection_dim < 1) throw ConfigError("model.projection_dim", "must be >= 1");
    Rng rng(derive_seed(seed, Stream::init));
    std::visit([&](auto& e) { e.initialize(rng); }, encoder_);
    init_uniform(head_.weight, head_.bias, spec_.feature_dim, 1.0, rng);
    projector_.initialize(rng);
}

Matrix Backbone::encode(const Matrix& inputs, Pass pass) {
    if (inputs.rows() != static_cast<Eigen::Index>(spec_.input.size()))
        throw std::invalid_argument("input dimension does not match the backbone");
    if (pass == Pass::record) {
        head_recorded_ = false;
        recorded_batch_ = inputs.cols();
    }
    return std::visit([&](auto& e) { return e.forward(inputs, pass); }, encoder_);
}

Matrix Backbone::encode(const Matrix& inputs) const {
    if (inputs.rows() != static_cast<Eigen::Index>(spec_.input.size()))
        throw std::invalid_argument("input dimension does not match the backbone");
    return std::visit([&](const auto& e) { return e.infer(inputs); }, encoder_);
}

Matrix Backbone::logits(const Matrix& features, Pass pass) {
    if (pass == Pass::record) head_recorded_ = features.cols() == recorded_batch_;
    return head_.forward(features, pass);
}

Matrix Backbone::logits(const Matrix& features) const { return head_.infer(features); }

Matrix Backbone::project(const Matrix& features) const { return projector_.infer(features); }

Matrix Backbone::probabilities(const Matrix& features) const { return softmax_columns(head_.infer(features)); }

Matrix Backbone::predict_proba(const Matrix& inputs) const { return probabilities(encode(inputs)); }

Matrix Backbone::project(const Matrix& features, Pass pass) { return projector_.forward(features, pass); }

Matrix Backbone::head_backward(const Matrix& d_logits) { return head_.backward(d_logits); }

Matrix Backbone::projector_backward(const Matrix& d_projected) { return projector_.backward(d_projected); }

void Backbone::encoder_backward(const Matrix& d_features) {
    std::visit([&](auto& e) { e.backward(d_features); }, encoder_);
}

Matrix Backbone::record_channel_gradients() const {
    const bool encoded = std::visit([](const auto& e) { return e.recorded(); }, encoder_);
    if (!encoded || !head_recorded_)
        throw StateError("record_channel_gradients called before a recorded forward pass");
    const Matrix& features = head_.recorded_input();
    const Matrix logits = head_.infer(features);
    Matrix d_features(features.rows(), features.cols());
    for (Eigen::Index b = 0; b < logits.cols(); ++b) {
        Eigen::Index predicted = 0;
        logits.col(b).maxCoeff(&predicted);
        d_features.col(b) = head_.weight.value.row(predicted).transpose();
    }
    return std::visit([&](const auto& e) { return e.pooled_map_gradient(d_features); }, encoder_);
}

std::vector<Parameter*> Backbone::parameters() {
    auto out = std::visit([](auto& e) { return e.parameters(); }, encoder_);
    out.push_back(&head_.weight);
    out.push_back(&head_.bias);
    out.push_back(&projector_.fc.weight);
    out.push_back(&projector_.fc.bias);
    return out;
}

std::vector<const Parameter*> Backbone::parameters() const {
    auto mut = const_cast<Backbone*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

void Backbone::zero_grad() {
    for (auto* p : parameters()) p->grad.setZero();
}

Matrix softmax_columns(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index b = 0; b < logits.cols(); ++b) {
        const Vector shifted = logits.col(b).array() - logits.col(b).maxCoeff();
        const Vector e = shifted.array().exp();
        out.col(b) = e / e.sum();
    }
    return out;
}

Matrix gather_inputs(std::span<const Sample> samples, std::span<const std::size_t> indices) {
    if (indices.empty()) return Matrix();
    const auto dim = samples[indices.front()].input.size();
    Matrix x(dim, static_cast<Eigen::Index>(indices.size()));
    for (std::size_t b = 0; b < indices.size(); ++b) {
        x.col(static_cast<Eigen::Index>(b)) = Eigen::Map<const Vector>(samples[indices[b]].input.data(), dim);
    }
    return x;
}

Matrix gather_inputs(std::span<const Sample> samples) {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather_inputs(samples, idx);
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'E', 'N', 'C', 'O', 'F', 'A', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <class T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const std::filesystem::path& file) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError(file.string() + ": truncated checkpoint");
    return v;
}

nlohmann::json describe(const BackboneSpec& s) {
    return {{"family", std::string(to_string(s.family))},
            {"input", {{"channels", s.input.channels}, {"height", s.input.height}, {"width", s.input.width}}},
            {"num_classes", s.num_classes},
            {"feature_dim", s.feature_dim},
            {"projection_dim", s.projection_dim},
            {"hidden", s.hidden}};
}

BackboneSpec parse_descriptor(const nlohmann::json& j) {
    BackboneSpec s;
    s.family = parse_backbone_family(j.at("family").get<std::string>());
    s.input = InputShape{j.at("input").at("channels").get<int>(), j.at("input").at("height").get<int>(),
                         j.at("input").at("width").get<int>()};
    s.num_classes = j.at("num_classes").get<int>();
    s.feature_dim = j.at("feature_dim").get<int>();
    s.projection_dim = j.at("projection_dim").get<int>();
    s.hidden = j.at("hidden").get<std::vector<int>>();
    return s;
}

}  // namespace

void save_checkpoint(const Backbone& model, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + file.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    const std::string descriptor = describe(model.spec()).dump();
    write_pod<std::uint64_t>(out, descriptor.size());
    out.write(descriptor.data(), static_cast<std::streamsize>(descriptor.size()));
    const auto params = model.parameters();
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
        out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.rows()));
        write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.cols()));
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!out) throw DataError("failed writing checkpoint " + file.string());
}

Backbone load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint " + file.string());
    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError(file.string() + ": not an ENCOFA checkpoint");
    const auto version = read_pod<std::uint32_t>(in, file);
    if (version != kCheckpointVersion)
        throw DataError(file.string() + ": unsupported checkpoint version " + std::to_string(version));
    std::string descriptor(read_pod<std::uint64_t>(in, file), '\0');
    if (!in.read(descriptor.data(), static_cast<std::streamsize>(descriptor.size())))
        throw DataError(file.string() + ": truncated checkpoint");
    BackboneSpec spec;
    try {
        spec = parse_descriptor(nlohmann::json::parse(descriptor));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(file.string() + ": bad descriptor: " + e.what());
    }
    Backbone model(spec, 0);
    auto params = model.parameters();
    if (read_pod<std::uint32_t>(in, file) != params.size())
        throw DataError(file.string() + ": parameter count mismatch");
    for (auto* p : params) {
        std::string name(read_pod<std::uint32_t>(in, file), '\0');
        in.read(name.data(), static_cast<std::streamsize>(name.size()));
        const auto rows = read_pod<std::uint64_t>(in, file);
        const auto cols = read_pod<std::uint64_t>(in, file);
        if (name != p->name || rows != static_cast<std::uint64_t>(p->value.rows()) ||
            cols != static_cast<std::uint64_t>(p->value.cols()))
            throw DataError(file.string() + ": parameter '" + name + "' does not match the architecture");
        if (!in.read(reinterpret_cast<char*>(p->value.data()),
                     static_cast<std::streamsize>(p->value.size() * sizeof(double))))
            throw DataError(file.string() + ": truncated checkpoint");
    }
    return model;
}

// ---------------------------------------------------------------- weak augmentation

WeakAugmenter::WeakAugmenter(InputShape shape, std::span<const Sample> train, WeakAugmentConfig config)
    : shape_(shape), config_(config), sigma_(Vector::Zero(static_cast<Eigen::Index>(shape.size()))) {
    if (shape_.is_image() || train.empty()) return;
    const auto dim = shape_.size();
    Vector mean = Vector::Zero(dim);
    for (const auto& s : train) mean += Eigen::Map<const Vector>(s.input.data(), dim);
    mean /= static_cast<double>(train.size());
    Vector var = Vector::Zero(dim);
    for (const auto& s : train) var += (Eigen::Map<const Vector>(s.input.data(), dim) - mean).array().square().matrix();
    sigma_ = config_.jitter_scale * (var / static_cast<double>(train.size())).cwiseSqrt();
}

std::vector<double> WeakAugmenter::operator()(std::span<const double> input, Rng& rng) const {
    std::vector<double> out(input.begin(), input.end());
    if (!config_.enabled) return out;
    if (shape_.is_image()) {
        if (config_.horizontal_flip && rng.bernoulli(0.5)) out = flip_horizontal(out, shape_);
        const double angle = rng.uniform(-config_.max_rotation_degrees, config_.max_rotation_degrees);
        return rotate_image(out, shape_, angle);
    }
    for (std::size_t j = 0; j < out.size(); ++j) {
        const double z = std::clamp(rng.normal(), -kJitterClip, kJitterClip);
        out[j] += z * sigma_(static_cast<Eigen::Index>(j));
    }
    return out;
}

std::vector<double> rotate_image(std::span<const double> image, InputShape shape, double degrees) {
    const int h = shape.height, w = shape.width;
    const cv::Mat rot = cv::getRotationMatrix2D(cv::Point2f((w - 1) / 2.0f, (h - 1) / 2.0f), degrees, 1.0);
    std::vector<double> out(image.size());
    for (int ch = 0; ch < shape.channels; ++ch) {
        const auto offset = static_cast<std::size_t>(ch) * h * w;
        const cv::Mat src(h, w, CV_64F, const_cast<double*>(image.data() + offset));
        cv::Mat dst(h, w, CV_64F, out.data() + offset);
        cv::warpAffine(src, dst, rot, dst.size(), cv::INTER_LINEAR, cv::BORDER_REPLICATE);
    }
    return out;
}

std::vector<double> flip_horizontal(std::span<const double> image, InputShape shape) {
    const int h = shape.height, w = shape.width;
    std::vector<double> out(image.size());
    for (int ch = 0; ch < shape.channels; ++ch) {
        const auto offset = static_cast<std::size_t>(ch) * h * w;
        const cv::Mat src(h, w, CV_64F, const_cast<double*>(image.data() + offset));
        cv::Mat dst(h, w, CV_64F, out.data() + offset);
        cv::flip(src, dst, 1);
    }
    return out;
}

}  // namespace encofa
