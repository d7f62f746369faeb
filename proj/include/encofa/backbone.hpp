#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "encofa/common.hpp"
#include "encofa/dataset.hpp"

namespace encofa {

// Batches are column-major: one sample per column.

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
};

// `record` keeps the activations needed by the matching backward call;
// `inference` leaves the layer state untouched.
enum class Pass { inference, record };

class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in, int out);

    void initialize(Rng& rng);
    Matrix infer(const Matrix& x) const;
    Matrix forward(const Matrix& x, Pass pass);
    Matrix backward(const Matrix& dy);
    const Matrix& recorded_input() const noexcept { return input_; }

    int in_features() const { return static_cast<int>(weight.value.cols()); }
    int out_features() const { return static_cast<int>(weight.value.rows()); }

    Parameter weight;
    Parameter bias;

private:
    Matrix input_;
};

// 3x3 convolution, stride 1, zero padding 1.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, int in_channels, int out_channels, int height, int width);

    void initialize(Rng& rng);
    Matrix infer(const Matrix& x) const;
    Matrix forward(const Matrix& x, Pass pass);
    Matrix backward(const Matrix& dy);

    Parameter weight;  // out x (in * 9)
    Parameter bias;    // out x 1

private:
    Matrix im2col(const double* image) const;
    void col2im(const Matrix& cols, double* image) const;

    int in_channels_ = 0, out_channels_ = 0, height_ = 0, width_ = 0;
    Matrix input_;
};

class MlpEncoder {
public:
    MlpEncoder(int input_dim, const std::vector<int>& hidden, int feature_dim);

    void initialize(Rng& rng);
    Matrix infer(const Matrix& x) const;
    Matrix forward(const Matrix& x, Pass pass);
    void backward(const Matrix& d_features);
    Matrix pooled_map_gradient(const Matrix& d_features) const;
    std::vector<Parameter*> parameters();
    bool recorded() const { return !masks_.empty(); }

private:
    std::vector<Linear> layers_;
    std::vector<Matrix> masks_;
};

// conv-relu-avgpool stages followed by a final conv-relu and global average
// pooling. The final conv output is the feature map used for channel
// gradients.
class CnnEncoder {
public:
    CnnEncoder(InputShape input, const std::vector<int>& channels, int feature_dim);

    void initialize(Rng& rng);
    Matrix infer(const Matrix& x) const;
    Matrix forward(const Matrix& x, Pass pass);
    void backward(const Matrix& d_features);
    Matrix pooled_map_gradient(const Matrix& d_features) const;
    std::vector<Parameter*> parameters();
    bool recorded() const { return !masks_.empty(); }

private:
    struct Stage {
        Conv2d conv;
        int channels, height, width;  // conv output geometry
        bool pool;
    };
    std::vector<Stage> stages_;
    std::vector<Matrix> masks_;
};

class Projector {
public:
    Projector() = default;
    Projector(int feature_dim, int projection_dim);

    void initialize(Rng& rng);
    Matrix infer(const Matrix& features) const;
    Matrix forward(const Matrix& features, Pass pass);
    Matrix backward(const Matrix& d_projected);

    Linear fc;

private:
    Matrix raw_;
};

enum class BackboneFamily { mlp, cnn };

std::string_view to_string(BackboneFamily family);
BackboneFamily parse_backbone_family(std::string_view text);

struct BackboneSpec {
    BackboneFamily family = BackboneFamily::mlp;
    InputShape input;
    int num_classes = 2;
    int feature_dim = 32;
    int projection_dim = 32;
    // Hidden widths (mlp) or conv stage channels (cnn).
    std::vector<int> hidden = {64};

    bool operator==(const BackboneSpec&) const = default;
};

class Backbone {
public:
    Backbone(BackboneSpec spec, std::uint64_t seed);

    const BackboneSpec& spec() const noexcept { return spec_; }

    // Encoder: inputs (D x B) -> features (d x B).
    Matrix encode(const Matrix& inputs, Pass pass);
    // FC head: features -> logits (K x B).
    Matrix logits(const Matrix& features, Pass pass);
    // Projector: features -> unit-norm columns.
    Matrix project(const Matrix& features, Pass pass);

    // Inference helpers, no recorded state.
    Matrix encode(const Matrix& inputs) const;
    Matrix logits(const Matrix& features) const;
    Matrix project(const Matrix& features) const;
    Matrix probabilities(const Matrix& features) const;
    Matrix predict_proba(const Matrix& inputs) const;

    Matrix head_backward(const Matrix& d_logits);
    Matrix projector_backward(const Matrix& d_projected);
    void encoder_backward(const Matrix& d_features);

    // Pooled gradient of the predicted-class logit with respect to the last
    // feature map, one column per sample of the last recorded encode + logits.
    Matrix record_channel_gradients() const;

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    void zero_grad();

    const Linear& head() const noexcept { return head_; }

private:
    BackboneSpec spec_;
    std::variant<MlpEncoder, CnnEncoder> encoder_;
    Linear head_;
    Projector projector_;
    bool head_recorded_ = false;
    Eigen::Index recorded_batch_ = -1;
};

Matrix softmax_columns(const Matrix& logits);

// Gathers sample inputs into a D x B matrix.
Matrix gather_inputs(std::span<const Sample> samples, std::span<const std::size_t> indices);
Matrix gather_inputs(std::span<const Sample> samples);

// Binary checkpoint: magic "ENCOFACK", u32 version, u64 descriptor length,
// JSON architecture descriptor, u32 parameter count, then per parameter
// u32 name length, name, u64 rows, u64 cols, rows*cols little-endian f64
// in column-major order.
void save_checkpoint(const Backbone& model, const std::filesystem::path& file);
Backbone load_checkpoint(const std::filesystem::path& file);

struct WeakAugmentConfig {
    bool enabled = true;
    double jitter_scale = 0.05;
    double max_rotation_degrees = 10.0;
    bool horizontal_flip = true;
};

// Label-preserving perturbation. Images: random horizontal flip and a random
// rotation in [-max, max] degrees. Vectors: Gaussian jitter with per-dimension
// sigma = jitter_scale * std of the training data, clipped at kJitterClip sigma.
class WeakAugmenter {
public:
    static constexpr double kJitterClip = 3.0;

    WeakAugmenter(InputShape shape, std::span<const Sample> train, WeakAugmentConfig config);

    std::vector<double> operator()(std::span<const double> input, Rng& rng) const;
    const Vector& jitter_sigma() const noexcept { return sigma_; }
    const WeakAugmentConfig& config() const noexcept { return config_; }

private:
    InputShape shape_;
    WeakAugmentConfig config_;
    Vector sigma_;
};

// Bilinear rotation about the image center with edge replication.
std::vector<double> rotate_image(std::span<const double> image, InputShape shape, double degrees);
std::vector<double> flip_horizontal(std::span<const double> image, InputShape shape);

}  // namespace encofa
