#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "snbi/rng.hpp"
#include "snbi/tensor.hpp"

namespace snbi::nn {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// 2-D convolution with its own padding (zero or reflect) and optional bias.
struct Conv2d {
    Tensor w;
    Tensor b;
    int stride = 1;
    int pad = 0;
    PadMode pad_mode = PadMode::Zero;

    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, PadMode mode, bool bias,
           Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct InstanceNorm {
    Tensor gamma;
    Tensor beta;

    InstanceNorm() = default;
    explicit InstanceNorm(int channels);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct ResidualBlock {
    Conv2d conv1, conv2;
    InstanceNorm norm1, norm2;

    ResidualBlock() = default;
    ResidualBlock(int channels, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

/// Residual encoder-decoder image translator: 2x stride-2 downsampling,
/// n_res residual blocks, 2x nearest-neighbor upsampling, tanh output in
/// [-1, 1]. Input spatial size must be divisible by 4.
struct ResnetGenerator {
    int base_width = 64;
    int n_res = 9;
    Conv2d head;
    InstanceNorm head_norm;
    Conv2d down1, down2;
    InstanceNorm down1_norm, down2_norm;
    std::vector<ResidualBlock> blocks;
    Conv2d up1, up2;
    InstanceNorm up1_norm, up2_norm;
    Conv2d tail;

    ResnetGenerator() = default;
    ResnetGenerator(int base_width, int n_res, Rng& rng);
    Tensor forward(const Tensor& x) const;
    NamedParams named_params() const;
};

/// Patch-level discriminator: stack of stride-2 4x4 convolutions ending in a
/// 1-channel realness map.
struct PatchDiscriminator {
    int base_width = 64;
    int n_layers = 3;
    std::vector<Conv2d> convs;
    std::vector<InstanceNorm> norms; // norms[0] unused (no norm after first conv)
    Conv2d tail;

    PatchDiscriminator() = default;
    PatchDiscriminator(int base_width, int n_layers, Rng& rng);
    Tensor forward(const Tensor& x) const;
    NamedParams named_params() const;
};

/// Single-stage anchor-grid detector backbone + heads. Produces per-anchor
/// class logits [N, A*C, G, G] and box deltas [N, A*4, G, G] on a grid of
/// stride 2^downs.
struct DetectorNet {
    int width = 16;
    int downs = 2;
    int n_anchors = 3;
    int n_classes = 2;
    Conv2d stem;
    InstanceNorm stem_norm;
    std::vector<Conv2d> down_convs;
    std::vector<InstanceNorm> down_norms;
    Conv2d mid;
    InstanceNorm mid_norm;
    Conv2d cls_head;
    Conv2d box_head;

    DetectorNet() = default;
    DetectorNet(int width, int downs, int n_anchors, int n_classes, Rng& rng);
    std::pair<Tensor, Tensor> forward(const Tensor& x) const; // (cls logits, box deltas)
    NamedParams named_params() const;
};

void set_requires_grad(const NamedParams& params, bool value);
void zero_grads(const NamedParams& params);

/// Adam with decoupled state; lr is passed per step so schedules stay outside.
class Adam {
public:
    Adam() = default;
    Adam(NamedParams params, double beta1, double beta2, double eps = 1e-8);

    void step(double lr);
    void zero_grad();
    int64_t steps() const { return t_; }

    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    NamedParams params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
};

/// Binary tensor container: little-endian doubles with named, shaped entries.
void save_params(const NamedParams& params, const std::string& path);
void load_params(const NamedParams& params, const std::string& path); // shapes must match

} // namespace snbi::nn
