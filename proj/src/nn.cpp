#include "snbi/nn.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "snbi/errors.hpp"

namespace fs = std::filesystem;

namespace snbi::nn {

namespace {

Tensor gaussian_weights(Shape shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(shape, true);
    for (auto& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

} // namespace

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, PadMode mode,
               bool bias, Rng& rng)
    : stride(stride), pad(pad), pad_mode(mode) {
    w = gaussian_weights({out_ch, in_ch, kernel, kernel}, 0.02, rng);
    if (bias) b = Tensor::zeros({1, out_ch, 1, 1}, true);
}

Tensor Conv2d::forward(const Tensor& x) const {
    Tensor padded = pad > 0 ? pad2d(x, pad, pad_mode) : x;
    return conv2d(padded, w, b, stride);
}

void Conv2d::collect(const std::string& prefix, NamedParams& out) const {
    out.push_back({prefix + ".w", w});
    if (b.defined()) out.push_back({prefix + ".b", b});
}

InstanceNorm::InstanceNorm(int channels) {
    gamma = Tensor::full({1, channels, 1, 1}, 1.0, true);
    beta = Tensor::zeros({1, channels, 1, 1}, true);
}

Tensor InstanceNorm::forward(const Tensor& x) const { return instance_norm(x, gamma, beta); }

void InstanceNorm::collect(const std::string& prefix, NamedParams& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

ResidualBlock::ResidualBlock(int channels, Rng& rng)
    : conv1(channels, channels, 3, 1, 1, PadMode::Reflect, true, rng),
      conv2(channels, channels, 3, 1, 1, PadMode::Reflect, true, rng),
      norm1(channels),
      norm2(channels) {}

Tensor ResidualBlock::forward(const Tensor& x) const {
    Tensor y = relu(norm1.forward(conv1.forward(x)));
    y = norm2.forward(conv2.forward(y));
    return add(x, y);
}

void ResidualBlock::collect(const std::string& prefix, NamedParams& out) const {
    conv1.collect(prefix + ".conv1", out);
    norm1.collect(prefix + ".norm1", out);
    conv2.collect(prefix + ".conv2", out);
    norm2.collect(prefix + ".norm2", out);
}

ResnetGenerator::ResnetGenerator(int base_width, int n_res, Rng& rng)
    : base_width(base_width), n_res(n_res) {
    const int w1 = base_width, w2 = base_width * 2, w4 = base_width * 4;
    head = Conv2d(3, w1, 7, 1, 3, PadMode::Reflect, true, rng);
    head_norm = InstanceNorm(w1);
    down1 = Conv2d(w1, w2, 3, 2, 1, PadMode::Zero, true, rng);
    down1_norm = InstanceNorm(w2);
    down2 = Conv2d(w2, w4, 3, 2, 1, PadMode::Zero, true, rng);
    down2_norm = InstanceNorm(w4);
    for (int i = 0; i < n_res; ++i) blocks.emplace_back(w4, rng);
    up1 = Conv2d(w4, w2, 3, 1, 1, PadMode::Zero, true, rng);
    up1_norm = InstanceNorm(w2);
    up2 = Conv2d(w2, w1, 3, 1, 1, PadMode::Zero, true, rng);
    up2_norm = InstanceNorm(w1);
    tail = Conv2d(w1, 3, 7, 1, 3, PadMode::Reflect, true, rng);
}

Tensor ResnetGenerator::forward(const Tensor& x) const {
    const Shape s = x.shape();
    if (s.c != 3) throw ShapeError("generator: expected a 3-channel image");
    if (s.h % 4 != 0 || s.w % 4 != 0)
        throw ShapeError("generator: spatial size must be divisible by 4");
    Tensor y = relu(head_norm.forward(head.forward(x)));
    y = relu(down1_norm.forward(down1.forward(y)));
    y = relu(down2_norm.forward(down2.forward(y)));
    for (const auto& block : blocks) y = block.forward(y);
    y = relu(up1_norm.forward(up1.forward(upsample_nearest2x(y))));
    y = relu(up2_norm.forward(up2.forward(upsample_nearest2x(y))));
    return tanh_op(tail.forward(y));
}

NamedParams ResnetGenerator::named_params() const {
    NamedParams out;
    head.collect("head", out);
    head_norm.collect("head_norm", out);
    down1.collect("down1", out);
    down1_norm.collect("down1_norm", out);
    down2.collect("down2", out);
    down2_norm.collect("down2_norm", out);
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect("res" + std::to_string(i), out);
    up1.collect("up1", out);
    up1_norm.collect("up1_norm", out);
    up2.collect("up2", out);
    up2_norm.collect("up2_norm", out);
    tail.collect("tail", out);
    return out;
}

PatchDiscriminator::PatchDiscriminator(int base_width, int n_layers, Rng& rng)
    : base_width(base_width), n_layers(n_layers) {
    int in_ch = 3;
    int out_ch = base_width;
    for (int i = 0; i < n_layers; ++i) {
        convs.emplace_back(in_ch, out_ch, 4, 2, 1, PadMode::Zero, true, rng);
        norms.emplace_back(i == 0 ? InstanceNorm() : InstanceNorm(out_ch));
        in_ch = out_ch;
        out_ch = std::min(out_ch * 2, base_width * 8);
    }
    tail = Conv2d(in_ch, 1, 4, 1, 1, PadMode::Zero, true, rng);
}

Tensor PatchDiscriminator::forward(const Tensor& x) const {
    Tensor y = x;
    for (size_t i = 0; i < convs.size(); ++i) {
        y = convs[i].forward(y);
        if (i > 0) y = norms[i].forward(y);
        y = leaky_relu(y, 0.2);
    }
    return tail.forward(y);
}

NamedParams PatchDiscriminator::named_params() const {
    NamedParams out;
    for (size_t i = 0; i < convs.size(); ++i) {
        convs[i].collect("conv" + std::to_string(i), out);
        if (i > 0) norms[i].collect("norm" + std::to_string(i), out);
    }
    tail.collect("tail", out);
    return out;
}

DetectorNet::DetectorNet(int width, int downs, int n_anchors, int n_classes, Rng& rng)
    : width(width), downs(downs), n_anchors(n_anchors), n_classes(n_classes) {
    stem = Conv2d(3, width, 3, 1, 1, PadMode::Zero, true, rng);
    stem_norm = InstanceNorm(width);
    int ch = width;
    for (int i = 0; i < downs; ++i) {
        down_convs.emplace_back(ch, ch * 2, 3, 2, 1, PadMode::Zero, true, rng);
        down_norms.emplace_back(ch * 2);
        ch *= 2;
    }
    mid = Conv2d(ch, ch, 3, 1, 1, PadMode::Zero, true, rng);
    mid_norm = InstanceNorm(ch);
    cls_head = Conv2d(ch, n_anchors * n_classes, 3, 1, 1, PadMode::Zero, true, rng);
    box_head = Conv2d(ch, n_anchors * 4, 3, 1, 1, PadMode::Zero, true, rng);
    // bias the class logits towards background so early training is stable
    if (cls_head.b.defined())
        for (auto& v : cls_head.b.values()) v = -2.0;
}

std::pair<Tensor, Tensor> DetectorNet::forward(const Tensor& x) const {
    Tensor y = relu(stem_norm.forward(stem.forward(x)));
    for (size_t i = 0; i < down_convs.size(); ++i)
        y = relu(down_norms[i].forward(down_convs[i].forward(y)));
    y = relu(mid_norm.forward(mid.forward(y)));
    return {cls_head.forward(y), box_head.forward(y)};
}

NamedParams DetectorNet::named_params() const {
    NamedParams out;
    stem.collect("stem", out);
    stem_norm.collect("stem_norm", out);
    for (size_t i = 0; i < down_convs.size(); ++i) {
        down_convs[i].collect("down" + std::to_string(i), out);
        down_norms[i].collect("down" + std::to_string(i) + "_norm", out);
    }
    mid.collect("mid", out);
    mid_norm.collect("mid_norm", out);
    cls_head.collect("cls_head", out);
    box_head.collect("box_head", out);
    return out;
}

void set_requires_grad(const NamedParams& params, bool value) {
    for (const auto& [name, t] : params) t.node()->requires_grad = value;
}

void zero_grads(const NamedParams& params) {
    for (const auto& [name, t] : params) t.node()->grad.assign(t.values().size(), 0.0);
}

Adam::Adam(NamedParams params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_) {
        m_.emplace_back(t.values().size(), 0.0);
        v_.emplace_back(t.values().size(), 0.0);
    }
}

void Adam::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t p = 0; p < params_.size(); ++p) {
        auto node = params_[p].second.node();
        if (node->grad.size() != node->value.size()) continue; // no grad this step
        auto& m = m_[p];
        auto& v = v_[p];
        for (size_t i = 0; i < node->value.size(); ++i) {
            const double g = node->grad[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            node->value[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() { zero_grads(params_); }

namespace {

constexpr char kParamsMagic[8] = {'S', 'N', 'B', 'I', 'P', 'R', 'M', '1'};
constexpr char kAdamMagic[8] = {'S', 'N', 'B', 'I', 'A', 'D', 'M', '1'};

void write_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
uint64_t read_u64(std::ifstream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
void write_string(std::ofstream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string read_string(std::ifstream& in) {
    const uint64_t len = read_u64(in);
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    return s;
}
void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    write_u64(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}
std::vector<double> read_doubles(std::ifstream& in) {
    const uint64_t len = read_u64(in);
    std::vector<double> v(len);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(len * sizeof(double)));
    return v;
}

} // namespace

void save_params(const NamedParams& params, const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write params '" + path + "'");
    out.write(kParamsMagic, sizeof kParamsMagic);
    write_u64(out, params.size());
    for (const auto& [name, t] : params) {
        write_string(out, name);
        const Shape s = t.shape();
        for (int d : {s.n, s.c, s.h, s.w}) write_u64(out, static_cast<uint64_t>(d));
        write_doubles(out, t.values());
    }
    if (!out) throw IoError("write failure on '" + path + "'");
}

void load_params(const NamedParams& params, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open params '" + path + "'");
    char magic[8];
    in.read(magic, sizeof magic);
    if (std::memcmp(magic, kParamsMagic, sizeof magic) != 0)
        throw FormatError("'" + path + "' is not a parameter file");
    const uint64_t count = read_u64(in);
    if (count != params.size())
        throw FormatError("'" + path + "': expected " + std::to_string(params.size()) +
                          " tensors, found " + std::to_string(count));
    for (const auto& [name, t] : params) {
        const std::string got = read_string(in);
        if (got != name)
            throw FormatError("'" + path + "': expected tensor '" + name + "', found '" +
                              got + "'");
        Shape s;
        s.n = static_cast<int>(read_u64(in));
        s.c = static_cast<int>(read_u64(in));
        s.h = static_cast<int>(read_u64(in));
        s.w = static_cast<int>(read_u64(in));
        if (!(s == t.shape()))
            throw FormatError("'" + path + "': tensor '" + name + "' has shape " + s.str() +
                              ", expected " + t.shape().str());
        auto data = read_doubles(in);
        if (data.size() != t.values().size())
            throw FormatError("'" + path + "': tensor '" + name + "' has wrong element count");
        const_cast<Tensor&>(t).values() = std::move(data);
    }
    if (!in) throw IoError("read failure on '" + path + "'");
}

void Adam::save(const std::string& path) const {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write optimizer state '" + path + "'");
    out.write(kAdamMagic, sizeof kAdamMagic);
    write_u64(out, static_cast<uint64_t>(t_));
    write_u64(out, params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        write_string(out, params_[i].first);
        write_doubles(out, m_[i]);
        write_doubles(out, v_[i]);
    }
    if (!out) throw IoError("write failure on '" + path + "'");
}

void Adam::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open optimizer state '" + path + "'");
    char magic[8];
    in.read(magic, sizeof magic);
    if (std::memcmp(magic, kAdamMagic, sizeof magic) != 0)
        throw FormatError("'" + path + "' is not an optimizer state file");
    t_ = static_cast<int64_t>(read_u64(in));
    const uint64_t count = read_u64(in);
    if (count != params_.size())
        throw FormatError("'" + path + "': optimizer state does not match parameter list");
    for (size_t i = 0; i < params_.size(); ++i) {
        const std::string name = read_string(in);
        if (name != params_[i].first)
            throw FormatError("'" + path + "': expected state for '" + params_[i].first +
                              "', found '" + name + "'");
        m_[i] = read_doubles(in);
        v_[i] = read_doubles(in);
        if (m_[i].size() != params_[i].second.values().size())
            throw FormatError("'" + path + "': state size mismatch for '" + name + "'");
    }
    if (!in) throw IoError("read failure on '" + path + "'");
}

} // namespace snbi::nn
