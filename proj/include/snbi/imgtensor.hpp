#pragma once

#include <opencv2/core.hpp>

#include "snbi/errors.hpp"
#include "snbi/tensor.hpp"

namespace snbi::nn {

/// BGR 8-bit image -> [1,3,H,W] tensor with values in [-1, 1].
inline Tensor image_to_tensor(const cv::Mat& image) {
    if (image.empty() || image.type() != CV_8UC3)
        throw ShapeError("image_to_tensor: expected a non-empty 8-bit BGR image");
    const int h = image.rows, w = image.cols;
    Tensor t = Tensor::zeros({1, 3, h, w});
    double* d = t.data();
    const size_t plane = static_cast<size_t>(h) * w;
    for (int y = 0; y < h; ++y) {
        const cv::Vec3b* row = image.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            d[0 * plane + i] = row[x][0] / 127.5 - 1.0;
            d[1 * plane + i] = row[x][1] / 127.5 - 1.0;
            d[2 * plane + i] = row[x][2] / 127.5 - 1.0;
        }
    }
    return t;
}

/// [N,3,H,W] tensor in [-1, 1] -> BGR 8-bit image (batch item n).
inline cv::Mat tensor_to_image(const Tensor& t, int n = 0) {
    const Shape s = t.shape();
    if (s.c != 3 || n >= s.n) throw ShapeError("tensor_to_image: need a [N,3,H,W] tensor");
    cv::Mat image(s.h, s.w, CV_8UC3);
    const double* d = t.data() + static_cast<size_t>(n) * 3 * s.h * s.w;
    const size_t plane = static_cast<size_t>(s.h) * s.w;
    for (int y = 0; y < s.h; ++y) {
        cv::Vec3b* row = image.ptr<cv::Vec3b>(y);
        for (int x = 0; x < s.w; ++x) {
            const size_t i = static_cast<size_t>(y) * s.w + x;
            for (int c = 0; c < 3; ++c) {
                const double v = (d[c * plane + i] + 1.0) * 127.5;
                row[x][c] = static_cast<uchar>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return image;
}

/// Stacks same-shaped [1,C,H,W] tensors along the batch dimension.
inline Tensor stack_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw ShapeError("stack_batch: empty batch");
    const Shape s0 = items[0].shape();
    Shape os{static_cast<int>(items.size()) * s0.n, s0.c, s0.h, s0.w};
    Tensor out = Tensor::zeros(os);
    size_t offset = 0;
    for (const auto& item : items) {
        if (!(item.shape() == s0)) throw ShapeError("stack_batch: shape mismatch");
        std::copy(item.values().begin(), item.values().end(), out.values().begin() + offset);
        offset += item.values().size();
    }
    return out;
}

} // namespace snbi::nn
