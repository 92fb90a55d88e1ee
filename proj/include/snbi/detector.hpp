#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "snbi/nn.hpp"
#include "snbi/types.hpp"

namespace snbi::detector {

struct DetectorConfig {
    int image_size = 512;
    int epochs = 20;
    double base_lr = 1e-3;
    double confidence_floor = 0.05; // detections below this are never emitted
    std::vector<PolypClass> classes = {PolypClass::Hyperplastic, PolypClass::Adenoma};
    uint64_t seed = 0;

    int width = 16; // backbone base width
    int downs = 2;  // stride-2 stages; anchor grid stride = 2^downs
    std::vector<double> anchor_scales = {2.0, 3.5, 5.0}; // square anchors, units of stride
    double nms_iou = 0.5;
    double pos_iou = 0.5; // anchor IoU at or above -> positive
    double neg_iou = 0.4; // anchor max IoU below -> negative, else ignored
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    int iterations_per_epoch = 0; // 0 = number of train records
    int image_cache_size = 512;

    /// Desk-scale preset trained on 64 px synthetic scenes.
    static DetectorConfig tiny();

    void validate_fields() const;
};

struct InverseTransform {
    double scale_x = 1.0; // resized -> native
    double scale_y = 1.0;

    BoundingBox apply(const BoundingBox& b) const {
        return {b.x_min * scale_x, b.y_min * scale_y, b.x_max * scale_x, b.y_max * scale_y};
    }
};

struct PreprocessResult {
    cv::Mat image;                  // image_size x image_size
    std::vector<BoundingBox> boxes; // in resized coordinates
    InverseTransform inverse;
};

/// Aspect-distorting resize to image_size squared with coordinate mapping;
/// inverse.apply recovers native boxes within a pixel.
PreprocessResult preprocess(const cv::Mat& image, const std::vector<BoundingBox>& boxes,
                            int image_size);

struct DetectorCheckpoint {
    nn::DetectorNet net;
    DetectorConfig config;
    std::string fingerprint_dataset; // training manifest name
    Modality fingerprint_modality = Modality::WLI;
    double val_threshold = 0.5; // max-F1 threshold on validation at best epoch
    double best_val_f1 = 0.0;
    int best_epoch = -1;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_f1 = 0.0;
    double val_threshold = 0.0;
};

/// Trains the reference single-stage detector on the manifest's train split,
/// logging per-epoch validation loss and keeping the checkpoint with the best
/// validation F1 at its selected threshold (ties keep the earlier epoch).
DetectorCheckpoint train_detector(const DetectorConfig& config,
                                  const DatasetManifest& manifest,
                                  Split train_split = Split::Train,
                                  Split val_split = Split::Val,
                                  const std::string& ckpt_dir = "",
                                  std::vector<EpochStats>* history = nullptr);

/// Runs the detector on one image: decoded boxes in native coordinates,
/// per-class non-maximum suppression, descending confidence.
std::vector<Detection> detect(const DetectorCheckpoint& checkpoint, const cv::Mat& image);

/// Convenience: detect over every record of a split, keyed by record id.
std::map<std::string, std::vector<Detection>> detect_split(const DetectorCheckpoint& ckpt,
                                                           const DatasetManifest& manifest,
                                                           Split split);

void save_detector(const DetectorCheckpoint& ckpt, const std::string& dir);
DetectorCheckpoint load_detector(const std::string& dir);

/// Exposed for tests: anchor grid in resized coordinates.
std::vector<BoundingBox> anchor_boxes(const DetectorConfig& config);

} // namespace snbi::detector
