#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "snbi/types.hpp"

namespace snbi::ingest {

/// Focus-measure response; higher means sharper.
struct BlurScore {
    double value = 0.0;
};

struct CropRegion {
    BoundingBox box;
    bool degenerate = false; // set when the full image was returned as a guard
};

/// Variance of the Laplacian over the grayscale image. Zero for constant
/// images, invariant to constant brightness offsets.
BlurScore blur_score(const cv::Mat& image);

/// Minimal rectangle covering all rows/columns whose mean intensity reaches
/// intensity_threshold. Falls back to the full image (degenerate flag) when
/// nothing qualifies or the region would drop below min_fraction of the area.
std::pair<cv::Mat, CropRegion> crop_black_borders(const cv::Mat& image,
                                                  double intensity_threshold = 10.0,
                                                  double min_fraction = 0.25);

/// One tight box per 8-connected foreground component with at least min_area
/// pixels; boxes sorted by (y_min, x_min). The mask must be strictly binary.
std::vector<BoundingBox> mask_to_bboxes(const cv::Mat& mask, int min_area = 64);

/// Decodes every stride-th frame of the video into out_dir as PNG files and
/// returns records with clip_id = the video's stem and ids carrying the frame
/// index ("<clip>_f<NNNNNN>").
std::vector<ImageRecord> extract_frames(const std::string& video_path, int stride,
                                        const std::string& out_dir);

struct FilterResult {
    std::vector<ImageRecord> kept;
    std::vector<ImageRecord> dropped;
    std::vector<std::pair<std::string, std::string>> failed; // (record id, reason)
    std::map<std::string, double> scores;
};

/// Keeps records whose blur score is at or above the threshold. Image load
/// failures are reported per record, never thrown.
FilterResult filter_blurry(const std::vector<ImageRecord>& records,
                           const DatasetManifest& manifest, double threshold);

/// Two-cluster (Otsu) split of a score distribution; used to derive a blur
/// threshold from the histogram's lower mode when none is configured.
double suggest_blur_threshold(const std::vector<double>& scores);

/// Reassigns splits at clip granularity. Fraction order decides how leftover
/// clips from rounding are distributed (largest remainder first).
DatasetManifest split_dataset(const DatasetManifest& manifest,
                              const std::vector<std::pair<Split, double>>& fractions,
                              uint64_t seed);

enum class BoxFormat { Corners, Size }; // (x1,y1,x2,y2) vs (x,y,w,h)

struct VideoIngestOptions {
    std::string videos_dir;
    std::string masks_dir; // optional; empty for unannotated clips
    int stride = 1;
    std::optional<double> blur_threshold; // unset = auto from score histogram
    bool blur_filter = true;
    std::string frames_dir; // where extracted frames are written
    std::optional<Modality> default_modality; // when stems carry no wli/nbi token
    int min_mask_area = 64;
};

/// Full video pipeline: extract frames, drop blurry frames, attach boxes from
/// the nearest-in-index mask, and assemble a validated manifest.
DatasetManifest ingest_videos(const VideoIngestOptions& opt, const std::string& dataset_name);

struct StillIngestOptions {
    std::string images_dir;
    std::string boxes_file; // JSONL: image, modality, clip_id?, boxes, classes
    BoxFormat box_format = BoxFormat::Corners;
};

/// Still-image pipeline: every image gets a singleton clip unless the boxes
/// file names one.
DatasetManifest ingest_stills(const StillIngestOptions& opt, const std::string& dataset_name);

} // namespace snbi::ingest
