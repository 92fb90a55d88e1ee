#pragma once

#include <map>
#include <string>
#include <vector>

#include "snbi/manifest.hpp"
#include "snbi/types.hpp"

namespace snbi::eval {

struct MatchCounts {
    long long tp = 0;
    long long fp = 0;
    long long fn = 0;

    MatchCounts& operator+=(const MatchCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    bool operator==(const MatchCounts&) const = default;
};

struct EvalConfig {
    double iou_threshold = 0.5;      // TP requires IoU strictly above this
    double confidence_threshold = 0.0; // detections below this are discarded
};

struct PrPoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

struct ClassMetrics {
    MatchCounts counts;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool degenerate_precision = false; // no detections above threshold
    bool degenerate_recall = false;    // no ground truth boxes
};

struct MetricsReport {
    MatchCounts counts;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool degenerate_precision = false;
    bool degenerate_recall = false;
    std::vector<PrPoint> pr_curve; // over the evaluated split, thresholds strictly increasing
    double chosen_threshold = 0.0;
    std::map<PolypClass, ClassMetrics> per_class;
};

/// Intersection over union of two corner-form boxes; 0 when disjoint.
double iou(const BoundingBox& a, const BoundingBox& b);

/// Greedy one-to-one matching: detections at or above the confidence
/// threshold, in descending confidence (ties keep input order), each claim
/// the unmatched ground truth of highest IoU when that IoU is strictly above
/// the IoU threshold. Unclaimed detections are FP, unclaimed truths FN.
MatchCounts match_detections(const std::vector<Detection>& dets,
                             const std::vector<BoundingBox>& gts,
                             const EvalConfig& config);

double precision(const MatchCounts& counts);
double recall(const MatchCounts& counts);

/// Harmonic mean 2pr/(p+r); 0 when p+r == 0.
double f1(double precision, double recall);

/// Micro-averaged PR curve over a scene set: one point per distinct
/// confidence plus the endpoints 0 and 1.
std::vector<PrPoint> pr_curve(const std::vector<std::vector<Detection>>& dets_per_image,
                              const std::vector<std::vector<BoundingBox>>& gts_per_image,
                              double iou_threshold);

/// Threshold whose point maximizes F1; ties resolve to the lowest threshold.
double select_threshold(const std::vector<PrPoint>& curve);

/// Full evaluation of a prediction set against one split of a manifest.
/// Every prediction id must belong to the split; images without predictions
/// contribute their ground truths as FN.
MetricsReport evaluate_run(const PredictionSet& predictions,
                           const DatasetManifest& manifest, Split split,
                           const EvalConfig& config);

/// Drops predictions to those whose image id belongs to the given split.
/// Throws when an id is not in the manifest at all.
PredictionSet filter_predictions(const PredictionSet& predictions,
                                 const DatasetManifest& manifest, Split split);

void write_report_markdown(const MetricsReport& report, const std::string& title,
                           const std::string& path);
void write_report_csv(const MetricsReport& report, const std::string& path);

} // namespace snbi::eval
