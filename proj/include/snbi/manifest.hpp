#pragma once

#include <map>
#include <string>
#include <vector>

#include "snbi/types.hpp"

namespace snbi {

/// Line-delimited JSON manifest: first line is a header object carrying the
/// dataset name and split assignment, every following line is one record.
/// Annotation boxes are written as integer pixel corners.
DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

/// Per-image detections keyed by record id.
using PredictionSet = std::map<std::string, std::vector<Detection>>;

/// Predictions file: line-delimited JSON, one detection per line
/// (image id, box corners, confidence, class).
PredictionSet load_predictions(const std::string& path);
void save_predictions(const PredictionSet& preds, const std::string& path);

} // namespace snbi
