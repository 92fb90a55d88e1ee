#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "snbi/errors.hpp"

namespace snbi {

enum class Modality { WLI, NBI, SNBI };

enum class PolypClass { Hyperplastic, Adenoma, Unknown };

enum class Split { Train, Val, Test };

std::string to_string(Modality m);
std::string to_string(PolypClass c);
std::string to_string(Split s);
Modality modality_from_string(const std::string& s);
PolypClass polyp_class_from_string(const std::string& s);
Split split_from_string(const std::string& s);

/// Axis-aligned box in native pixel coordinates, corner form with half-open
/// extent: a box covering pixel columns [x_min, x_max) and rows [y_min, y_max).
struct BoundingBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }

    bool valid() const {
        return x_min >= 0.0 && y_min >= 0.0 && x_min < x_max && y_min < y_max;
    }

    bool within(int image_width, int image_height) const {
        return valid() && x_max <= static_cast<double>(image_width) &&
               y_max <= static_cast<double>(image_height);
    }

    bool operator==(const BoundingBox&) const = default;
};

struct Annotation {
    BoundingBox box;
    PolypClass polyp_class = PolypClass::Unknown;

    bool operator==(const Annotation&) const = default;
};

/// Scored box emitted by a detector.
struct Detection {
    BoundingBox box;
    double confidence = 0.0;
    PolypClass predicted_class = PolypClass::Unknown;

    bool operator==(const Detection&) const = default;
};

struct ImageRecord {
    std::string id;
    std::string path;
    Modality modality = Modality::WLI;
    std::string clip_id;
    int width = 0;
    int height = 0;
    std::vector<Annotation> annotations;
    std::optional<std::string> source_id; // set only for SNBI records

    bool operator==(const ImageRecord&) const = default;
};

struct DatasetManifest {
    std::string name;
    std::vector<ImageRecord> records;
    std::map<std::string, Split> split_assignment;

    /// Directory the manifest was loaded from; used to resolve relative
    /// record paths. Not serialized and excluded from equality.
    std::string base_dir;

    const ImageRecord* find(const std::string& id) const {
        for (const auto& r : records)
            if (r.id == id) return &r;
        return nullptr;
    }

    std::optional<Split> split_of(const std::string& id) const {
        auto it = split_assignment.find(id);
        if (it == split_assignment.end()) return std::nullopt;
        return it->second;
    }

    std::vector<const ImageRecord*> split_records(Split s) const {
        std::vector<const ImageRecord*> out;
        for (const auto& r : records) {
            auto it = split_assignment.find(r.id);
            if (it != split_assignment.end() && it->second == s) out.push_back(&r);
        }
        return out;
    }

    bool operator==(const DatasetManifest& other) const {
        return name == other.name && records == other.records &&
               split_assignment == other.split_assignment;
    }
};

/// Resolves a record path against the manifest's base directory.
std::string resolve_path(const DatasetManifest& manifest, const ImageRecord& record);

/// Parses the trailing frame counter out of ids of the form "<stem>_f<NNN>".
/// Returns -1 when the id carries no frame counter.
long frame_index_of(const std::string& record_id);

/// Throws ValidationError naming the offending record when any
/// DatasetManifest invariant is broken.
void validate(const DatasetManifest& manifest);

/// Concatenates records and split assignments; record ids must stay unique.
DatasetManifest merge_manifests(const DatasetManifest& a, const DatasetManifest& b,
                                const std::string& name);

/// Copy of the manifest restricted to one modality (splits restricted too).
DatasetManifest filter_modality(const DatasetManifest& manifest, Modality m);

} // namespace snbi
