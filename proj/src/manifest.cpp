#include "snbi/manifest.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "snbi/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace snbi {

std::string to_string(Modality m) {
    switch (m) {
        case Modality::WLI: return "WLI";
        case Modality::NBI: return "NBI";
        case Modality::SNBI: return "SNBI";
    }
    throw ValidationError("unknown modality tag");
}

std::string to_string(PolypClass c) {
    switch (c) {
        case PolypClass::Hyperplastic: return "hyperplastic";
        case PolypClass::Adenoma: return "adenoma";
        case PolypClass::Unknown: return "unknown";
    }
    throw ValidationError("unknown polyp class tag");
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    throw ValidationError("unknown split tag");
}

Modality modality_from_string(const std::string& s) {
    if (s == "WLI") return Modality::WLI;
    if (s == "NBI") return Modality::NBI;
    if (s == "SNBI") return Modality::SNBI;
    throw FormatError("unknown modality '" + s + "'");
}

PolypClass polyp_class_from_string(const std::string& s) {
    if (s == "hyperplastic") return PolypClass::Hyperplastic;
    if (s == "adenoma") return PolypClass::Adenoma;
    if (s == "unknown") return PolypClass::Unknown;
    throw FormatError("unknown polyp class '" + s + "'");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw FormatError("unknown split '" + s + "'");
}

std::string resolve_path(const DatasetManifest& manifest, const ImageRecord& record) {
    fs::path p(record.path);
    if (p.is_absolute() || manifest.base_dir.empty()) return record.path;
    return (fs::path(manifest.base_dir) / p).string();
}

long frame_index_of(const std::string& record_id) {
    auto pos = record_id.rfind("_f");
    if (pos == std::string::npos || pos + 2 >= record_id.size()) return -1;
    long value = 0;
    for (size_t i = pos + 2; i < record_id.size(); ++i) {
        char c = record_id[i];
        if (c < '0' || c > '9') return -1;
        value = value * 10 + (c - '0');
    }
    return value;
}

void validate(const DatasetManifest& manifest) {
    std::set<std::string> ids;
    for (const auto& r : manifest.records) {
        if (r.id.empty())
            throw ValidationError("manifest '" + manifest.name + "': record with empty id");
        if (!ids.insert(r.id).second)
            throw ValidationError("manifest '" + manifest.name + "': duplicate record id '" + r.id + "'");
        if (r.width <= 0 || r.height <= 0)
            throw ValidationError("record '" + r.id + "': non-positive image size");
        if (r.clip_id.empty())
            throw ValidationError("record '" + r.id + "': empty clip_id");
        for (const auto& a : r.annotations) {
            if (!a.box.within(r.width, r.height)) {
                std::ostringstream os;
                os << "record '" << r.id << "': annotation box (" << a.box.x_min << ","
                   << a.box.y_min << "," << a.box.x_max << "," << a.box.y_max
                   << ") outside image bounds " << r.width << "x" << r.height;
                throw ValidationError(os.str());
            }
        }
        if (r.modality == Modality::SNBI && (!r.source_id || r.source_id->empty()))
            throw ValidationError("record '" + r.id + "': SNBI record without source_id");
        if (r.modality != Modality::SNBI && r.source_id)
            throw ValidationError("record '" + r.id + "': source_id set on non-SNBI record");
    }
    // split keys must resolve, and a clip may live in only one split
    std::map<std::string, Split> clip_split;
    for (const auto& [id, split] : manifest.split_assignment) {
        const ImageRecord* rec = manifest.find(id);
        if (!rec)
            throw ValidationError("manifest '" + manifest.name + "': split assignment for unknown record '" + id + "'");
        auto [it, inserted] = clip_split.emplace(rec->clip_id, split);
        if (!inserted && it->second != split)
            throw ValidationError("clip '" + rec->clip_id + "' is assigned to both '" +
                                  to_string(it->second) + "' and '" + to_string(split) +
                                  "' (record '" + id + "')");
    }
}

namespace {

long long require_int(const json& j, const std::string& field, const std::string& ctx) {
    if (!j.contains(field) || !j[field].is_number_integer())
        throw FormatError(ctx + ": missing or non-integer field '" + field + "'");
    return j[field].get<long long>();
}

std::string require_str(const json& j, const std::string& field, const std::string& ctx) {
    if (!j.contains(field) || !j[field].is_string())
        throw FormatError(ctx + ": missing or non-string field '" + field + "'");
    return j[field].get<std::string>();
}

ImageRecord record_from_json(const json& j, const std::string& ctx) {
    ImageRecord r;
    r.id = require_str(j, "id", ctx);
    r.path = require_str(j, "path", ctx);
    r.modality = modality_from_string(require_str(j, "modality", ctx));
    r.clip_id = require_str(j, "clip_id", ctx);
    r.width = static_cast<int>(require_int(j, "width", ctx));
    r.height = static_cast<int>(require_int(j, "height", ctx));
    if (j.contains("annotations")) {
        if (!j["annotations"].is_array())
            throw FormatError(ctx + ": 'annotations' is not an array");
        for (const auto& aj : j["annotations"]) {
            if (!aj.contains("box") || !aj["box"].is_array() || aj["box"].size() != 4)
                throw FormatError(ctx + ": annotation without a 4-element 'box'");
            Annotation a;
            a.box.x_min = aj["box"][0].get<double>();
            a.box.y_min = aj["box"][1].get<double>();
            a.box.x_max = aj["box"][2].get<double>();
            a.box.y_max = aj["box"][3].get<double>();
            a.polyp_class = aj.contains("class")
                                ? polyp_class_from_string(aj["class"].get<std::string>())
                                : PolypClass::Unknown;
            r.annotations.push_back(a);
        }
    }
    if (j.contains("source_id")) r.source_id = j["source_id"].get<std::string>();
    return r;
}

json record_to_json(const ImageRecord& r) {
    json j;
    j["id"] = r.id;
    j["path"] = r.path;
    j["modality"] = to_string(r.modality);
    j["clip_id"] = r.clip_id;
    j["width"] = r.width;
    j["height"] = r.height;
    json anns = json::array();
    for (const auto& a : r.annotations) {
        json aj;
        aj["box"] = {static_cast<long long>(std::llround(a.box.x_min)),
                     static_cast<long long>(std::llround(a.box.y_min)),
                     static_cast<long long>(std::llround(a.box.x_max)),
                     static_cast<long long>(std::llround(a.box.y_max))};
        aj["class"] = to_string(a.polyp_class);
        anns.push_back(aj);
    }
    j["annotations"] = anns;
    if (r.source_id) j["source_id"] = *r.source_id;
    return j;
}

} // namespace

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path + "'");

    DatasetManifest m;
    m.base_dir = fs::path(path).parent_path().string();

    std::string line;
    int line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string ctx = path + ":" + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(ctx + ": invalid JSON (" + std::string(e.what()) + ")");
        }
        if (!have_header) {
            if (!j.contains("manifest"))
                throw FormatError(ctx + ": first line must be a header object with a 'manifest' field");
            m.name = j["manifest"].get<std::string>();
            if (j.contains("splits")) {
                for (const auto& [id, sv] : j["splits"].items())
                    m.split_assignment[id] = split_from_string(sv.get<std::string>());
            }
            have_header = true;
            continue;
        }
        m.records.push_back(record_from_json(j, ctx));
    }
    if (!have_header) throw FormatError(path + ": empty manifest file (missing header line)");
    validate(m);
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    validate(manifest);
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest '" + path + "'");

    json header;
    header["manifest"] = manifest.name;
    json splits = json::object();
    for (const auto& [id, s] : manifest.split_assignment) splits[id] = to_string(s);
    header["splits"] = splits;
    out << header.dump() << "\n";
    for (const auto& r : manifest.records) out << record_to_json(r).dump() << "\n";
    if (!out) throw IoError("write failure on '" + path + "'");
}

DatasetManifest merge_manifests(const DatasetManifest& a, const DatasetManifest& b,
                                const std::string& name) {
    DatasetManifest m;
    m.name = name;
    m.base_dir = a.base_dir;
    m.records = a.records;
    for (auto r : b.records) {
        if (!b.base_dir.empty() && b.base_dir != a.base_dir)
            r.path = resolve_path(b, r); // keep paths resolvable from a's base
        m.records.push_back(std::move(r));
    }
    m.split_assignment = a.split_assignment;
    for (const auto& [id, s] : b.split_assignment) m.split_assignment[id] = s;
    validate(m);
    return m;
}

DatasetManifest filter_modality(const DatasetManifest& manifest, Modality mod) {
    DatasetManifest m;
    m.name = manifest.name + "-" + to_string(mod);
    m.base_dir = manifest.base_dir;
    for (const auto& r : manifest.records) {
        if (r.modality != mod) continue;
        m.records.push_back(r);
        auto it = manifest.split_assignment.find(r.id);
        if (it != manifest.split_assignment.end()) m.split_assignment[r.id] = it->second;
    }
    return m;
}

PredictionSet load_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open predictions '" + path + "'");
    PredictionSet preds;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string ctx = path + ":" + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(ctx + ": invalid JSON (" + std::string(e.what()) + ")");
        }
        Detection d;
        const std::string id = require_str(j, "image_id", ctx);
        if (!j.contains("box") || !j["box"].is_array() || j["box"].size() != 4)
            throw FormatError(ctx + ": missing 4-element 'box'");
        d.box.x_min = j["box"][0].get<double>();
        d.box.y_min = j["box"][1].get<double>();
        d.box.x_max = j["box"][2].get<double>();
        d.box.y_max = j["box"][3].get<double>();
        if (!j.contains("confidence") || !j["confidence"].is_number())
            throw FormatError(ctx + ": missing numeric 'confidence'");
        d.confidence = j["confidence"].get<double>();
        if (d.confidence < 0.0 || d.confidence > 1.0)
            throw ValidationError(ctx + ": confidence outside [0,1]");
        d.predicted_class = j.contains("class")
                                ? polyp_class_from_string(j["class"].get<std::string>())
                                : PolypClass::Unknown;
        preds[id].push_back(d);
    }
    return preds;
}

void save_predictions(const PredictionSet& preds, const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write predictions '" + path + "'");
    char buf[64];
    for (const auto& [id, dets] : preds) {
        for (const auto& d : dets) {
            json j;
            j["image_id"] = id;
            json box = json::array();
            for (double v : {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}) {
                std::snprintf(buf, sizeof buf, "%.4f", v);
                box.push_back(json::parse(buf));
            }
            j["box"] = box;
            std::snprintf(buf, sizeof buf, "%.6f", d.confidence);
            j["confidence"] = json::parse(buf);
            j["class"] = to_string(d.predicted_class);
            out << j.dump() << "\n";
        }
    }
    if (!out) throw IoError("write failure on '" + path + "'");
}

} // namespace snbi
