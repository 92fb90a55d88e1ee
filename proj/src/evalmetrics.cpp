#include "snbi/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "snbi/errors.hpp"

namespace fs = std::filesystem;

namespace snbi::eval {

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = ix * iy;
    if (inter <= 0.0) return 0.0;
    const double uni = a.area() + b.area() - inter;
    return inter / uni;
}

MatchCounts match_detections(const std::vector<Detection>& dets,
                             const std::vector<BoundingBox>& gts,
                             const EvalConfig& config) {
    std::vector<size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) {
        return dets[i].confidence > dets[j].confidence;
    });

    MatchCounts counts;
    std::vector<bool> gt_taken(gts.size(), false);
    for (size_t oi : order) {
        const Detection& d = dets[oi];
        if (d.confidence < config.confidence_threshold) continue;
        double best_iou = 0.0;
        int best_gt = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (gt_taken[g]) continue;
            const double v = iou(d.box, gts[g]);
            if (v > config.iou_threshold && v > best_iou) {
                best_iou = v;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0) {
            gt_taken[static_cast<size_t>(best_gt)] = true;
            ++counts.tp;
        } else {
            ++counts.fp;
        }
    }
    counts.fn = static_cast<long long>(gts.size()) - counts.tp;
    return counts;
}

double precision(const MatchCounts& counts) {
    const long long den = counts.tp + counts.fp;
    return den == 0 ? 0.0 : static_cast<double>(counts.tp) / static_cast<double>(den);
}

double recall(const MatchCounts& counts) {
    const long long den = counts.tp + counts.fn;
    return den == 0 ? 0.0 : static_cast<double>(counts.tp) / static_cast<double>(den);
}

double f1(double p, double r) {
    const double den = p + r;
    return den == 0.0 ? 0.0 : 2.0 * p * r / den;
}

std::vector<PrPoint> pr_curve(const std::vector<std::vector<Detection>>& dets_per_image,
                              const std::vector<std::vector<BoundingBox>>& gts_per_image,
                              double iou_threshold) {
    if (dets_per_image.size() != gts_per_image.size())
        throw ValidationError("pr_curve: detection and ground-truth image counts differ");

    std::set<double> thresholds = {0.0, 1.0};
    for (const auto& dets : dets_per_image)
        for (const auto& d : dets) thresholds.insert(d.confidence);

    std::vector<PrPoint> curve;
    curve.reserve(thresholds.size());
    for (double t : thresholds) {
        EvalConfig cfg;
        cfg.iou_threshold = iou_threshold;
        cfg.confidence_threshold = t;
        MatchCounts total;
        for (size_t i = 0; i < dets_per_image.size(); ++i)
            total += match_detections(dets_per_image[i], gts_per_image[i], cfg);
        curve.push_back({t, precision(total), recall(total)});
    }
    return curve;
}

double select_threshold(const std::vector<PrPoint>& curve) {
    if (curve.empty()) throw ValidationError("select_threshold: empty curve");
    double best_t = curve.front().threshold;
    double best_f1 = f1(curve.front().precision, curve.front().recall);
    for (size_t i = 1; i < curve.size(); ++i) {
        const double v = f1(curve[i].precision, curve[i].recall);
        if (v > best_f1) { // ties keep the earlier (lower) threshold
            best_f1 = v;
            best_t = curve[i].threshold;
        }
    }
    return best_t;
}

PredictionSet filter_predictions(const PredictionSet& predictions,
                                 const DatasetManifest& manifest, Split split) {
    PredictionSet out;
    for (const auto& [id, dets] : predictions) {
        const ImageRecord* rec = manifest.find(id);
        if (!rec)
            throw ValidationError("predictions reference unknown image id '" + id + "'");
        auto s = manifest.split_of(id);
        if (s && *s == split) out[id] = dets;
    }
    return out;
}

MetricsReport evaluate_run(const PredictionSet& predictions,
                           const DatasetManifest& manifest, Split split,
                           const EvalConfig& config) {
    const auto records = manifest.split_records(split);
    std::set<std::string> split_ids;
    for (const auto* r : records) split_ids.insert(r->id);
    for (const auto& [id, dets] : predictions) {
        if (!split_ids.count(id))
            throw ValidationError("prediction for image '" + id + "' which is not in split '" +
                                  to_string(split) + "'");
    }

    MetricsReport report;
    report.chosen_threshold = config.confidence_threshold;

    std::vector<std::vector<Detection>> dets_per_image;
    std::vector<std::vector<BoundingBox>> gts_per_image;
    std::set<PolypClass> classes;
    for (const auto* rec : records) {
        std::vector<Detection> dets;
        auto it = predictions.find(rec->id);
        if (it != predictions.end()) dets = it->second;
        std::vector<BoundingBox> gts;
        for (const auto& a : rec->annotations) {
            gts.push_back(a.box);
            classes.insert(a.polyp_class);
        }
        for (const auto& d : dets) classes.insert(d.predicted_class);
        report.counts += match_detections(dets, gts, config);
        dets_per_image.push_back(std::move(dets));
        gts_per_image.push_back(std::move(gts));
    }

    report.precision = precision(report.counts);
    report.recall = recall(report.counts);
    report.f1 = f1(report.precision, report.recall);
    report.degenerate_precision = report.counts.tp + report.counts.fp == 0;
    report.degenerate_recall = report.counts.tp + report.counts.fn == 0;
    report.pr_curve = pr_curve(dets_per_image, gts_per_image, config.iou_threshold);

    // per-class pass: restrict detections and truths to one class at a time;
    // a detection matching a truth of another class thus counts FP for its
    // own class and leaves that truth FN for the truth's class
    for (PolypClass cls : classes) {
        ClassMetrics cm;
        for (const auto* rec : records) {
            std::vector<Detection> dets;
            auto it = predictions.find(rec->id);
            if (it != predictions.end())
                for (const auto& d : it->second)
                    if (d.predicted_class == cls) dets.push_back(d);
            std::vector<BoundingBox> gts;
            for (const auto& a : rec->annotations)
                if (a.polyp_class == cls) gts.push_back(a.box);
            cm.counts += match_detections(dets, gts, config);
        }
        cm.precision = precision(cm.counts);
        cm.recall = recall(cm.counts);
        cm.f1 = f1(cm.precision, cm.recall);
        cm.degenerate_precision = cm.counts.tp + cm.counts.fp == 0;
        cm.degenerate_recall = cm.counts.tp + cm.counts.fn == 0;
        report.per_class[cls] = cm;
    }
    return report;
}

namespace {

std::string fmt(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void ensure_parent(const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

} // namespace

void write_report_markdown(const MetricsReport& report, const std::string& title,
                           const std::string& path) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write report '" + path + "'");
    out << "# " << title << "\n\n";
    out << "Confidence threshold: " << fmt(report.chosen_threshold) << "\n\n";
    out << "| Metric | Value |\n|---|---|\n";
    out << "| TP | " << report.counts.tp << " |\n";
    out << "| FP | " << report.counts.fp << " |\n";
    out << "| FN | " << report.counts.fn << " |\n";
    out << "| Precision | " << fmt(report.precision)
        << (report.degenerate_precision ? " (degenerate: no detections)" : "") << " |\n";
    out << "| Recall | " << fmt(report.recall)
        << (report.degenerate_recall ? " (degenerate: no ground truths)" : "") << " |\n";
    out << "| F1 | " << fmt(report.f1) << " |\n";
    if (!report.per_class.empty()) {
        out << "\n| Class | TP | FP | FN | Precision | Recall | F1 |\n|---|---|---|---|---|---|---|\n";
        for (const auto& [cls, cm] : report.per_class) {
            out << "| " << to_string(cls) << " | " << cm.counts.tp << " | " << cm.counts.fp
                << " | " << cm.counts.fn << " | " << fmt(cm.precision) << " | "
                << fmt(cm.recall) << " | " << fmt(cm.f1) << " |\n";
        }
    }
    if (!out) throw IoError("write failure on '" + path + "'");
}

void write_report_csv(const MetricsReport& report, const std::string& path) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write report '" + path + "'");
    out << "section,class,threshold,tp,fp,fn,precision,recall,f1\n";
    out << "overall,all," << fmt(report.chosen_threshold) << "," << report.counts.tp << ","
        << report.counts.fp << "," << report.counts.fn << "," << fmt(report.precision) << ","
        << fmt(report.recall) << "," << fmt(report.f1) << "\n";
    for (const auto& [cls, cm] : report.per_class) {
        out << "class," << to_string(cls) << "," << fmt(report.chosen_threshold) << ","
            << cm.counts.tp << "," << cm.counts.fp << "," << cm.counts.fn << ","
            << fmt(cm.precision) << "," << fmt(cm.recall) << "," << fmt(cm.f1) << "\n";
    }
    for (const auto& p : report.pr_curve) {
        out << "pr_curve,all," << fmt(p.threshold) << ",,,," << fmt(p.precision) << ","
            << fmt(p.recall) << "," << fmt(f1(p.precision, p.recall)) << "\n";
    }
    if (!out) throw IoError("write failure on '" + path + "'");
}

} // namespace snbi::eval
