#include "snbi/detector.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <nlohmann/json.hpp>

#include "snbi/errors.hpp"
#include "snbi/evalmetrics.hpp"
#include "snbi/imgtensor.hpp"
#include "snbi/manifest.hpp"
#include "snbi/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace snbi::detector {

DetectorConfig DetectorConfig::tiny() {
    DetectorConfig c;
    c.image_size = 64;
    c.epochs = 12;
    c.width = 16;
    c.downs = 2;
    c.anchor_scales = {2.0, 3.5, 5.0};
    return c;
}

void DetectorConfig::validate_fields() const {
    if (image_size <= 0) throw ValidationError("detector config: image_size must be > 0");
    if (confidence_floor < 0.0 || confidence_floor >= 1.0)
        throw ValidationError("detector config: confidence_floor must be in [0,1)");
    if (classes.empty()) throw ValidationError("detector config: class set is empty");
    if (anchor_scales.empty()) throw ValidationError("detector config: no anchor scales");
    if (downs < 1 || image_size % (1 << downs) != 0)
        throw ValidationError("detector config: image_size must be divisible by 2^downs");
    if (epochs < 1) throw ValidationError("detector config: epochs must be >= 1");
}

PreprocessResult preprocess(const cv::Mat& image, const std::vector<BoundingBox>& boxes,
                            int image_size) {
    if (image.empty() || image.cols < 2 || image.rows < 2)
        throw ShapeError("preprocess: degenerate image");
    PreprocessResult out;
    cv::resize(image, out.image, cv::Size(image_size, image_size), 0, 0, cv::INTER_LINEAR);
    const double fx = static_cast<double>(image_size) / image.cols;
    const double fy = static_cast<double>(image_size) / image.rows;
    out.inverse.scale_x = 1.0 / fx;
    out.inverse.scale_y = 1.0 / fy;
    for (const auto& b : boxes)
        out.boxes.push_back({b.x_min * fx, b.y_min * fy, b.x_max * fx, b.y_max * fy});
    return out;
}

std::vector<BoundingBox> anchor_boxes(const DetectorConfig& config) {
    const int stride = 1 << config.downs;
    const int grid = config.image_size / stride;
    std::vector<BoundingBox> anchors;
    anchors.reserve(static_cast<size_t>(grid) * grid * config.anchor_scales.size());
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx)
            for (double scale : config.anchor_scales) {
                const double cx = (gx + 0.5) * stride;
                const double cy = (gy + 0.5) * stride;
                const double half = scale * stride * 0.5;
                anchors.push_back({cx - half, cy - half, cx + half, cy + half});
            }
    return anchors;
}

namespace {

struct Targets {
    nn::Tensor cls_target; // [1, A*C, G, G]
    nn::Tensor cls_mask;
    nn::Tensor box_target; // [1, A*4, G, G]
    nn::Tensor box_mask;
    int n_pos = 0;
};

int class_index(const DetectorConfig& config, PolypClass cls, const std::string& record_id) {
    for (size_t i = 0; i < config.classes.size(); ++i)
        if (config.classes[i] == cls) return static_cast<int>(i);
    throw ValidationError("record '" + record_id + "': annotation class '" + to_string(cls) +
                          "' is not in the detector class set");
}

// anchors indexed (gy, gx, a) to match the head channel layout a*C+c at (gy,gx)
Targets build_targets(const DetectorConfig& config, const std::vector<BoundingBox>& gt_boxes,
                      const std::vector<int>& gt_classes) {
    const int stride = 1 << config.downs;
    const int grid = config.image_size / stride;
    const int n_anchor_kinds = static_cast<int>(config.anchor_scales.size());
    const int n_classes = static_cast<int>(config.classes.size());
    const int cells = grid * grid;
    const size_t n_anchors = static_cast<size_t>(cells) * n_anchor_kinds;

    Targets t;
    t.cls_target = nn::Tensor::zeros({1, n_anchor_kinds * n_classes, grid, grid});
    t.cls_mask = nn::Tensor::full({1, n_anchor_kinds * n_classes, grid, grid}, 1.0);
    t.box_target = nn::Tensor::zeros({1, n_anchor_kinds * 4, grid, grid});
    t.box_mask = nn::Tensor::zeros({1, n_anchor_kinds * 4, grid, grid});
    if (gt_boxes.empty()) return t; // all anchors stay negative

    const auto anchors = anchor_boxes(config);
    std::vector<int> assignment(n_anchors, -1); // -1 none, -2 ignore, >=0 gt index
    std::vector<double> best_iou(n_anchors, 0.0);
    for (size_t ai = 0; ai < n_anchors; ++ai) {
        double best = 0.0;
        int best_gt = -1;
        for (size_t g = 0; g < gt_boxes.size(); ++g) {
            const double v = eval::iou(anchors[ai], gt_boxes[g]);
            if (v > best) {
                best = v;
                best_gt = static_cast<int>(g);
            }
        }
        best_iou[ai] = best;
        if (best >= config.pos_iou)
            assignment[ai] = best_gt;
        else if (best >= config.neg_iou)
            assignment[ai] = -2;
    }
    // every ground truth claims its best anchor even below the IoU gate
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
        double best = -1.0;
        size_t best_ai = 0;
        for (size_t ai = 0; ai < n_anchors; ++ai) {
            const double v = eval::iou(anchors[ai], gt_boxes[g]);
            if (v > best) {
                best = v;
                best_ai = ai;
            }
        }
        assignment[best_ai] = static_cast<int>(g);
    }

    auto& clst = t.cls_target.values();
    auto& clsm = t.cls_mask.values();
    auto& boxt = t.box_target.values();
    auto& boxm = t.box_mask.values();
    const size_t cls_plane = static_cast<size_t>(cells);
    for (size_t ai = 0; ai < n_anchors; ++ai) {
        // ai = (cell * n_anchor_kinds + a); cell = gy*grid+gx
        const int a = static_cast<int>(ai) % n_anchor_kinds;
        const int cell = static_cast<int>(ai) / n_anchor_kinds;
        const int assigned = assignment[ai];
        if (assigned == -2) {
            for (int c = 0; c < n_classes; ++c)
                clsm[(static_cast<size_t>(a) * n_classes + c) * cls_plane + cell] = 0.0;
            continue;
        }
        if (assigned < 0) continue;
        ++t.n_pos;
        const BoundingBox& gt = gt_boxes[static_cast<size_t>(assigned)];
        const BoundingBox& anchor = anchors[ai];
        clst[(static_cast<size_t>(a) * n_classes + gt_classes[static_cast<size_t>(assigned)]) *
                 cls_plane +
             cell] = 1.0;
        const double aw = anchor.width(), ah = anchor.height();
        const double acx = (anchor.x_min + anchor.x_max) * 0.5;
        const double acy = (anchor.y_min + anchor.y_max) * 0.5;
        const double gcx = (gt.x_min + gt.x_max) * 0.5;
        const double gcy = (gt.y_min + gt.y_max) * 0.5;
        const double deltas[4] = {(gcx - acx) / aw, (gcy - acy) / ah,
                                  std::log(gt.width() / aw), std::log(gt.height() / ah)};
        for (int k = 0; k < 4; ++k) {
            boxt[(static_cast<size_t>(a) * 4 + k) * cls_plane + cell] = deltas[k];
            boxm[(static_cast<size_t>(a) * 4 + k) * cls_plane + cell] = 1.0;
        }
    }
    return t;
}

nn::Tensor detection_loss(const nn::DetectorNet& net, const DetectorConfig& config,
                          const nn::Tensor& image, const Targets& targets) {
    auto [cls_logits, box_deltas] = net.forward(image);
    const double normalizer = std::max(1, targets.n_pos);
    nn::Tensor cls_loss =
        nn::sigmoid_focal_loss(cls_logits, targets.cls_target, targets.cls_mask,
                               config.focal_alpha, config.focal_gamma, normalizer);
    nn::Tensor box_loss =
        nn::smooth_l1_loss(box_deltas, targets.box_target, targets.box_mask, normalizer);
    return nn::add(cls_loss, box_loss);
}

double sigmoid(double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

struct LoadedRecord {
    nn::Tensor image;
    std::vector<BoundingBox> boxes;
    std::vector<int> classes;
};

LoadedRecord load_record(const DetectorConfig& config, const DatasetManifest& manifest,
                         const ImageRecord& rec) {
    cv::Mat img = cv::imread(resolve_path(manifest, rec), cv::IMREAD_COLOR);
    if (img.empty()) throw IoError("cannot load image '" + rec.path + "'");
    std::vector<BoundingBox> boxes;
    std::vector<int> classes;
    for (const auto& a : rec.annotations) {
        boxes.push_back(a.box);
        classes.push_back(class_index(config, a.polyp_class, rec.id));
    }
    auto pre = preprocess(img, boxes, config.image_size);
    LoadedRecord out;
    out.image = nn::image_to_tensor(pre.image);
    out.boxes = pre.boxes;
    out.classes = classes;
    return out;
}

std::vector<Detection> decode_detections(const DetectorCheckpoint& ckpt,
                                         const nn::Tensor& cls_logits,
                                         const nn::Tensor& box_deltas,
                                         const InverseTransform& inverse, int native_w,
                                         int native_h) {
    const DetectorConfig& config = ckpt.config;
    const int stride = 1 << config.downs;
    const int grid = config.image_size / stride;
    const int n_anchor_kinds = static_cast<int>(config.anchor_scales.size());
    const int n_classes = static_cast<int>(config.classes.size());
    const size_t plane = static_cast<size_t>(grid) * grid;
    const auto& cls = cls_logits.values();
    const auto& box = box_deltas.values();

    std::vector<Detection> raw;
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            const int cell = gy * grid + gx;
            for (int a = 0; a < n_anchor_kinds; ++a) {
                double best_logit = -1e30;
                int best_class = 0;
                for (int c = 0; c < n_classes; ++c) {
                    const double z = cls[(static_cast<size_t>(a) * n_classes + c) * plane + cell];
                    if (z > best_logit) {
                        best_logit = z;
                        best_class = c;
                    }
                }
                const double conf = sigmoid(best_logit);
                if (conf < config.confidence_floor) continue;

                const double acx = (gx + 0.5) * stride;
                const double acy = (gy + 0.5) * stride;
                const double aw = config.anchor_scales[static_cast<size_t>(a)] * stride;
                const double dx = box[(static_cast<size_t>(a) * 4 + 0) * plane + cell];
                const double dy = box[(static_cast<size_t>(a) * 4 + 1) * plane + cell];
                const double dw = std::clamp(box[(static_cast<size_t>(a) * 4 + 2) * plane + cell], -4.0, 4.0);
                const double dh = std::clamp(box[(static_cast<size_t>(a) * 4 + 3) * plane + cell], -4.0, 4.0);
                const double cx = acx + dx * aw;
                const double cy = acy + dy * aw;
                const double w = aw * std::exp(dw);
                const double h = aw * std::exp(dh);
                BoundingBox resized{cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5};
                resized.x_min = std::clamp(resized.x_min, 0.0, static_cast<double>(config.image_size));
                resized.y_min = std::clamp(resized.y_min, 0.0, static_cast<double>(config.image_size));
                resized.x_max = std::clamp(resized.x_max, 0.0, static_cast<double>(config.image_size));
                resized.y_max = std::clamp(resized.y_max, 0.0, static_cast<double>(config.image_size));
                BoundingBox native = inverse.apply(resized);
                native.x_min = std::clamp(native.x_min, 0.0, static_cast<double>(native_w));
                native.y_min = std::clamp(native.y_min, 0.0, static_cast<double>(native_h));
                native.x_max = std::clamp(native.x_max, 0.0, static_cast<double>(native_w));
                native.y_max = std::clamp(native.y_max, 0.0, static_cast<double>(native_h));
                if (native.width() <= 1e-6 || native.height() <= 1e-6) continue;
                raw.push_back({native, conf, config.classes[static_cast<size_t>(best_class)]});
            }
        }

    // per-class greedy non-maximum suppression
    std::vector<Detection> kept;
    for (int c = 0; c < n_classes; ++c) {
        std::vector<size_t> order;
        for (size_t i = 0; i < raw.size(); ++i)
            if (raw[i].predicted_class == config.classes[static_cast<size_t>(c)])
                order.push_back(i);
        std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) {
            return raw[i].confidence > raw[j].confidence;
        });
        std::vector<bool> suppressed(order.size(), false);
        for (size_t i = 0; i < order.size(); ++i) {
            if (suppressed[i]) continue;
            kept.push_back(raw[order[i]]);
            for (size_t j = i + 1; j < order.size(); ++j) {
                if (suppressed[j]) continue;
                if (eval::iou(raw[order[i]].box, raw[order[j]].box) > config.nms_iou)
                    suppressed[j] = true;
            }
        }
    }
    std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
        return a.confidence > b.confidence;
    });
    return kept;
}

} // namespace

std::vector<Detection> detect(const DetectorCheckpoint& ckpt, const cv::Mat& image) {
    nn::NoGradGuard guard;
    auto pre = preprocess(image, {}, ckpt.config.image_size);
    auto [cls_logits, box_deltas] = ckpt.net.forward(nn::image_to_tensor(pre.image));
    return decode_detections(ckpt, cls_logits, box_deltas, pre.inverse, image.cols,
                             image.rows);
}

std::map<std::string, std::vector<Detection>> detect_split(const DetectorCheckpoint& ckpt,
                                                           const DatasetManifest& manifest,
                                                           Split split) {
    std::map<std::string, std::vector<Detection>> out;
    for (const auto* rec : manifest.split_records(split)) {
        cv::Mat img = cv::imread(resolve_path(manifest, *rec), cv::IMREAD_COLOR);
        if (img.empty()) throw IoError("cannot load image '" + rec->path + "'");
        out[rec->id] = detect(ckpt, img);
    }
    return out;
}

DetectorCheckpoint train_detector(const DetectorConfig& config,
                                  const DatasetManifest& manifest, Split train_split,
                                  Split val_split, const std::string& ckpt_dir,
                                  std::vector<EpochStats>* history) {
    config.validate_fields();
    const auto train_records = manifest.split_records(train_split);
    if (train_records.empty()) throw ValidationError("train_detector: empty train split");
    const auto val_records = manifest.split_records(val_split);

    std::set<Modality> modalities;
    for (const auto* r : train_records) modalities.insert(r->modality);
    if (modalities.size() != 1)
        throw ValidationError("train_detector: train split mixes modalities; filter first");

    DetectorCheckpoint ckpt;
    ckpt.config = config;
    ckpt.fingerprint_dataset = manifest.name;
    ckpt.fingerprint_modality = *modalities.begin();

    Rng init_rng(Rng::mix(config.seed, 0xde7ec7));
    ckpt.net = nn::DetectorNet(config.width, config.downs,
                               static_cast<int>(config.anchor_scales.size()),
                               static_cast<int>(config.classes.size()), init_rng);
    auto params = ckpt.net.named_params();
    nn::Adam opt(params, 0.9, 0.999);

    // cache of preprocessed records (tensor + targets), capped
    std::map<std::string, std::pair<nn::Tensor, Targets>> cache;
    auto fetch = [&](const ImageRecord& rec) -> std::pair<nn::Tensor, Targets>& {
        auto it = cache.find(rec.id);
        if (it != cache.end()) return it->second;
        LoadedRecord lr = load_record(config, manifest, rec);
        Targets t = build_targets(config, lr.boxes, lr.classes);
        if (static_cast<int>(cache.size()) >= config.image_cache_size) cache.clear();
        return cache.emplace(rec.id, std::make_pair(lr.image, std::move(t))).first->second;
    };

    std::vector<std::vector<double>> best_values;
    double best_f1 = -1.0;

    const int iterations = config.iterations_per_epoch > 0 ? config.iterations_per_epoch
                                                           : static_cast<int>(train_records.size());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<size_t> order(train_records.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(Rng::mix(config.seed, 0x5f0e + epoch));
        shuffle_rng.shuffle(order);

        double train_loss_sum = 0.0;
        for (int i = 0; i < iterations; ++i) {
            const auto& rec = *train_records[order[static_cast<size_t>(i) % order.size()]];
            auto& [image, targets] = fetch(rec);
            nn::zero_grads(params);
            nn::Tensor loss = detection_loss(ckpt.net, config, image, targets);
            const double v = loss.item();
            if (!std::isfinite(v)) throw NumericError("train_detector: non-finite loss");
            loss.backward();
            opt.step(config.base_lr);
            train_loss_sum += v;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = train_loss_sum / iterations;

        if (!val_records.empty()) {
            nn::NoGradGuard guard;
            double val_loss_sum = 0.0;
            std::vector<std::vector<Detection>> dets_per_image;
            std::vector<std::vector<BoundingBox>> gts_per_image;
            for (const auto* rec : val_records) {
                auto& [image, targets] = fetch(*rec);
                val_loss_sum += detection_loss(ckpt.net, config, image, targets).item();
                cv::Mat img = cv::imread(resolve_path(manifest, *rec), cv::IMREAD_COLOR);
                if (img.empty()) throw IoError("cannot load image '" + rec->path + "'");
                dets_per_image.push_back(detect(ckpt, img));
                std::vector<BoundingBox> gts;
                for (const auto& a : rec->annotations) gts.push_back(a.box);
                gts_per_image.push_back(std::move(gts));
            }
            stats.val_loss = val_loss_sum / static_cast<double>(val_records.size());
            auto curve = eval::pr_curve(dets_per_image, gts_per_image, 0.5);
            stats.val_threshold = eval::select_threshold(curve);
            for (const auto& p : curve)
                if (p.threshold == stats.val_threshold)
                    stats.val_f1 = eval::f1(p.precision, p.recall);
        }

        if (history) history->push_back(stats);
        if (val_records.empty() || stats.val_f1 > best_f1) {
            best_f1 = val_records.empty() ? 0.0 : stats.val_f1;
            ckpt.best_epoch = epoch;
            ckpt.val_threshold = val_records.empty() ? 0.5 : stats.val_threshold;
            ckpt.best_val_f1 = best_f1;
            best_values.clear();
            for (const auto& [name, t] : params) best_values.push_back(t.values());
        }
    }

    // restore the best-validation parameters
    if (!best_values.empty())
        for (size_t i = 0; i < params.size(); ++i) params[i].second.values() = best_values[i];

    if (!ckpt_dir.empty()) save_detector(ckpt, ckpt_dir);
    return ckpt;
}

void save_detector(const DetectorCheckpoint& ckpt, const std::string& dir) {
    fs::create_directories(dir);
    json j;
    json cfg;
    cfg["image_size"] = ckpt.config.image_size;
    cfg["epochs"] = ckpt.config.epochs;
    cfg["base_lr"] = ckpt.config.base_lr;
    cfg["confidence_floor"] = ckpt.config.confidence_floor;
    json classes = json::array();
    for (auto c : ckpt.config.classes) classes.push_back(to_string(c));
    cfg["classes"] = classes;
    cfg["seed"] = ckpt.config.seed;
    cfg["width"] = ckpt.config.width;
    cfg["downs"] = ckpt.config.downs;
    cfg["anchor_scales"] = ckpt.config.anchor_scales;
    cfg["nms_iou"] = ckpt.config.nms_iou;
    cfg["pos_iou"] = ckpt.config.pos_iou;
    cfg["neg_iou"] = ckpt.config.neg_iou;
    cfg["focal_alpha"] = ckpt.config.focal_alpha;
    cfg["focal_gamma"] = ckpt.config.focal_gamma;
    cfg["iterations_per_epoch"] = ckpt.config.iterations_per_epoch;
    cfg["image_cache_size"] = ckpt.config.image_cache_size;
    j["config"] = cfg;
    j["fingerprint"] = {{"dataset", ckpt.fingerprint_dataset},
                        {"modality", to_string(ckpt.fingerprint_modality)}};
    j["val_threshold"] = ckpt.val_threshold;
    j["best_val_f1"] = ckpt.best_val_f1;
    j["best_epoch"] = ckpt.best_epoch;
    std::ofstream out(fs::path(dir) / "detector.json", std::ios::trunc);
    if (!out) throw IoError("cannot write detector checkpoint '" + dir + "'");
    out << j.dump(2) << "\n";
    nn::save_params(ckpt.net.named_params(), (fs::path(dir) / "net.params").string());
}

DetectorCheckpoint load_detector(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "detector.json");
    if (!in) throw IoError("cannot open detector checkpoint '" + dir + "'");
    json j = json::parse(in);
    DetectorCheckpoint ckpt;
    const json& cfg = j.at("config");
    ckpt.config.image_size = cfg.at("image_size").get<int>();
    ckpt.config.epochs = cfg.at("epochs").get<int>();
    ckpt.config.base_lr = cfg.at("base_lr").get<double>();
    ckpt.config.confidence_floor = cfg.at("confidence_floor").get<double>();
    ckpt.config.classes.clear();
    for (const auto& c : cfg.at("classes"))
        ckpt.config.classes.push_back(polyp_class_from_string(c.get<std::string>()));
    ckpt.config.seed = cfg.at("seed").get<uint64_t>();
    ckpt.config.width = cfg.at("width").get<int>();
    ckpt.config.downs = cfg.at("downs").get<int>();
    ckpt.config.anchor_scales = cfg.at("anchor_scales").get<std::vector<double>>();
    ckpt.config.nms_iou = cfg.at("nms_iou").get<double>();
    ckpt.config.pos_iou = cfg.at("pos_iou").get<double>();
    ckpt.config.neg_iou = cfg.at("neg_iou").get<double>();
    ckpt.config.focal_alpha = cfg.at("focal_alpha").get<double>();
    ckpt.config.focal_gamma = cfg.at("focal_gamma").get<double>();
    ckpt.config.iterations_per_epoch = cfg.at("iterations_per_epoch").get<int>();
    ckpt.config.image_cache_size = cfg.at("image_cache_size").get<int>();
    ckpt.fingerprint_dataset = j.at("fingerprint").at("dataset").get<std::string>();
    ckpt.fingerprint_modality =
        modality_from_string(j.at("fingerprint").at("modality").get<std::string>());
    ckpt.val_threshold = j.at("val_threshold").get<double>();
    ckpt.best_val_f1 = j.at("best_val_f1").get<double>();
    ckpt.best_epoch = j.at("best_epoch").get<int>();

    Rng dummy(0);
    ckpt.net = nn::DetectorNet(ckpt.config.width, ckpt.config.downs,
                               static_cast<int>(ckpt.config.anchor_scales.size()),
                               static_cast<int>(ckpt.config.classes.size()), dummy);
    nn::load_params(ckpt.net.named_params(), (fs::path(dir) / "net.params").string());
    return ckpt;
}

} // namespace snbi::detector
