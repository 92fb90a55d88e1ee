#include "snbi/ingest.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>

#include <nlohmann/json.hpp>

#include "snbi/errors.hpp"
#include "snbi/manifest.hpp"
#include "snbi/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace snbi::ingest {

BlurScore blur_score(const cv::Mat& image) {
    if (image.empty()) throw ShapeError("blur_score: empty image");
    cv::Mat gray;
    if (image.channels() == 3)
        cv::cvtColor(image, gray, cv::COLOR_BGR2GRAY);
    else if (image.channels() == 1)
        gray = image;
    else
        throw ShapeError("blur_score: expected 1- or 3-channel image");
    cv::Mat lap;
    cv::Laplacian(gray, lap, CV_64F);
    cv::Scalar mean, stddev;
    cv::meanStdDev(lap, mean, stddev);
    return BlurScore{stddev[0] * stddev[0]};
}

std::pair<cv::Mat, CropRegion> crop_black_borders(const cv::Mat& image,
                                                  double intensity_threshold,
                                                  double min_fraction) {
    if (image.empty()) throw ShapeError("crop_black_borders: empty image");
    cv::Mat gray;
    if (image.channels() == 3)
        cv::cvtColor(image, gray, cv::COLOR_BGR2GRAY);
    else
        gray = image;
    cv::Mat grayd;
    gray.convertTo(grayd, CV_64F);

    cv::Mat row_mean, col_mean;
    cv::reduce(grayd, row_mean, 1, cv::REDUCE_AVG); // H x 1
    cv::reduce(grayd, col_mean, 0, cv::REDUCE_AVG); // 1 x W

    int y0 = -1, y1 = -1, x0 = -1, x1 = -1;
    for (int y = 0; y < row_mean.rows; ++y) {
        if (row_mean.at<double>(y, 0) >= intensity_threshold) {
            if (y0 < 0) y0 = y;
            y1 = y;
        }
    }
    for (int x = 0; x < col_mean.cols; ++x) {
        if (col_mean.at<double>(0, x) >= intensity_threshold) {
            if (x0 < 0) x0 = x;
            x1 = x;
        }
    }

    CropRegion full;
    full.box = {0.0, 0.0, static_cast<double>(image.cols), static_cast<double>(image.rows)};
    if (y0 < 0 || x0 < 0) {
        full.degenerate = true; // nothing informative found
        return {image.clone(), full};
    }
    BoundingBox region{static_cast<double>(x0), static_cast<double>(y0),
                       static_cast<double>(x1 + 1), static_cast<double>(y1 + 1)};
    const double total = static_cast<double>(image.cols) * image.rows;
    if (region.area() < min_fraction * total) {
        full.degenerate = true;
        return {image.clone(), full};
    }
    cv::Mat cropped = image(cv::Rect(x0, y0, x1 + 1 - x0, y1 + 1 - y0)).clone();
    return {cropped, CropRegion{region, false}};
}

std::vector<BoundingBox> mask_to_bboxes(const cv::Mat& mask, int min_area) {
    if (mask.empty()) throw ShapeError("mask_to_bboxes: empty mask");
    if (mask.channels() != 1) throw ValidationError("mask_to_bboxes: mask must be single-channel");
    double lo, hi;
    cv::minMaxLoc(mask, &lo, &hi);
    if (lo != 0.0 && hi != 0.0)
        throw ValidationError("mask_to_bboxes: mask has no zero background");
    if (hi != 0.0) {
        cv::Mat values;
        cv::Mat m8;
        mask.convertTo(m8, CV_8U);
        // strictly binary: only 0 and one positive value may appear
        cv::Mat neither = (m8 != 0) & (m8 != static_cast<int>(hi));
        if (cv::countNonZero(neither) > 0)
            throw ValidationError("mask_to_bboxes: mask is not strictly binary");
    }

    cv::Mat m8;
    mask.convertTo(m8, CV_8U);
    cv::Mat bin = m8 != 0;
    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(bin, labels, stats, centroids, 8, CV_32S);

    std::vector<BoundingBox> boxes;
    for (int i = 1; i < n; ++i) {
        if (stats.at<int>(i, cv::CC_STAT_AREA) < min_area) continue;
        const double x = stats.at<int>(i, cv::CC_STAT_LEFT);
        const double y = stats.at<int>(i, cv::CC_STAT_TOP);
        const double w = stats.at<int>(i, cv::CC_STAT_WIDTH);
        const double h = stats.at<int>(i, cv::CC_STAT_HEIGHT);
        boxes.push_back({x, y, x + w, y + h});
    }
    std::sort(boxes.begin(), boxes.end(), [](const BoundingBox& a, const BoundingBox& b) {
        return a.y_min != b.y_min ? a.y_min < b.y_min : a.x_min < b.x_min;
    });
    return boxes;
}

std::vector<ImageRecord> extract_frames(const std::string& video_path, int stride,
                                        const std::string& out_dir) {
    if (stride < 1) throw ValidationError("extract_frames: stride must be >= 1");
    cv::VideoCapture cap(video_path);
    if (!cap.isOpened()) throw IoError("extract_frames: cannot decode '" + video_path + "'");
    const std::string clip = fs::path(video_path).stem().string();
    fs::create_directories(out_dir);

    std::vector<ImageRecord> records;
    cv::Mat frame;
    long index = 0;
    while (cap.read(frame)) {
        if (index % stride == 0) {
            char name[64];
            std::snprintf(name, sizeof name, "%s_f%06ld.png", clip.c_str(), index);
            const std::string out_path = (fs::path(out_dir) / name).string();
            if (!cv::imwrite(out_path, frame))
                throw IoError("extract_frames: cannot write '" + out_path + "'");
            ImageRecord r;
            char id[64];
            std::snprintf(id, sizeof id, "%s_f%06ld", clip.c_str(), index);
            r.id = id;
            r.path = out_path;
            r.clip_id = clip;
            r.width = frame.cols;
            r.height = frame.rows;
            records.push_back(std::move(r));
        }
        ++index;
    }
    if (index == 0) throw IoError("extract_frames: '" + video_path + "' contains no frames");
    return records;
}

FilterResult filter_blurry(const std::vector<ImageRecord>& records,
                           const DatasetManifest& manifest, double threshold) {
    if (threshold < 0.0) throw ValidationError("filter_blurry: threshold must be >= 0");
    FilterResult result;
    for (const auto& r : records) {
        cv::Mat img = cv::imread(resolve_path(manifest, r), cv::IMREAD_COLOR);
        if (img.empty()) {
            result.failed.emplace_back(r.id, "cannot load '" + r.path + "'");
            continue;
        }
        const double score = blur_score(img).value;
        result.scores[r.id] = score;
        if (score >= threshold)
            result.kept.push_back(r);
        else
            result.dropped.push_back(r);
    }
    return result;
}

double suggest_blur_threshold(const std::vector<double>& scores) {
    if (scores.empty()) return 0.0;
    const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi <= lo) return lo;

    // Otsu's threshold over a fixed histogram of the scores
    constexpr int kBins = 128;
    std::vector<long> hist(kBins, 0);
    for (double s : scores) {
        int b = static_cast<int>((s - lo) / (hi - lo) * kBins);
        b = std::clamp(b, 0, kBins - 1);
        ++hist[b];
    }
    const double total = static_cast<double>(scores.size());
    double sum_all = 0.0;
    for (int b = 0; b < kBins; ++b) sum_all += b * static_cast<double>(hist[b]);

    double best_between = -1.0;
    int best_bin = 0;
    double w0 = 0.0, sum0 = 0.0;
    for (int b = 0; b < kBins - 1; ++b) {
        w0 += static_cast<double>(hist[b]);
        if (w0 == 0.0) continue;
        const double w1 = total - w0;
        if (w1 == 0.0) break;
        sum0 += b * static_cast<double>(hist[b]);
        const double mu0 = sum0 / w0;
        const double mu1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (between > best_between) {
            best_between = between;
            best_bin = b;
        }
    }
    return lo + (best_bin + 1) * (hi - lo) / kBins;
}

DatasetManifest split_dataset(const DatasetManifest& manifest,
                              const std::vector<std::pair<Split, double>>& fractions,
                              uint64_t seed) {
    double total = 0.0;
    for (const auto& [s, f] : fractions) total += f;
    if (std::abs(total - 1.0) > 1e-9)
        throw ValidationError("split_dataset: fractions must sum to 1");

    std::set<std::string> clip_set;
    for (const auto& r : manifest.records) clip_set.insert(r.clip_id);
    std::vector<std::string> clips(clip_set.begin(), clip_set.end());
    if (clips.size() < fractions.size())
        throw ValidationError("split_dataset: fewer clips than splits");

    Rng rng(seed);
    rng.shuffle(clips);

    // largest-remainder apportionment of clips to splits
    const size_t n = clips.size();
    std::vector<size_t> counts(fractions.size());
    std::vector<std::pair<double, size_t>> remainders;
    size_t assigned = 0;
    for (size_t i = 0; i < fractions.size(); ++i) {
        const double exact = fractions[i].second * static_cast<double>(n);
        counts[i] = static_cast<size_t>(std::floor(exact + 1e-9));
        assigned += counts[i];
        remainders.push_back({exact - std::floor(exact + 1e-9), i});
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (size_t k = 0; assigned < n; ++k, ++assigned) ++counts[remainders[k % remainders.size()].second];

    std::map<std::string, Split> clip_split;
    size_t pos = 0;
    for (size_t i = 0; i < fractions.size(); ++i) {
        for (size_t k = 0; k < counts[i]; ++k) clip_split[clips[pos++]] = fractions[i].first;
    }

    DatasetManifest out = manifest;
    out.split_assignment.clear();
    for (const auto& r : out.records) out.split_assignment[r.id] = clip_split.at(r.clip_id);
    validate(out);
    return out;
}

namespace {

// pulls a "wli"/"nbi" token out of a file stem like "clip03_wli"
std::optional<Modality> modality_token(const std::string& stem, std::string* clip_out) {
    std::string lower;
    for (char c : stem) lower.push_back(static_cast<char>(std::tolower(c)));
    for (const auto& [token, m] : {std::pair<std::string, Modality>{"wli", Modality::WLI},
                                   {"nbi", Modality::NBI}}) {
        auto pos = lower.find(token);
        while (pos != std::string::npos) {
            const bool left_ok = pos == 0 || !std::isalnum(static_cast<unsigned char>(lower[pos - 1]));
            const size_t end = pos + token.size();
            const bool right_ok = end == lower.size() || !std::isalnum(static_cast<unsigned char>(lower[end]));
            if (left_ok && right_ok) {
                if (clip_out) {
                    std::string clip = stem;
                    clip.erase(pos, token.size());
                    // strip the separator the token left behind
                    if (pos > 0 && pos - 1 < clip.size() &&
                        (clip[pos - 1] == '_' || clip[pos - 1] == '-'))
                        clip.erase(pos - 1, 1);
                    else if (pos < clip.size() && (clip[pos] == '_' || clip[pos] == '-'))
                        clip.erase(pos, 1);
                    *clip_out = clip;
                }
                return m;
            }
            pos = lower.find(token, pos + 1);
        }
    }
    return std::nullopt;
}

long trailing_number(const std::string& stem) {
    long v = 0, mult = 1;
    bool any = false;
    for (auto it = stem.rbegin(); it != stem.rend(); ++it) {
        if (*it >= '0' && *it <= '9') {
            v += (*it - '0') * mult;
            mult *= 10;
            any = true;
        } else {
            break;
        }
    }
    return any ? v : -1;
}

bool has_extension(const fs::path& p, std::initializer_list<const char*> exts) {
    std::string e = p.extension().string();
    for (char& c : e) c = static_cast<char>(std::tolower(c));
    for (const char* want : exts)
        if (e == want) return true;
    return false;
}

std::vector<fs::path> sorted_files(const std::string& dir,
                                   std::initializer_list<const char*> exts) {
    std::vector<fs::path> files;
    if (!fs::is_directory(dir)) throw IoError("not a directory: '" + dir + "'");
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && has_extension(entry.path(), exts))
            files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

} // namespace

DatasetManifest ingest_videos(const VideoIngestOptions& opt, const std::string& dataset_name) {
    const auto videos = sorted_files(opt.videos_dir, {".avi", ".mp4", ".mov", ".mkv", ".mjpeg"});
    if (videos.empty()) throw IoError("ingest: no videos found in '" + opt.videos_dir + "'");

    // masks indexed by (clip stem, frame number from the file name)
    std::map<std::string, std::map<long, fs::path>> masks_by_clip;
    if (!opt.masks_dir.empty()) {
        for (const auto& m : sorted_files(opt.masks_dir, {".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff"})) {
            const std::string stem = m.stem().string();
            const long idx = trailing_number(stem);
            std::string clip = stem;
            if (idx >= 0) {
                // strip the numeric suffix and its separator to recover the clip stem
                while (!clip.empty() && std::isdigit(static_cast<unsigned char>(clip.back()))) clip.pop_back();
                if (!clip.empty() && (clip.back() == '_' || clip.back() == '-')) clip.pop_back();
            }
            masks_by_clip[clip][std::max(idx, 0L)] = m;
        }
    }

    DatasetManifest manifest;
    manifest.name = dataset_name;

    for (const auto& video : videos) {
        const std::string stem = video.stem().string();
        std::string clip = stem;
        auto mod = modality_token(stem, &clip);
        if (!mod) {
            if (!opt.default_modality)
                throw ValidationError("ingest: cannot infer modality from '" + stem +
                                      "' (expected a wli/nbi token) and no default modality given");
            mod = *opt.default_modality;
            clip = stem;
        }

        auto records = extract_frames(video.string(), opt.stride, opt.frames_dir);
        for (auto& r : records) {
            r.modality = *mod;
            r.clip_id = clip;
        }

        // annotations from the nearest-in-index mask of this clip's mask set
        auto mit = masks_by_clip.find(stem);
        if (mit == masks_by_clip.end()) mit = masks_by_clip.find(clip);
        if (mit != masks_by_clip.end() && !mit->second.empty()) {
            for (auto& r : records) {
                const long frame = frame_index_of(r.id);
                auto it = mit->second.lower_bound(frame);
                if (it == mit->second.end()) --it;
                else if (it != mit->second.begin()) {
                    auto prev = std::prev(it);
                    if (frame - prev->first <= it->first - frame) it = prev;
                }
                cv::Mat mask = cv::imread(it->second.string(), cv::IMREAD_GRAYSCALE);
                if (mask.empty()) throw IoError("ingest: cannot load mask '" + it->second.string() + "'");
                if (mask.cols != r.width || mask.rows != r.height)
                    cv::resize(mask, mask, cv::Size(r.width, r.height), 0, 0, cv::INTER_NEAREST);
                for (const auto& box : mask_to_bboxes(mask, opt.min_mask_area))
                    r.annotations.push_back({box, PolypClass::Unknown});
            }
        }
        manifest.records.insert(manifest.records.end(), records.begin(), records.end());
    }

    if (opt.blur_filter) {
        double threshold;
        if (opt.blur_threshold) {
            threshold = *opt.blur_threshold;
        } else {
            auto scored = filter_blurry(manifest.records, manifest, 0.0);
            std::vector<double> scores;
            for (const auto& [id, s] : scored.scores) scores.push_back(s);
            threshold = suggest_blur_threshold(scores);
        }
        auto result = filter_blurry(manifest.records, manifest, threshold);
        for (const auto& [id, why] : result.failed)
            throw IoError("ingest: record '" + id + "': " + why);
        manifest.records = result.kept;
    }

    validate(manifest);
    return manifest;
}

DatasetManifest ingest_stills(const StillIngestOptions& opt, const std::string& dataset_name) {
    std::ifstream in(opt.boxes_file);
    if (!in) throw IoError("ingest: cannot open boxes file '" + opt.boxes_file + "'");

    DatasetManifest manifest;
    manifest.name = dataset_name;

    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string ctx = opt.boxes_file + ":" + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(ctx + ": invalid JSON (" + std::string(e.what()) + ")");
        }
        if (!j.contains("image") || !j["image"].is_string())
            throw FormatError(ctx + ": missing 'image'");
        const std::string image_name = j["image"].get<std::string>();
        const fs::path image_path = fs::path(opt.images_dir) / image_name;
        cv::Mat img = cv::imread(image_path.string(), cv::IMREAD_COLOR);
        if (img.empty()) throw IoError(ctx + ": cannot load image '" + image_path.string() + "'");

        ImageRecord r;
        r.id = fs::path(image_name).stem().string();
        r.path = image_path.string();
        r.width = img.cols;
        r.height = img.rows;
        r.modality = j.contains("modality")
                         ? modality_from_string(j["modality"].get<std::string>())
                         : Modality::WLI;
        // stills without clip provenance get a singleton clip
        r.clip_id = j.contains("clip_id") ? j["clip_id"].get<std::string>() : "still_" + r.id;

        if (j.contains("boxes")) {
            if (!j["boxes"].is_array()) throw FormatError(ctx + ": 'boxes' is not an array");
            std::vector<std::string> classes;
            if (j.contains("classes"))
                for (const auto& c : j["classes"]) classes.push_back(c.get<std::string>());
            size_t bi = 0;
            for (const auto& bj : j["boxes"]) {
                if (!bj.is_array() || bj.size() != 4)
                    throw FormatError(ctx + ": each box needs 4 numbers");
                const double a = bj[0].get<double>(), b = bj[1].get<double>(),
                             c = bj[2].get<double>(), d = bj[3].get<double>();
                BoundingBox box = opt.box_format == BoxFormat::Corners
                                      ? BoundingBox{a, b, c, d}
                                      : BoundingBox{a, b, a + c, b + d};
                Annotation ann;
                ann.box = box;
                ann.polyp_class = bi < classes.size() ? polyp_class_from_string(classes[bi])
                                                      : PolypClass::Unknown;
                r.annotations.push_back(ann);
                ++bi;
            }
        }
        manifest.records.push_back(std::move(r));
    }
    validate(manifest);
    return manifest;
}

} // namespace snbi::ingest
