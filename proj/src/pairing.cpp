#include "snbi/pairing.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "snbi/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace snbi::pairing {

BuildResult build_semi_pairs(const DatasetManifest& manifest) {
    std::vector<SemiPairIndex::Clip> all;
    std::map<std::string, size_t> by_clip;
    for (const auto& r : manifest.records) {
        if (r.modality == Modality::SNBI) continue;
        auto [it, inserted] = by_clip.emplace(r.clip_id, all.size());
        if (inserted) all.push_back({r.clip_id, {}, {}});
        auto& clip = all[it->second];
        if (r.modality == Modality::WLI)
            clip.wli.push_back(r.id);
        else
            clip.nbi.push_back(r.id);
    }

    BuildResult result;
    for (auto& clip : all) {
        if (clip.wli.empty() || clip.nbi.empty())
            result.excluded_clips.push_back(clip.clip_id);
        else
            result.index.clips.push_back(std::move(clip));
    }
    if (result.index.empty())
        throw ValidationError("build_semi_pairs: no clip holds both WLI and NBI records");
    return result;
}

std::pair<std::string, std::string> sample_pair(const SemiPairIndex& index, Rng& rng) {
    if (index.empty()) throw ValidationError("sample_pair: empty index");
    const auto& clip = index.clips[rng.index(index.clips.size())];
    const std::string& wli = clip.wli[rng.index(clip.wli.size())];
    const std::string& nbi = clip.nbi[rng.index(clip.nbi.size())];
    return {wli, nbi};
}

EpochIterator::EpochIterator(const SemiPairIndex& index, uint64_t iterations, uint64_t seed)
    : index_(index), remaining_(iterations), rng_(seed) {
    if (iterations < 1) throw ValidationError("EpochIterator: iterations must be >= 1");
    if (index.empty()) throw ValidationError("EpochIterator: empty index");
}

bool EpochIterator::next(std::pair<std::string, std::string>& out) {
    if (remaining_ == 0) return false;
    --remaining_;
    out = sample_pair(index_, rng_);
    return true;
}

void save_index(const SemiPairIndex& index, const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write index '" + path + "'");
    json header;
    header["semi_pair_index"] = true;
    header["clips"] = index.clips.size();
    out << header.dump() << "\n";
    for (const auto& c : index.clips) {
        json j;
        j["clip_id"] = c.clip_id;
        j["wli"] = c.wli;
        j["nbi"] = c.nbi;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failure on '" + path + "'");
}

SemiPairIndex load_index(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open index '" + path + "'");
    SemiPairIndex index;
    std::string line;
    int line_no = 0;
    bool have_header = false;
    std::set<std::string> seen_ids;
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
            if (!j.contains("semi_pair_index"))
                throw FormatError(ctx + ": expected semi-pair index header");
            have_header = true;
            continue;
        }
        SemiPairIndex::Clip c;
        c.clip_id = j.at("clip_id").get<std::string>();
        for (const auto& id : j.at("wli")) c.wli.push_back(id.get<std::string>());
        for (const auto& id : j.at("nbi")) c.nbi.push_back(id.get<std::string>());
        if (c.wli.empty() || c.nbi.empty())
            throw ValidationError(ctx + ": clip '" + c.clip_id + "' is missing a modality");
        for (const auto& id : c.wli)
            if (!seen_ids.insert(id).second)
                throw ValidationError(ctx + ": record '" + id + "' appears twice in the index");
        for (const auto& id : c.nbi)
            if (!seen_ids.insert(id).second)
                throw ValidationError(ctx + ": record '" + id + "' appears twice in the index");
        index.clips.push_back(std::move(c));
    }
    if (index.empty()) throw ValidationError(path + ": empty semi-pair index");
    return index;
}

} // namespace snbi::pairing
