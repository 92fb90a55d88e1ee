#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "snbi/rng.hpp"
#include "snbi/types.hpp"

namespace snbi::pairing {

/// Per-clip WLI/NBI record ids; only clips holding both modalities appear.
struct SemiPairIndex {
    struct Clip {
        std::string clip_id;
        std::vector<std::string> wli;
        std::vector<std::string> nbi;
    };
    std::vector<Clip> clips; // ordered by first appearance in the manifest

    bool empty() const { return clips.empty(); }
    size_t total_wli() const {
        size_t n = 0;
        for (const auto& c : clips) n += c.wli.size();
        return n;
    }
};

struct BuildResult {
    SemiPairIndex index;
    std::vector<std::string> excluded_clips; // clips missing one modality
};

/// Groups manifest records by clip, keeping clips that hold at least one WLI
/// and one NBI record. SNBI records never participate. Throws when no clip
/// qualifies.
BuildResult build_semi_pairs(const DatasetManifest& manifest);

/// Uniform clip choice, then uniform frame choice within each modality list.
/// Both ids share the clip by construction.
std::pair<std::string, std::string> sample_pair(const SemiPairIndex& index, Rng& rng);

/// Seeded stream of exactly `iterations` sampled pairs.
class EpochIterator {
public:
    EpochIterator(const SemiPairIndex& index, uint64_t iterations, uint64_t seed);
    bool next(std::pair<std::string, std::string>& out);
    uint64_t remaining() const { return remaining_; }

private:
    const SemiPairIndex& index_;
    uint64_t remaining_;
    Rng rng_;
};

void save_index(const SemiPairIndex& index, const std::string& path);
SemiPairIndex load_index(const std::string& path);

} // namespace snbi::pairing
