#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ccis/synth/captioner_client.hpp"
#include "ccis/synth/scene.hpp"

namespace ccis::synth {

inline constexpr const char* kDatasetVersion = "1";

struct ManifestRecord {
    std::string id;
    std::string image;    // relative path
    std::string mask;     // relative path
    std::string caption;  // relative path of the caption store
};

struct DatasetManifest {
    std::string version = kDatasetVersion;
    int n_records = 0;
    int height = 0, width = 0;
    uint64_t seed = 0;
    std::vector<ManifestRecord> records;
};

enum class CaptionerKind { Template, Http };

// Writes n triplets under out_dir:
//   manifest.json, images/<id>.png (RGB8), masks/<id>.png (0/255 gray),
//   captions.jsonl (one {id, caption_fg, caption_bg, attributes} per line).
// Attributes are sampled uniformly over the vocabulary cross product; each
// record derives its RNG stream from (seed, index), so regeneration from the
// same (version, seed) is byte-identical and order-independent.
DatasetManifest build_dataset(int n, int height, int width, uint64_t seed,
                              const std::string& out_dir,
                              CaptionerKind kind = CaptionerKind::Template,
                              CaptionerClient* http_client = nullptr);

struct Dataset {
    DatasetManifest manifest;
    std::vector<Triplet> records;
    std::string dir;
    std::string manifest_hash;  // hex of the manifest.json bytes
};

Dataset load_dataset(const std::string& dir);
DatasetManifest load_manifest(const std::string& dir);
std::string manifest_hash_of(const std::string& dir);

// Deterministic 90/10 split by record index; the tail is held out.
std::vector<int> train_indices(int n);
std::vector<int> test_indices(int n);

}  // namespace ccis::synth
