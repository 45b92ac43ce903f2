#include "ccis/synth/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "ccis/core/errors.hpp"
#include "ccis/synth/imageio.hpp"
#include "ccis/util/hash.hpp"

namespace ccis::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string record_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

template <class Words>
int word_index(const Words& words, const std::string& w, const char* what) {
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i] == w) return static_cast<int>(i);
    throw ValidationError(std::string("unknown ") + what + " word: " + w);
}

json attributes_to_json(const PolypAttributes& a) {
    json j;
    j["color"] = attribute_word(a.color);
    j["shape"] = attribute_word(a.shape);
    j["texture"] = attribute_word(a.texture);
    j["swelling"] = attribute_word(a.swelling);
    j["center"] = {a.center_row, a.center_col};
    j["radius"] = a.radius;
    return j;
}

PolypAttributes attributes_from_json(const json& j) {
    PolypAttributes a;
    a.color = static_cast<Color>(word_index(color_words(), j.at("color"), "color"));
    a.shape = static_cast<PolypShape>(word_index(shape_words(), j.at("shape"), "shape"));
    a.texture = static_cast<Texture>(word_index(texture_words(), j.at("texture"), "texture"));
    a.swelling = static_cast<Swelling>(word_index(swelling_words(), j.at("swelling"), "swelling"));
    a.center_row = j.at("center")[0];
    a.center_col = j.at("center")[1];
    a.radius = j.at("radius");
    return a;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + p.string());
    f << text;
    if (!f) throw IoError("write failed: " + p.string());
}

}  // namespace

DatasetManifest build_dataset(int n, int height, int width, uint64_t seed,
                              const std::string& out_dir, CaptionerKind kind,
                              CaptionerClient* http_client) {
    if (n < 1) throw ConfigError("dataset size must be >= 1");
    if (height < 32 || width < 32) throw ConfigError("image_size must be at least 32x32");
    if (kind == CaptionerKind::Http && !http_client)
        throw ConfigError("http captioner selected but no client configured");

    const fs::path root(out_dir);
    std::error_code ec;
    fs::create_directories(root / "images", ec);
    fs::create_directories(root / "masks", ec);
    if (!fs::exists(root / "images") || !fs::exists(root / "masks"))
        throw IoError("cannot create dataset directories under " + out_dir);

    DatasetManifest manifest;
    manifest.n_records = n;
    manifest.height = height;
    manifest.width = width;
    manifest.seed = seed;

    std::string captions_text;
    Rng base(seed);
    for (int i = 0; i < n; ++i) {
        const uint64_t rec_seed = derive_seed(seed, uint64_t(i));
        Rng rec_rng(rec_seed);
        const PolypAttributes attrs = sample_attributes(rec_rng, height, width);
        Triplet t = generate_scene(attrs, height, width, rec_seed);
        t.id = record_id(i);

        if (kind == CaptionerKind::Http) {
            auto caps = llm_caption_request(
                t.image, t.mask,
                "describe the polyp (color, shape, texture, swelling) and the background mucosa",
                *http_client);
            t.caption_fg = caps.first;
            t.caption_bg = caps.second;
        }

        ManifestRecord rec;
        rec.id = t.id;
        rec.image = "images/" + t.id + ".png";
        rec.mask = "masks/" + t.id + ".png";
        rec.caption = "captions.jsonl";
        manifest.records.push_back(rec);

        png_write((root / rec.image).string(), to_png_rgb(t.image));
        png_write((root / rec.mask).string(), mask_to_png(t.mask));

        json line;
        line["id"] = t.id;
        line["caption_fg"] = t.caption_fg;
        line["caption_bg"] = t.caption_bg;
        line["attributes"] = attributes_to_json(t.attributes);
        captions_text += line.dump();
        captions_text += "\n";
    }
    write_text(root / "captions.jsonl", captions_text);

    json m;
    m["version"] = manifest.version;
    m["n_records"] = manifest.n_records;
    m["image_size"] = {height, width};
    m["seed"] = manifest.seed;
    json recs = json::array();
    for (const auto& r : manifest.records)
        recs.push_back({{"id", r.id}, {"image", r.image}, {"mask", r.mask}, {"caption", r.caption}});
    m["records"] = recs;
    write_text(root / "manifest.json", m.dump(2) + "\n");
    return manifest;
}

DatasetManifest load_manifest(const std::string& dir) {
    const fs::path root(dir);
    json m;
    try {
        m = json::parse(read_file_bytes((root / "manifest.json").string()));
    } catch (const json::exception& e) {
        throw IoError("manifest.json is not valid JSON in " + dir + ": " + e.what());
    }
    DatasetManifest manifest;
    manifest.version = m.at("version");
    manifest.n_records = m.at("n_records");
    manifest.height = m.at("image_size")[0];
    manifest.width = m.at("image_size")[1];
    manifest.seed = m.at("seed");
    for (const auto& r : m.at("records")) {
        ManifestRecord rec{r.at("id"), r.at("image"), r.at("mask"), r.at("caption")};
        manifest.records.push_back(rec);
    }
    if (static_cast<int>(manifest.records.size()) != manifest.n_records)
        throw ValidationError("manifest n_records does not match its record list");
    return manifest;
}

std::string manifest_hash_of(const std::string& dir) {
    return hash_hex(fnv1a64(read_file_bytes((fs::path(dir) / "manifest.json").string())));
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.dir = dir;
    ds.manifest = load_manifest(dir);
    ds.manifest_hash = manifest_hash_of(dir);

    const fs::path root(dir);
    std::map<std::string, json> captions;
    {
        std::ifstream f(root / "captions.jsonl");
        if (!f) throw IoError("cannot open " + (root / "captions.jsonl").string());
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            captions[j.at("id")] = j;
        }
    }

    for (const auto& rec : ds.manifest.records) {
        const auto img_path = root / rec.image;
        const auto mask_path = root / rec.mask;
        if (!fs::exists(img_path)) throw IoError("dataset is missing " + img_path.string());
        if (!fs::exists(mask_path)) throw IoError("dataset is missing " + mask_path.string());

        Triplet t;
        t.id = rec.id;
        t.image = from_png_rgb(png_read(img_path.string()));
        t.mask = png_to_mask(png_read(mask_path.string()));
        auto it = captions.find(rec.id);
        if (it == captions.end()) throw ValidationError("captions.jsonl has no entry for " + rec.id);
        t.caption_fg = it->second.at("caption_fg");
        t.caption_bg = it->second.at("caption_bg");
        t.attributes = attributes_from_json(it->second.at("attributes"));
        ds.records.push_back(std::move(t));
    }
    return ds;
}

std::vector<int> test_indices(int n) {
    const int k = std::max(1, (n + 9) / 10);
    std::vector<int> idx;
    for (int i = n - k; i < n; ++i) idx.push_back(i);
    return idx;
}

std::vector<int> train_indices(int n) {
    const int k = std::max(1, (n + 9) / 10);
    std::vector<int> idx;
    for (int i = 0; i < n - k; ++i) idx.push_back(i);
    return idx;
}

}  // namespace ccis::synth
