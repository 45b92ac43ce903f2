#include <doctest.h>
#include <httplib.h>

#include <filesystem>
#include <nlohmann/json.hpp>
#include <set>
#include <thread>

#include "ccis/synth/captioner_client.hpp"
#include "ccis/synth/captions.hpp"
#include "ccis/synth/dataset.hpp"
#include "ccis/synth/imageio.hpp"
#include "ccis/util/color.hpp"
#include "ccis/util/hash.hpp"
#include "test_util.hpp"

using namespace ccis;
using namespace ccis::synth;
namespace fs = std::filesystem;

namespace {
PolypAttributes attrs(Color c, PolypShape s, Texture t, Swelling w, int row, int col, double r) {
    PolypAttributes a;
    a.color = c;
    a.shape = s;
    a.texture = t;
    a.swelling = w;
    a.center_row = row;
    a.center_col = col;
    a.radius = r;
    return a;
}

int64_t count_fg(const Array<uint8_t>& mask) {
    int64_t n = 0;
    for (auto v : mask.v) n += v ? 1 : 0;
    return n;
}

// flood fill over the 4-neighborhood
int component_count(const Array<uint8_t>& mask) {
    const int H = mask.dim(0), W = mask.dim(1);
    std::vector<uint8_t> seen(mask.v.size(), 0);
    int comps = 0;
    for (int start = 0; start < H * W; ++start) {
        if (!mask.v[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
        ++comps;
        std::vector<int> stack{start};
        seen[static_cast<size_t>(start)] = 1;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            const int r = p / W, c = p % W;
            const int nb[4] = {p - W, p + W, p - 1, p + 1};
            const bool ok[4] = {r > 0, r + 1 < H, c > 0, c + 1 < W};
            for (int k = 0; k < 4; ++k) {
                if (!ok[k]) continue;
                const auto q = static_cast<size_t>(nb[k]);
                if (mask.v[q] && !seen[q]) {
                    seen[q] = 1;
                    stack.push_back(nb[k]);
                }
            }
        }
    }
    return comps;
}
}  // namespace

TEST_CASE("hue bands are disjoint and the background stays clear of them") {
    for (double h = 0; h < 360.0; h += 0.25) {
        int owners = 0;
        for (int c = 0; c < kNumColors; ++c)
            if (hue_in_band(h, static_cast<Color>(c))) ++owners;
        CHECK(owners <= 1);
    }
    for (double h = kBgHueCenter - kBgHueSpread; h <= kBgHueCenter + kBgHueSpread; h += 0.25)
        for (int c = 0; c < kNumColors; ++c) CHECK(!hue_in_band(h, static_cast<Color>(c)));
}

TEST_CASE("generate_scene: round mask is the exact filled disk") {
    const auto a = attrs(Color::Red, PolypShape::Round, Texture::Smooth, Swelling::Raised, 32, 32, 8.0);
    const auto t = generate_scene(a, 64, 64, 7);
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c) {
            const bool inside = (r - 32) * (r - 32) + (c - 32) * (c - 32) <= 64;
            CHECK(t.mask[r * 64 + c] == (inside ? 1 : 0));
        }
}

TEST_CASE("generate_scene: deterministic, placement errors, component structure") {
    const auto a = attrs(Color::Pink, PolypShape::Oval, Texture::Granular, Swelling::Sessile, 30, 28, 7.0);
    const auto t1 = generate_scene(a, 64, 64, 9);
    const auto t2 = generate_scene(a, 64, 64, 9);
    CHECK(t1.image.v == t2.image.v);
    CHECK(t1.mask.v == t2.mask.v);
    CHECK(t1.caption_fg == t2.caption_fg);

    const auto bad = attrs(Color::Red, PolypShape::Round, Texture::Smooth, Swelling::Raised, 2, 2, 8.0);
    CHECK_THROWS_AS(generate_scene(bad, 64, 64, 1), PlacementError);
    CHECK_THROWS_AS(generate_scene(a, 16, 16, 1), ConfigError);  // below minimum size

    Rng rng(123);
    for (int i = 0; i < 50; ++i) {
        const auto rnd = sample_attributes(rng, 64, 64);
        const auto tr = generate_scene(rnd, 64, 64, derive_seed(55, uint64_t(i)));
        const auto fg = count_fg(tr.mask);
        CHECK(fg >= 1);
        CHECK(fg <= 64 * 64 / 2);
        CHECK(component_count(tr.mask) == 1);
    }
}

TEST_CASE("generate_scene: hue-band separability IoU >= 0.9 over 100 scenes") {
    Rng rng(2024);
    double worst = 1.0;
    for (int i = 0; i < 100; ++i) {
        const auto a = sample_attributes(rng, 64, 64);
        const auto t = generate_scene(a, 64, 64, derive_seed(77, uint64_t(i)));
        const int64_t hw = 64 * 64;
        int64_t inter = 0, uni = 0;
        for (int64_t p = 0; p < hw; ++p) {
            double h, s, v;
            rgb_to_hsv(t.image[p], t.image[hw + p], t.image[2 * hw + p], h, s, v);
            const bool inband = hue_in_band(h, a.color);
            const bool inmask = t.mask[p] != 0;
            inter += (inband && inmask) ? 1 : 0;
            uni += (inband || inmask) ? 1 : 0;
        }
        worst = std::min(worst, double(inter) / double(uni));
    }
    CHECK(worst >= 0.9);
}

TEST_CASE("caption_from_attributes: words present, seeds vary templates not attrs, round-trip") {
    const auto a = attrs(Color::Red, PolypShape::Round, Texture::Smooth, Swelling::Raised, 32, 32, 8.0);
    const auto [fg, bg] = caption_from_attributes(a, 0);
    const auto words = split_words(fg);
    for (const char* w : {"red", "round", "smooth", "raised"})
        CHECK(std::find(words.begin(), words.end(), w) != words.end());
    CHECK(!bg.empty());

    const auto cap0 = caption_from_attributes(a, 0);
    const auto cap1 = caption_from_attributes(a, 1);
    const auto p0 = parse_caption_attributes(cap0.first);
    const auto p1 = parse_caption_attributes(cap1.first);
    CHECK(p0.color == p1.color);
    CHECK(p0.shape == p1.shape);
    CHECK(p0.texture == p1.texture);
    CHECK(p0.swelling == p1.swelling);

    // round-trip oracle over the template grammar, 1000 random draws
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const auto ra = sample_attributes(rng, 64, 64);
        const auto cap = caption_from_attributes(ra, derive_seed(3, uint64_t(i)));
        const auto back = parse_caption_attributes(cap.first);
        REQUIRE(back.color == ra.color);
        REQUIRE(back.shape == ra.shape);
        REQUIRE(back.texture == ra.texture);
        REQUIRE(back.swelling == ra.swelling);
    }

    CHECK(foreground_templates().size() >= 4);
    CHECK(background_templates().size() >= 3);
    CHECK_THROWS_AS(parse_caption_attributes("a polyp with no attributes"), ValidationError);
}

TEST_CASE("build_dataset: manifest, determinism, histogram") {
    testutil::TempDir tmp("dataset");
    const auto d1 = (tmp.path / "d1").string();
    const auto d2 = (tmp.path / "d2").string();

    CHECK_THROWS_AS(build_dataset(0, 32, 32, 1, d1), ConfigError);

    const auto m = build_dataset(8, 32, 32, 1, d1);
    CHECK(m.n_records == 8);
    for (const auto& rec : m.records) {
        CHECK(fs::exists(fs::path(d1) / rec.image));
        CHECK(fs::exists(fs::path(d1) / rec.mask));
    }
    CHECK(fs::exists(fs::path(d1) / "manifest.json"));
    CHECK(fs::exists(fs::path(d1) / "captions.jsonl"));

    // byte-identical regeneration
    build_dataset(8, 32, 32, 1, d2);
    for (const auto& rec : m.records) {
        CHECK(read_file_bytes((fs::path(d1) / rec.image).string()) ==
              read_file_bytes((fs::path(d2) / rec.image).string()));
        CHECK(read_file_bytes((fs::path(d1) / rec.mask).string()) ==
              read_file_bytes((fs::path(d2) / rec.mask).string()));
    }
    CHECK(read_file_bytes((fs::path(d1) / "manifest.json").string()) ==
          read_file_bytes((fs::path(d2) / "manifest.json").string()));
    CHECK(read_file_bytes((fs::path(d1) / "captions.jsonl").string()) ==
          read_file_bytes((fs::path(d2) / "captions.jsonl").string()));

    // load round trip: masks must be strictly 0/255 on disk, binary in memory
    const auto ds = load_dataset(d1);
    CHECK(ds.records.size() == 8);
    const auto png = png_read((fs::path(d1) / m.records[0].mask).string());
    for (auto b : png.data) CHECK((b == 0 || b == 255));

    // attribute histogram: binomial tail keeps each color within 25% +- 3%
    Rng rng(99);
    std::array<int, kNumColors> hist{};
    const int n = 4000;
    for (int i = 0; i < n; ++i) ++hist[static_cast<size_t>(sample_attributes(rng, 64, 64).color)];
    for (int c = 0; c < kNumColors; ++c) {
        const double freq = double(hist[static_cast<size_t>(c)]) / n;
        CHECK(freq > 0.22);
        CHECK(freq < 0.28);
    }
}

TEST_CASE("captioner clients: fallback, validation, http mock") {
    const auto a = attrs(Color::Pale, PolypShape::Flat, Texture::Lobulated, Swelling::SlightlyRaised,
                         32, 32, 7.0);
    const auto t = generate_scene(a, 64, 64, 13);

    TemplateCaptioner offline(a, 13);
    const auto caps = llm_caption_request(t.image, t.mask, "prompt", offline);
    CHECK(caps == caption_from_attributes(a, 13));

    struct MockClient final : CaptionerClient {
        std::pair<std::string, std::string> reply;
        std::pair<std::string, std::string> caption(const Array<float>&, const Array<uint8_t>&,
                                                    const std::string&) override {
            return reply;
        }
    };
    MockClient mock;
    mock.reply = {"", "background"};
    CHECK_THROWS_AS(llm_caption_request(t.image, t.mask, "p", mock), ValidationError);
    mock.reply = {std::string(600, 'x'), "bg"};
    CHECK_THROWS_AS(llm_caption_request(t.image, t.mask, "p", mock), ValidationError);
    mock.reply = {"a fixed sentence", "a fixed background"};
    CHECK(llm_caption_request(t.image, t.mask, "p", mock).first == "a fixed sentence");

    // live HTTP round trip against a local server
    httplib::Server svr;
    std::string seen_auth;
    svr.Post("/caption", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        const auto body = nlohmann::json::parse(req.body);
        REQUIRE(body.contains("prompt"));
        REQUIRE(body.contains("image_b64"));
        REQUIRE(body.contains("mask_b64"));
        nlohmann::json reply;
        reply["caption_fg"] = "served foreground";
        reply["caption_bg"] = "served background";
        res.set_content(reply.dump(), "application/json");
    });
    const int port = svr.bind_to_any_port("127.0.0.1");
    std::thread th([&svr] { svr.listen_after_bind(); });
    svr.wait_until_ready();

    HttpCaptioner http("http://127.0.0.1:" + std::to_string(port) + "/caption", "secret-token");
    const auto served = llm_caption_request(t.image, t.mask, "describe", http);
    CHECK(served.first == "served foreground");
    CHECK(served.second == "served background");
    CHECK(seen_auth == "Bearer secret-token");

    // unreachable endpoint -> retriable error with attempt count
    HttpCaptioner dead("http://127.0.0.1:1/caption", "", /*max_retries=*/2, /*timeout_sec=*/1);
    try {
        llm_caption_request(t.image, t.mask, "p", dead);
        CHECK(false);
    } catch (const RetriableError& e) {
        CHECK(e.attempts == 2);
    }

    svr.stop();
    th.join();
}

TEST_CASE("build_dataset with an http captioner stores the served captions verbatim") {
    httplib::Server svr;
    svr.Post("/cap", [&](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"caption_fg":"fixed fg sentence","caption_bg":"fixed bg sentence"})",
                        "application/json");
    });
    const int port = svr.bind_to_any_port("127.0.0.1");
    std::thread th([&svr] { svr.listen_after_bind(); });
    svr.wait_until_ready();

    testutil::TempDir tmp("http_ds");
    HttpCaptioner http("http://127.0.0.1:" + std::to_string(port) + "/cap", "");
    build_dataset(2, 32, 32, 3, tmp.path.string(), CaptionerKind::Http, &http);
    const auto ds = load_dataset(tmp.path.string());
    CHECK(ds.records[0].caption_fg == "fixed fg sentence");
    CHECK(ds.records[1].caption_bg == "fixed bg sentence");

    svr.stop();
    th.join();
}
