#include "ccis/synth/captioner_client.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <thread>

#include "ccis/core/errors.hpp"
#include "ccis/synth/captions.hpp"
#include "ccis/synth/imageio.hpp"
#include "ccis/util/base64.hpp"

namespace ccis::synth {

using nlohmann::json;

std::pair<std::string, std::string> TemplateCaptioner::caption(const Array<float>&,
                                                               const Array<uint8_t>&,
                                                               const std::string&) {
    return caption_from_attributes(attrs_, seed_);
}

HttpCaptioner HttpCaptioner::from_env() {
    const char* url = std::getenv("CCIS_CAPTIONER_URL");
    if (!url || !*url)
        throw ConfigError("CCIS_CAPTIONER_URL is not set but the http captioner was selected");
    const char* token = std::getenv("CCIS_CAPTIONER_TOKEN");
    return HttpCaptioner(url, token ? token : "");
}

namespace {
void split_url(const std::string& url, std::string& base, std::string& path) {
    const auto scheme = url.find("://");
    const auto slash = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (slash == std::string::npos) {
        base = url;
        path = "/";
    } else {
        base = url.substr(0, slash);
        path = url.substr(slash);
    }
}
}  // namespace

std::pair<std::string, std::string> HttpCaptioner::caption(const Array<float>& image,
                                                           const Array<uint8_t>& mask,
                                                           const std::string& prompt) {
    std::string base, path;
    split_url(url_, base, path);

    json body;
    body["prompt"] = prompt;
    body["image_b64"] = base64_encode(png_encode(to_png_rgb(image)));
    body["mask_b64"] = base64_encode(png_encode(mask_to_png(mask)));
    const std::string payload = body.dump();

    httplib::Client cli(base);
    cli.set_connection_timeout(timeout_sec_, 0);
    cli.set_read_timeout(timeout_sec_, 0);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

    int attempts = 0;
    for (; attempts < max_retries_; ++attempts) {
        if (attempts > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(50 * (1 << attempts)));
        auto res = cli.Post(path, headers, payload, "application/json");
        if (!res || res->status >= 500) continue;  // transient: retry
        if (res->status != 200)
            throw ValidationError("captioner returned HTTP " + std::to_string(res->status));
        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const json::exception& e) {
            throw ValidationError(std::string("captioner reply is not JSON: ") + e.what());
        }
        if (!reply.contains("caption_fg") || !reply.contains("caption_bg") ||
            !reply["caption_fg"].is_string() || !reply["caption_bg"].is_string())
            throw ValidationError("captioner reply is missing caption_fg/caption_bg strings");
        return {reply["caption_fg"].get<std::string>(), reply["caption_bg"].get<std::string>()};
    }
    throw RetriableError("captioner unreachable after " + std::to_string(attempts) + " attempts",
                         attempts);
}

std::pair<std::string, std::string> llm_caption_request(const Array<float>& image,
                                                        const Array<uint8_t>& mask,
                                                        const std::string& prompt_template,
                                                        CaptionerClient& client) {
    auto caps = client.caption(image, mask, prompt_template);
    for (const auto* c : {&caps.first, &caps.second}) {
        if (c->empty()) throw ValidationError("captioner returned an empty caption");
        if (c->size() >= 512) throw ValidationError("captioner caption exceeds 512 characters");
    }
    return caps;
}

}  // namespace ccis::synth
