#pragma once

#include <memory>
#include <string>
#include <utility>

#include "ccis/synth/scene.hpp"

namespace ccis::synth {

// Produces (caption_fg, caption_bg) for an image/mask pair. The HTTP variant
// talks to an external captioning service; the template variant is the offline
// fallback and needs the scene attributes that the pipeline already has.
class CaptionerClient {
  public:
    virtual ~CaptionerClient() = default;
    virtual std::pair<std::string, std::string> caption(const Array<float>& image,
                                                        const Array<uint8_t>& mask,
                                                        const std::string& prompt) = 0;
};

class TemplateCaptioner final : public CaptionerClient {
  public:
    TemplateCaptioner(PolypAttributes attrs, uint64_t seed) : attrs_(attrs), seed_(seed) {}
    std::pair<std::string, std::string> caption(const Array<float>&, const Array<uint8_t>&,
                                                const std::string&) override;

  private:
    PolypAttributes attrs_;
    uint64_t seed_;
};

// POST {prompt, image_b64, mask_b64} as JSON, expects {caption_fg, caption_bg}.
// Images travel as base64-encoded PNG bytes. Network failures and 5xx are
// retried with backoff, then surface as RetriableError carrying the attempt
// count; anything structurally wrong is a ValidationError.
class HttpCaptioner final : public CaptionerClient {
  public:
    HttpCaptioner(std::string url, std::string token, int max_retries = 3, int timeout_sec = 10)
        : url_(std::move(url)), token_(std::move(token)), max_retries_(max_retries),
          timeout_sec_(timeout_sec) {}

    // Reads CCIS_CAPTIONER_URL and CCIS_CAPTIONER_TOKEN.
    static HttpCaptioner from_env();

    std::pair<std::string, std::string> caption(const Array<float>& image,
                                                const Array<uint8_t>& mask,
                                                const std::string& prompt) override;

  private:
    std::string url_, token_;
    int max_retries_, timeout_sec_;
};

// Requests captions through the client and validates the response (both
// captions non-empty and shorter than 512 characters) before accepting it.
std::pair<std::string, std::string> llm_caption_request(const Array<float>& image,
                                                        const Array<uint8_t>& mask,
                                                        const std::string& prompt_template,
                                                        CaptionerClient& client);

}  // namespace ccis::synth
