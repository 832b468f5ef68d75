#pragma once

#include <sdlab/bench/suite.hpp>

#include <chrono>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace sdlab::bench {

/// The generation context sent as the system message, reproduced from the
/// dataset-construction dialogue it mirrors. Byte-stable across calls.
inline const std::string& compose_context() {
  static const std::string ctx = R"(You are an assistant helping me create a dataset for image editing. You will be given an image. First, you will return a short description of that image. Then, you have to specify a target prompt for editing the given image. The target prompt should be mostly similar to the source prompt. The target must change the source image in one of the following ways:

1. changing appearance: changing only the texture or the style of the given image without varying its structure. For example, a red shirt to a blue shirt, a watercolor dragon to a photorealistic dragon, a horse to a zebra, a man to a clown, etc

2. adding a new object to the scene: almost keeping the given image intact (but you can delete part of it) and adding a new object to the scene. For instance, a duck to a duck wearing sunglasses, a dragon to a dragon wearing a party hat, a flamingo to a flamingo on a skateboard, etc

3. translate the shape: you can change the structure of the image, but it should change to something similar in terms of geometry structure: a cat to a dog, a knight riding a horse to a knight riding an elephant, etc

Make sure to diversify the target prompt beyond my example. The target prompt should be concise and only have 1 change for each.

The input will be an image and a path to that image, you are expected to return a JSON text similar to this:

{
    "path": "objaverse_synthetic/b363f8f4f7394ddb9d5b3a337f2f7fc7",
    "source_prompt": "A pink flamingo standing on one leg",
    "target_prompt": "A pink flamingo with rainbow feathers standing on one leg",
    "type": "texturing"
},
{
    "path": "objaverse_synthetic/b363f8f4f7394ddb9d5b3a337f2f7fc7",
    "source_prompt": "A pink flamingo standing on one leg",
    "target_prompt": "Photorealistic pink flamingo standing, wearing a gold necklace",
    "type": "addition"
},
{
    "path": "objaverse_synthetic/b363f8f4f7394ddb9d5b3a337f2f7fc7",
    "source_prompt": "A pink flamingo standing on one leg",
    "target_prompt": "A pink crane standing on one leg",
    "type": "translation"
},
)";
  return ctx;
}

/// The canonical well-formed reply used by the offline mock: three entries
/// for the flower-box asset, one per edit type.
inline const std::string& flower_box_fixture() {
  static const std::string fixture = R"({
    "path": "objaverse_synthetic/e114ab027906482abe7daa04eef60e95",
    "source_prompt": "Flower box with blooms",
    "target_prompt": "Flower box with autumn leaves",
    "type": "texturing"
},
{
    "path": "objaverse_synthetic/e114ab027906482abe7daa04eef60e95",
    "source_prompt": "Flower box with blooms",
    "target_prompt": "Flower box with a butterfly",
    "type": "addition"
},
{
    "path": "objaverse_synthetic/e114ab027906482abe7daa04eef60e95",
    "source_prompt": "Flower box with blooms",
    "target_prompt": "Herb garden box",
    "type": "translation"
}
)";
  return fixture;
}

inline constexpr const char* kFlowerBoxAssetPath =
    "objaverse_synthetic/e114ab027906482abe7daa04eef60e95";

/// One generation request. The auth token is referenced by environment
/// variable name only; its value is read at send time and exists nowhere in
/// this struct, in logs, or in serialized request bodies.
struct GenRequest {
  std::string asset_path;
  std::string image_png;  // raw PNG bytes of the front view
  std::string context_id = "noe-v1";
  std::string endpoint;
  std::string token_env;  // name of the env var holding the bearer token

  void validate() const {
    if (asset_path.empty()) throw std::invalid_argument("gen request: asset path is empty");
    if (image_png.empty()) throw std::invalid_argument("gen request: image is empty");
    if (endpoint.find("://") == std::string::npos)
      throw std::invalid_argument("gen request: endpoint is not a URL: " + endpoint);
  }
};

struct TransportError : std::runtime_error {
  int status = 0;
  TransportError(int status_, const std::string& what)
      : std::runtime_error("transport error (status " + std::to_string(status_) + "): " + what),
        status(status_) {}
};

struct GenerationError : std::runtime_error {
  std::string raw_reply;  // last reply, kept for inspection
  GenerationError(const std::string& what, std::string raw)
      : std::runtime_error(what), raw_reply(std::move(raw)) {}
};

using Header = std::pair<std::string, std::string>;

/// Wire abstraction: POST a JSON body, get the reply body back. The real
/// implementation lives in the CLI target; tests and mock mode inject fakes,
/// which doubles as the proof that mock mode performs no network calls.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string post_json(const std::string& url, const std::string& body,
                                const std::vector<Header>& headers) = 0;
};

/// Offline transport: replays a scripted list of replies and counts calls.
class MockTransport : public Transport {
 public:
  MockTransport() : replies_{flower_box_fixture()} {}
  explicit MockTransport(std::vector<std::string> replies) : replies_(std::move(replies)) {}

  std::string post_json(const std::string&, const std::string& body,
                        const std::vector<Header>&) override {
    bodies_.push_back(body);
    if (replies_.empty()) throw TransportError(0, "mock transport has no reply scripted");
    std::string r = replies_.front();
    if (replies_.size() > 1) replies_.erase(replies_.begin());
    return r;
  }

  int calls() const { return int(bodies_.size()); }
  const std::vector<std::string>& request_bodies() const { return bodies_; }

 private:
  std::vector<std::string> replies_;  // last reply repeats
  std::vector<std::string> bodies_;
};

namespace detail {

inline std::string base64_encode(const std::string& in) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < in.size(); i += 3) {
    unsigned v = (unsigned char)in[i] << 16;
    if (i + 1 < in.size()) v |= (unsigned char)in[i + 1] << 8;
    if (i + 2 < in.size()) v |= (unsigned char)in[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(i + 1 < in.size() ? tbl[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < in.size() ? tbl[v & 63] : '=');
  }
  return out;
}

/// Validates a parsed reply for one asset: exactly one entry per type, every
/// path matching the request.
inline void validate_reply(const std::vector<BenchEntry>& entries,
                           const std::string& asset_path) {
  int seen[3] = {0, 0, 0};
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].path != asset_path)
      throw BenchParseError(int(i), "path",
                            "field 'path' mismatch: got '" + entries[i].path + "', expected '" +
                                asset_path + "'");
    ++seen[int(entries[i].type)];
  }
  for (int t = 0; t < 3; ++t) {
    if (seen[t] != 1)
      throw BenchParseError(-1, "type",
                            std::string("expected exactly one '") +
                                scenes::kEditTypeNames[std::size_t(t)] + "' entry, got " +
                                std::to_string(seen[t]));
  }
}

}  // namespace detail

struct GenClientConfig {
  int max_attempts = 3;
  double min_request_interval_s = 1.0;  // simple client-side rate limit
};

/// Chat-completion client for benchmark generation. Stateless per request
/// apart from the rate limiter; safe to reuse across assets.
class GenClient {
 public:
  using LogFn = std::function<void(const std::string&)>;

  GenClient(Transport& transport, GenClientConfig cfg = {}, LogFn debug_log = nullptr)
      : transport_(transport), cfg_(cfg), log_(std::move(debug_log)) {}

  /// Sends {context, image, "path: ..."} and returns the validated entries.
  /// Schema failures are retried with the validation error appended to the
  /// conversation; transport failures propagate immediately.
  std::vector<BenchEntry> request_entries(const GenRequest& req) {
    req.validate();
    ojson messages = ojson::array();
    messages.push_back({{"role", "system"}, {"content", compose_context()}});
    ojson user_content = ojson::array();
    user_content.push_back(
        {{"type", "image"}, {"image_base64", detail::base64_encode(req.image_png)}});
    user_content.push_back({{"type", "text"}, {"text", "path: " + req.asset_path}});
    messages.push_back({{"role", "user"}, {"content", std::move(user_content)}});

    std::vector<Header> headers;
    if (!req.token_env.empty()) {
      const char* token = std::getenv(req.token_env.c_str());
      if (!token || !*token)
        throw std::runtime_error("auth token environment variable is unset: " + req.token_env);
      headers.emplace_back("Authorization", std::string("Bearer ") + token);
    }

    std::string last_reply;
    std::string last_error;
    for (int attempt = 0; attempt < cfg_.max_attempts; ++attempt) {
      ojson body;
      body["context_id"] = req.context_id;
      body["messages"] = messages;
      const std::string body_text = body.dump();
      if (log_) log_("request " + std::to_string(attempt + 1) + ": " + redacted(body));

      rate_limit();
      last_reply = transport_.post_json(req.endpoint, body_text, headers);
      if (log_) log_("reply " + std::to_string(attempt + 1) + ": " + last_reply);

      try {
        std::vector<BenchEntry> entries = parse_entries(last_reply);
        detail::validate_reply(entries, req.asset_path);
        return entries;
      } catch (const BenchParseError& ex) {
        last_error = ex.what();
        messages.push_back({{"role", "assistant"}, {"content", last_reply}});
        messages.push_back(
            {{"role", "user"},
             {"content", "Your reply failed validation: " + last_error +
                             ". Return exactly three JSON entries (one per type: texturing, "
                             "addition, translation) for path: " +
                             req.asset_path}});
      }
    }
    throw GenerationError("reply failed validation after " + std::to_string(cfg_.max_attempts) +
                              " attempts; last error: " + last_error,
                          last_reply);
  }

 private:
  Transport& transport_;
  GenClientConfig cfg_;
  LogFn log_;
  std::chrono::steady_clock::time_point last_request_{};
  bool any_request_ = false;

  void rate_limit() {
    if (cfg_.min_request_interval_s <= 0) return;
    const auto now = std::chrono::steady_clock::now();
    if (any_request_) {
      const auto min_gap = std::chrono::duration<double>(cfg_.min_request_interval_s);
      const auto elapsed = std::chrono::duration<double>(now - last_request_);
      if (elapsed < min_gap) std::this_thread::sleep_for(min_gap - elapsed);
    }
    any_request_ = true;
    last_request_ = std::chrono::steady_clock::now();
  }

  // Debug logging shows request bodies with the image payload elided; auth
  // headers are never logged anywhere.
  static std::string redacted(ojson body) {
    for (auto& msg : body["messages"])
      if (msg.contains("content") && msg["content"].is_array())
        for (auto& part : msg["content"])
          if (part.contains("image_base64"))
            part["image_base64"] =
                "<" + std::to_string(part["image_base64"].get<std::string>().size()) +
                " base64 bytes elided>";
    return body.dump();
  }
};

}  // namespace sdlab::bench
