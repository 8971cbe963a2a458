#include "differ/semantics.hpp"

#include <cctype>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "differ/error.hpp"
#include "differ/rng.hpp"
#include "differ/sha256.hpp"

namespace differ {

namespace {

const std::map<Aspect, std::string>& default_prompts() {
  static const std::map<Aspect, std::string> prompts = {
      {Aspect::kBiometric,
       "Describe the individual's overall physical appearance, including estimated age, gender, "
       "height (e.g., short, average, tall based on surroundings if applicable), and build(e.g., "
       "slender, average, robust)."},
      {Aspect::kHair,
       "Provide a detailed description of the hair features, including hair color, style, and "
       "length"},
      {Aspect::kClothing,
       "Detail the type of clothing the person is wearing(the style, colors, and any visible "
       "logos or patterns), shoes and any accessories (e.g., glasses, watches, jewelry)."},
      {Aspect::kPose,
       "Describe the person's posture when the image was taken (e.g., standing straight, "
       "leaning, walking). Note any characteristics of the gait, such as limping, brisk walking, "
       "or any peculiarities that stand out. Mention the alignment and demeanor suggested by the "
       "posture (e.g., confident, tired, hurried)."},
      {Aspect::kBackground,
       "Describe the setting or background in which the person is located (e.g., urban street, "
       "office, park). Identify any objects or elements in the vicinity that the person is "
       "interacting with or that are relevant to the scene. Assess the general atmosphere or "
       "mood of the environment, such as busy, tranquil, chaotic, etc."},
      {Aspect::kBiometricSummary,
       "Summarize the individual's overall physical appearance, only including estimated age, "
       "gender, height (e.g., short, average, tall based on surroundings if applicable), and "
       "build (e.g., slender, average, robust) based on the following information. Do not "
       "summarize the hairstyle. Only include the information that most sentences agree on."},
      {Aspect::kClothingSummary,
       "Summarize the type of clothing the person is wearing(the style, colors, and any visible "
       "logos or patterns), shoes and any accessories (e.g., glasses, watches, jewelry) based on "
       "the following information. Using three to four describing sentences. Only include the "
       "information that most sentences agree on."},
  };
  return prompts;
}

const std::map<Aspect, std::string>& canned_responses() {
  static const std::map<Aspect, std::string> responses = {
      {Aspect::kBiometric,
       "The individual appears to be a young male, possibly in his late teens to early twenties. "
       "He has short, dark hair and glasses. Based on the surroundings, he seems to be of "
       "average height and build."},
      {Aspect::kHair, "The individual has short, dark hair."},
      {Aspect::kClothing,
       "The individual is wearing a red jacket with black and white patches. Underneath the "
       "jacket, he has a blue shirt with a white logo or emblem on it. He is also wearing purple "
       "pants and black and white shoes. He is wearing glasses."},
      {Aspect::kPose,
       "The person appears to be walking, with a somewhat brisk gait. His posture is upright, "
       "suggesting confidence, and he seems to be moving forward purposefully."},
      {Aspect::kBackground,
       "The person appears to be in an urban setting, possibly a street or a pedestrian area. "
       "There are glass railings and a metal structure visible in the background, suggesting a "
       "public space or a walkway. The general atmosphere seems to be calm and quiet."},
      {Aspect::kBiometricSummary,
       "The individual appears to be a male, primarily estimated to be in his late 20s to early "
       "30s, with a consensus also leaning towards late teens to early 20s in several "
       "descriptions. He consistently has a medium or average build and is of average height "
       "based on the surroundings."},
      {Aspect::kClothingSummary,
       "The individual is dressed in a casual style, predominantly featuring black clothing, "
       "including a jacket with a white logo on the back and black pants. Red shoes or sneakers "
       "add a pop of color to the otherwise monochrome outfit. While there is mention of glasses "
       "being worn, the presence of other accessories like watches or jewelry is either not "
       "mentioned or stated to be absent."},
  };
  return responses;
}

}  // namespace

PromptCatalog PromptCatalog::defaults() {
  PromptCatalog catalog;
  catalog.prompts = default_prompts();
  return catalog;
}

const std::string& PromptCatalog::prompt(Aspect aspect) const {
  const auto it = prompts.find(aspect);
  if (it == prompts.end()) {
    throw ValidationError("prompt catalog: no prompt for aspect '" + aspect_name(aspect) + "'");
  }
  return it->second;
}

void PromptCatalog::validate() const {
  for (Aspect a : {Aspect::kBiometric, Aspect::kHair, Aspect::kClothing, Aspect::kPose,
                   Aspect::kBackground}) {
    if (!prompts.count(a)) {
      throw ValidationError("prompt catalog: missing prompt for aspect '" + aspect_name(a) + "'");
    }
  }
}

// --- Clients -------------------------------------------------------------

MockVlmClient::MockVlmClient(PromptCatalog catalog) : catalog_(std::move(catalog)) {}

const std::string& MockVlmClient::canned_response(Aspect aspect) {
  return canned_responses().at(aspect);
}

std::string MockVlmClient::do_complete(const std::vector<ChatMessage>& messages) {
  if (messages.empty()) throw ValidationError("mock-vlm: empty message list");
  // Summaries arrive as [prompt, joined texts]; descriptions as a single
  // prompt message carrying the image reference.
  const std::string& prompt = messages.front().content;
  for (const auto& [aspect, text] : catalog_.prompts) {
    if (prompt == text) return canned_responses().at(aspect);
  }
  return "Mock response " + sha256_hex(prompt).substr(0, 12) + " for " +
         (messages.front().image_ref.empty() ? "input" : messages.front().image_ref);
}

std::string EchoClient::do_complete(const std::vector<ChatMessage>& messages) {
  if (messages.empty()) throw ValidationError("echo: empty message list");
  return messages.back().content;
}

HttpChatClient::HttpChatClient(ClientConfig config) : config_(std::move(config)) {
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) {
    throw ValidationError("http client: endpoint must include a scheme, got '" +
                          config_.endpoint + "'");
  }
  const auto path_start = config_.endpoint.find('/', scheme_end + 3);
  if (path_start == std::string::npos) {
    base_url_ = config_.endpoint;
    path_ = "/";
  } else {
    base_url_ = config_.endpoint.substr(0, path_start);
    path_ = config_.endpoint.substr(path_start);
  }
  if (config_.max_retries < 0) throw ValidationError("http client: max_retries must be >= 0");
}

std::string HttpChatClient::do_complete(const std::vector<ChatMessage>& messages) {
  nlohmann::json body;
  body["model"] = config_.model;
  body["messages"] = nlohmann::json::array();
  for (const auto& m : messages) {
    nlohmann::json jm;
    jm["role"] = m.role;
    jm["content"] = m.content;
    if (!m.image_ref.empty()) jm["image"] = m.image_ref;
    body["messages"].push_back(jm);
  }
  const std::string payload = body.dump();

  httplib::Client client(base_url_);
  const auto timeout = std::chrono::milliseconds(
      static_cast<long long>(config_.timeout_seconds * 1000.0));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  httplib::Headers headers;
  if (const char* token = std::getenv(config_.auth_env.c_str()); token && *token) {
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }

  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(50 * attempt));
    auto res = client.Post(path_, headers, payload, "application/json");
    if (!res) {
      last_error = "connection error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "server error: HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw IoError("http client: HTTP " + std::to_string(res->status) + " from " + base_url_);
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      if (j.contains("choices")) {
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
      }
      if (j.contains("text")) return j.at("text").get<std::string>();
      throw IoError("http client: response has neither 'choices' nor 'text'");
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("http client: malformed response: ") + e.what());
    }
  }
  throw IoError("http client: giving up after " + std::to_string(config_.max_retries + 1) +
                " attempts (" + last_error + ")");
}

std::unique_ptr<ChatClient> make_client(const ClientConfig& config) {
  if (config.kind == "mock") return std::make_unique<MockVlmClient>();
  if (config.kind == "echo") return std::make_unique<EchoClient>();
  if (config.kind == "http") return std::make_unique<HttpChatClient>(config);
  throw ValidationError("client: unknown kind '" + config.kind + "'");
}

// --- Cache ---------------------------------------------------------------

std::string DescriptionCache::key(const std::string& image_id, const std::string& aspect,
                                  const std::string& prompt_sha256, const std::string& model) {
  return image_id + "\x1f" + aspect + "\x1f" + prompt_sha256 + "\x1f" + model;
}

DescriptionCache::DescriptionCache(std::filesystem::path file) : file_(std::move(file)) {
  if (!std::filesystem::exists(file_)) return;
  std::ifstream in(file_, std::ios::binary);
  if (!in) throw IoError("cache: cannot open '" + file_.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("cache: corrupt record at " + file_.string() + ":" + std::to_string(line_no) +
                    ": " + e.what());
    }
    for (const char* field : {"image_id", "aspect", "prompt_sha256", "model", "text"}) {
      if (!j.contains(field) || !j.at(field).is_string()) {
        throw IoError("cache: corrupt record at " + file_.string() + ":" +
                      std::to_string(line_no) + ": missing field '" + field + "'");
      }
    }
    const std::string k = key(j.at("image_id"), j.at("aspect"), j.at("prompt_sha256"),
                              j.at("model"));
    const std::string text = j.at("text").get<std::string>();
    const auto [it, inserted] = texts_.emplace(k, text);
    if (!inserted && it->second != text) {
      throw IoError("cache: conflicting texts for one key at " + file_.string() + ":" +
                    std::to_string(line_no));
    }
  }
}

std::optional<std::string> DescriptionCache::lookup(const std::string& image_id,
                                                    const std::string& aspect,
                                                    const std::string& prompt_sha256,
                                                    const std::string& model) const {
  const auto it = texts_.find(key(image_id, aspect, prompt_sha256, model));
  if (it == texts_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::string> DescriptionCache::lookup_by_identity(const std::string& image_id,
                                                                const std::string& aspect,
                                                                const std::string& model) const {
  const std::string prefix = image_id + "\x1f" + aspect + "\x1f";
  std::optional<std::string> found;
  for (auto it = texts_.lower_bound(prefix); it != texts_.end(); ++it) {
    if (it->first.compare(0, prefix.size(), prefix) != 0) break;
    // Key layout: prefix + 64-char prompt hash + separator + model.
    const std::size_t model_at = prefix.size() + 64 + 1;
    if (it->first.size() < model_at || it->first.compare(model_at, std::string::npos, model) != 0) {
      continue;
    }
    if (found && *found != it->second) {
      throw IoError("cache: multiple distinct summaries for '" + image_id + "' aspect '" +
                    aspect + "'");
    }
    found = it->second;
  }
  return found;
}

void DescriptionCache::insert(const CacheRecord& record) {
  const std::string k = key(record.image_id, record.aspect, record.prompt_sha256, record.model);
  const auto it = texts_.find(k);
  if (it != texts_.end()) {
    if (it->second != record.text) {
      throw IoError("cache: conflicting insert for image '" + record.image_id + "' aspect '" +
                    record.aspect + "'");
    }
    return;  // idempotent
  }
  nlohmann::json j;
  j["image_id"] = record.image_id;
  j["aspect"] = record.aspect;
  j["prompt_sha256"] = record.prompt_sha256;
  j["model"] = record.model;
  j["text"] = record.text;
  std::ofstream out(file_, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cache: cannot append to '" + file_.string() + "'");
  out << j.dump() << "\n";
  out.flush();
  if (!out) throw IoError("cache: write failed for '" + file_.string() + "'");
  texts_.emplace(k, record.text);
}

// --- Describer -------------------------------------------------------------

Describer::Describer(PromptCatalog catalog, ChatClient& client, DescriptionCache& cache)
    : catalog_(std::move(catalog)), client_(client), cache_(cache) {
  catalog_.validate();
}

std::string Describer::describe_image(const std::string& image_id, Aspect aspect) {
  if (aspect_is_summary(aspect)) {
    throw ValidationError("describe_image: '" + aspect_name(aspect) +
                          "' is a summary aspect; use summarize_identity");
  }
  const std::string& prompt = catalog_.prompt(aspect);
  const std::string prompt_sha = sha256_hex(prompt);
  const std::string aspect_str = aspect_name(aspect);
  if (auto hit = cache_.lookup(image_id, aspect_str, prompt_sha, client_.model_name())) {
    return *hit;
  }
  const std::string text = client_.complete({ChatMessage{"user", prompt, image_id}});
  cache_.insert({image_id, aspect_str, prompt_sha, client_.model_name(), text});
  return text;
}

std::string Describer::summarize_identity(const std::vector<std::string>& texts,
                                          Aspect summary_aspect,
                                          const std::string& identity_key) {
  if (texts.empty()) throw ValidationError("summarize_identity: need at least one text");
  if (!aspect_is_summary(summary_aspect)) {
    throw ValidationError("summarize_identity: '" + aspect_name(summary_aspect) +
                          "' is not a summary aspect");
  }
  const std::string& prompt = catalog_.prompt(summary_aspect);
  std::string joined;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (i) joined += "\n";
    joined += texts[i];
  }
  // The cache key must change when any input text changes.
  std::string hashed = prompt;
  for (const auto& t : texts) {
    hashed += "\x1e";
    hashed += t;
  }
  const std::string prompt_sha = sha256_hex(hashed);
  const std::string aspect_str = aspect_name(summary_aspect);
  if (auto hit = cache_.lookup(identity_key, aspect_str, prompt_sha, client_.model_name())) {
    return *hit;
  }
  const std::string text =
      client_.complete({ChatMessage{"user", prompt, ""}, ChatMessage{"user", joined, ""}});
  cache_.insert({identity_key, aspect_str, prompt_sha, client_.model_name(), text});
  return text;
}

// --- Text embedding --------------------------------------------------------

namespace {

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  if (tokens.empty()) tokens.push_back(text);  // punctuation-only input
  return tokens;
}

}  // namespace

HashTextEmbedder::HashTextEmbedder(Index dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim <= 0) throw ValidationError("embed_text: dim must be positive");
}

Vector HashTextEmbedder::embed(const std::string& text) const {
  Vector v = Vector::Zero(dim_);
  for (const auto& token : tokenize(text)) {
    Rng rng(seed_, fnv1a64(token));
    for (Index i = 0; i < dim_; ++i) v[i] += rng.normal();
  }
  const double norm = v.norm();
  if (!(norm > 0.0)) throw IoError("embed_text: degenerate embedding");
  return v / norm;
}

TextFeature embed_text(const std::string& text, Aspect aspect, const TextEmbedder& backend) {
  if (text.empty()) throw ValidationError("embed_text: empty text");
  TextFeature feature;
  feature.vector = backend.embed(text);
  feature.aspect = aspect;
  feature.source_text_hash = sha256_hex(text);
  return feature;
}

}  // namespace differ
