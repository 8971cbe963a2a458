#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "differ/aspect.hpp"
#include "differ/types.hpp"

namespace differ {

// Task prompts per aspect. The defaults are the catalog the toolkit ships
// with; deployments may override individual prompts.
struct PromptCatalog {
  std::map<Aspect, std::string> prompts;

  static PromptCatalog defaults();
  const std::string& prompt(Aspect aspect) const;
  void validate() const;  // all five description prompts must be present
};

struct ChatMessage {
  std::string role = "user";
  std::string content;
  std::string image_ref;  // optional image attachment
};

// Generic chat-completion client: message list in, text out.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string model_name() const = 0;

  std::string complete(const std::vector<ChatMessage>& messages) {
    ++calls_;
    return do_complete(messages);
  }
  int calls() const { return calls_; }

 protected:
  virtual std::string do_complete(const std::vector<ChatMessage>& messages) = 0;

 private:
  int calls_ = 0;
};

// Offline deterministic stand-in for a vision-language model: canned
// answers for the catalog prompts, a stable synthetic reply otherwise.
class MockVlmClient final : public ChatClient {
 public:
  explicit MockVlmClient(PromptCatalog catalog = PromptCatalog::defaults());
  std::string model_name() const override { return "mock-vlm"; }
  static const std::string& canned_response(Aspect aspect);

 protected:
  std::string do_complete(const std::vector<ChatMessage>& messages) override;

 private:
  PromptCatalog catalog_;
};

// Returns the content of the last message verbatim.
class EchoClient final : public ChatClient {
 public:
  std::string model_name() const override { return "echo"; }

 protected:
  std::string do_complete(const std::vector<ChatMessage>& messages) override;
};

struct ClientConfig {
  std::string kind = "mock";  // mock | echo | http
  std::string endpoint;       // e.g. http://host:port/v1/chat/completions
  std::string model = "mock-vlm";
  std::string auth_env = "DIFFER_API_TOKEN";
  int max_retries = 3;
  double timeout_seconds = 30.0;
};

// Chat-completion HTTP client with bounded retries. The auth token is read
// from the environment variable named in the config, never from the config
// itself.
class HttpChatClient final : public ChatClient {
 public:
  explicit HttpChatClient(ClientConfig config);
  std::string model_name() const override { return config_.model; }

 protected:
  std::string do_complete(const std::vector<ChatMessage>& messages) override;

 private:
  ClientConfig config_;
  std::string base_url_;
  std::string path_;
};

std::unique_ptr<ChatClient> make_client(const ClientConfig& config);

// --- Description cache --------------------------------------------------

struct CacheRecord {
  std::string image_id;
  std::string aspect;
  std::string prompt_sha256;
  std::string model;
  std::string text;
};

// Append-only JSON-lines cache keyed by (image_id, aspect, prompt hash,
// model). Re-inserting identical content is a no-op; conflicting content
// for the same key is an error, as is any unparseable line.
class DescriptionCache {
 public:
  explicit DescriptionCache(std::filesystem::path file);

  std::optional<std::string> lookup(const std::string& image_id, const std::string& aspect,
                                    const std::string& prompt_sha256,
                                    const std::string& model) const;
  // Matches on (image_id, aspect, model) alone; summary keys fold the
  // summarized inputs into the prompt hash, so retrieval by identity needs
  // this looser form. Distinct texts under one identity are an error.
  std::optional<std::string> lookup_by_identity(const std::string& image_id,
                                                const std::string& aspect,
                                                const std::string& model) const;
  void insert(const CacheRecord& record);
  std::size_t size() const { return texts_.size(); }
  const std::filesystem::path& file() const { return file_; }

 private:
  static std::string key(const std::string& image_id, const std::string& aspect,
                         const std::string& prompt_sha256, const std::string& model);

  std::filesystem::path file_;
  std::map<std::string, std::string> texts_;
};

// Cache-backed description pipeline over a chat client.
class Describer {
 public:
  Describer(PromptCatalog catalog, ChatClient& client, DescriptionCache& cache);

  std::string describe_image(const std::string& image_id, Aspect aspect);
  // identity_key names the entity being summarized, e.g. "pid:12" or
  // "cloth:3"; the cache key also covers the input texts.
  std::string summarize_identity(const std::vector<std::string>& texts, Aspect summary_aspect,
                                 const std::string& identity_key);

  const PromptCatalog& catalog() const { return catalog_; }

 private:
  PromptCatalog catalog_;
  ChatClient& client_;
  DescriptionCache& cache_;
};

// --- Text embedding ------------------------------------------------------

struct TextFeature {
  Vector vector;  // unit norm, subspace_dim entries
  Aspect aspect;
  std::string source_text_hash;
};

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual Index dim() const = 0;
  virtual Vector embed(const std::string& text) const = 0;
};

// Deterministic offline backend: each token hashes to a Gaussian direction,
// token directions sum, the result is normalized.
class HashTextEmbedder final : public TextEmbedder {
 public:
  HashTextEmbedder(Index dim, std::uint64_t seed);
  Index dim() const override { return dim_; }
  Vector embed(const std::string& text) const override;

 private:
  Index dim_;
  std::uint64_t seed_;
};

TextFeature embed_text(const std::string& text, Aspect aspect, const TextEmbedder& backend);

}  // namespace differ
