#include <atomic>
#include <fstream>
#include <thread>

#include "differ/error.hpp"
#include "differ/semantics.hpp"
#include "differ/sha256.hpp"
#include "test_support.hpp"

// After Eigen: httplib drags in resolv.h, whose _res macro breaks Eigen.
#include "doctest.h"
#include "httplib.h"
#include "json.hpp"

using namespace differ;

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex("") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("The quick brown fox jumps over the lazy dog") ==
        "d7a8fbb307d7809469ca9abcb0082e4f8d5651e46d3cdb762d02d0bf37c9e592");
}

TEST_CASE("prompt catalog has every description aspect") {
  const PromptCatalog catalog = PromptCatalog::defaults();
  CHECK_NOTHROW(catalog.validate());
  for (Aspect a : {Aspect::kBiometric, Aspect::kHair, Aspect::kClothing, Aspect::kPose,
                   Aspect::kBackground, Aspect::kBiometricSummary, Aspect::kClothingSummary}) {
    CHECK(!catalog.prompt(a).empty());
  }
  CHECK(catalog.prompt(Aspect::kBiometric).find("physical appearance") != std::string::npos);

  PromptCatalog broken = catalog;
  broken.prompts.erase(Aspect::kHair);
  CHECK_THROWS_AS(broken.validate(), ValidationError);
}

TEST_CASE("describe_image caches and replays") {
  test::TempDir dir("describe");
  DescriptionCache cache(dir.path() / "cache.jsonl");
  MockVlmClient client;
  Describer describer(PromptCatalog::defaults(), client, cache);

  const std::string text = describer.describe_image("img_000001", Aspect::kBiometric);
  CHECK(text.find("The individual appears to be a young male") == 0);
  CHECK(client.calls() == 1);

  // Cache hit: no client invocation.
  CHECK(describer.describe_image("img_000001", Aspect::kBiometric) == text);
  CHECK(client.calls() == 1);

  // A different prompt for the same aspect misses the cache.
  PromptCatalog changed = PromptCatalog::defaults();
  changed.prompts[Aspect::kBiometric] = "Describe the person briefly.";
  Describer redescriber(changed, client, cache);
  redescriber.describe_image("img_000001", Aspect::kBiometric);
  CHECK(client.calls() == 2);

  CHECK_THROWS_AS(describer.describe_image("x", Aspect::kBiometricSummary), ValidationError);
}

TEST_CASE("summaries come back canned, cached, and byte-identical") {
  test::TempDir dir("summarize");
  {
    DescriptionCache cache(dir.path() / "cache.jsonl");
    MockVlmClient client;
    Describer describer(PromptCatalog::defaults(), client, cache);
    const std::string summary = describer.summarize_identity(
        {"desc one", "desc two"}, Aspect::kBiometricSummary, "pid:3");
    CHECK(summary.find("He consistently has a medium or average build") != std::string::npos);
    CHECK(client.calls() == 1);
    CHECK(describer.summarize_identity({"desc one", "desc two"}, Aspect::kBiometricSummary,
                                       "pid:3") == summary);
    CHECK(client.calls() == 1);
    CHECK_THROWS_AS(describer.summarize_identity({}, Aspect::kBiometricSummary, "pid:3"),
                    ValidationError);
    CHECK_THROWS_AS(
        describer.summarize_identity({"t"}, Aspect::kClothing, "pid:3"), ValidationError);
  }
  // Reload from disk: byte-identical text, zero client calls.
  DescriptionCache reloaded(dir.path() / "cache.jsonl");
  MockVlmClient client2;
  Describer describer2(PromptCatalog::defaults(), client2, reloaded);
  const std::string replay = describer2.summarize_identity(
      {"desc one", "desc two"}, Aspect::kBiometricSummary, "pid:3");
  CHECK(replay.find("He consistently has a medium or average build") != std::string::npos);
  CHECK(client2.calls() == 0);
}

TEST_CASE("echo client returns the summarized text for singletons") {
  test::TempDir dir("echo");
  DescriptionCache cache(dir.path() / "cache.jsonl");
  EchoClient client;
  Describer describer(PromptCatalog::defaults(), client, cache);
  CHECK(describer.summarize_identity({"just this one"}, Aspect::kBiometricSummary, "pid:0") ==
        "just this one");
}

TEST_CASE("cache rejects corruption and conflicts") {
  test::TempDir dir("cache_bad");
  const auto path = dir.path() / "cache.jsonl";

  std::ofstream(path, std::ios::binary) << "{\"image_id\":\"a\"}\n";
  CHECK_THROWS_AS(DescriptionCache{path}, IoError);

  std::ofstream(path, std::ios::trunc | std::ios::binary) << "not json at all\n";
  CHECK_THROWS_AS(DescriptionCache{path}, IoError);

  {
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    f << R"({"image_id":"a","aspect":"hair","prompt_sha256":"p","model":"m","text":"one"})"
      << "\n";
    f << R"({"image_id":"a","aspect":"hair","prompt_sha256":"p","model":"m","text":"two"})"
      << "\n";
  }
  CHECK_THROWS_AS(DescriptionCache{path}, IoError);

  {
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    f << R"({"image_id":"a","aspect":"hair","prompt_sha256":"p","model":"m","text":"one"})"
      << "\n";
    f << R"({"image_id":"a","aspect":"hair","prompt_sha256":"p","model":"m","text":"one"})"
      << "\n";
  }
  DescriptionCache cache(path);
  CHECK(cache.size() == 1);
  CHECK(cache.lookup("a", "hair", "p", "m") == std::string("one"));
  CHECK_THROWS_AS(cache.insert({"a", "hair", "p", "m", "different"}), IoError);
  CHECK_NOTHROW(cache.insert({"a", "hair", "p", "m", "one"}));  // idempotent
}

TEST_CASE("hash embedding is deterministic, unit norm, and text-sensitive") {
  const HashTextEmbedder embedder(32, 5);
  const TextFeature a = embed_text("a red jacket with white logo", Aspect::kClothing, embedder);
  const TextFeature b = embed_text("a red jacket with white logo", Aspect::kClothing, embedder);
  CHECK(a.vector == b.vector);
  CHECK(a.source_text_hash == b.source_text_hash);
  CHECK(std::abs(a.vector.norm() - 1.0) <= 1e-6);

  Rng rng(77);
  for (int trial = 0; trial < 40; ++trial) {
    std::string one = "clothing";
    std::string two = "clothing";
    const int n = 3 + static_cast<int>(rng.below(8));
    for (int w = 0; w < n; ++w) {
      one += " tok" + std::to_string(rng.below(1000));
      two += " tok" + std::to_string(1000 + rng.below(1000));
    }
    const Vector u = embedder.embed(one);
    const Vector v = embedder.embed(two);
    CHECK(u.dot(v) < 0.99);
  }

  CHECK_THROWS_AS(embed_text("", Aspect::kClothing, embedder), ValidationError);

  const HashTextEmbedder other_seed(32, 6);
  CHECK(embedder.embed("same text") != other_seed.embed("same text"));
}

TEST_CASE("identical summary text embeds to identical biometric features") {
  test::TempDir dir("pid_embed");
  DescriptionCache cache(dir.path() / "cache.jsonl");
  MockVlmClient client;
  Describer describer(PromptCatalog::defaults(), client, cache);
  const std::string s1 =
      describer.summarize_identity({"alpha", "beta"}, Aspect::kBiometricSummary, "pid:1");
  const std::string s2 =
      describer.summarize_identity({"alpha", "beta"}, Aspect::kBiometricSummary, "pid:1");
  REQUIRE(s1 == s2);
  const HashTextEmbedder embedder(16, 0);
  CHECK(embedder.embed(s1) == embedder.embed(s2));
}

TEST_CASE("http client retries then fails against a closed port") {
  ClientConfig cfg;
  cfg.kind = "http";
  cfg.endpoint = "http://127.0.0.1:9/v1/chat/completions";  // discard port, nothing listens
  cfg.max_retries = 2;
  cfg.timeout_seconds = 0.5;
  HttpChatClient client(cfg);
  CHECK_THROWS_AS(client.complete({{"user", "hello", ""}}), IoError);
  CHECK(client.calls() == 1);
}

TEST_CASE("http client against a loopback server") {
  httplib::Server server;
  std::atomic<int> hits{0};
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    const int n = ++hits;
    const auto body = nlohmann::json::parse(req.body);
    CHECK(body.at("model") == "test-model");
    if (n == 1) {
      res.status = 500;  // first attempt fails, the client must retry
      return;
    }
    nlohmann::json reply;
    reply["choices"] = {{{"message", {{"content", std::string("echo: ") +
                                                      body.at("messages").at(0).at("content")
                                                          .get<std::string>()}}}}};
    res.set_content(reply.dump(), "application/json");
  });

  const int port = server.bind_to_any_port("127.0.0.1");
  if (port <= 0) return;  // sandbox without loopback listen; nothing to test
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ClientConfig cfg;
  cfg.kind = "http";
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.model = "test-model";
  cfg.max_retries = 3;
  cfg.timeout_seconds = 5.0;
  HttpChatClient client(cfg);
  const std::string reply = client.complete({{"user", "ping", "img_7"}});
  CHECK(reply == "echo: ping");
  CHECK(hits.load() == 2);

  server.stop();
  worker.join();
}
