#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "data.hpp"
#include "evaluation.hpp"
#include "rng.hpp"

using namespace mmsim;
namespace fs = std::filesystem;

namespace {

SynthConfig small_cfg() {
  SynthConfig c;
  c.n_videos = 60;
  c.n_pairs = 80;
  c.n_topics = 5;
  c.vocab_size = 64;
  c.frame_dim = 8;
  c.n_tags = 12;
  c.title_len_min = 3;
  c.title_len_max = 7;
  c.frame_count_min = 1;
  c.frame_count_max = 4;
  c.noise_scale = 0.2;
  c.seed = 99;
  return c;
}

std::string temp_dir(const char* tag) {
  auto d = fs::temp_directory_path() / (std::string("mmsim_data_") + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d.string();
}

}  // namespace

TEST_CASE("latent score: identical mixtures give 1, orthogonal give 0") {
  std::vector<double> a = {0.5, 0.5, 0.0};
  CHECK(latent_pair_score(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> e1 = {1, 0, 0}, e2 = {0, 1, 0};
  CHECK(latent_pair_score(e1, e2) == 0.0);
}

TEST_CASE("synth_generate: deterministic given seed") {
  const Dataset a = synth_generate(small_cfg());
  const Dataset b = synth_generate(small_cfg());
  CHECK(a == b);

  SynthConfig other = small_cfg();
  other.seed = 100;
  CHECK_FALSE(synth_generate(other) == a);
}

TEST_CASE("synth_generate: rejects n_topics > n_tags") {
  SynthConfig c = small_cfg();
  c.n_topics = 13;  // n_tags is 12
  CHECK_THROWS_AS(synth_generate(c), Error);
}

TEST_CASE("synth_generate: sample invariants hold") {
  const Dataset ds = synth_generate(small_cfg());
  REQUIRE(ds.samples.size() == 60);
  REQUIRE(ds.pairs.size() == 80);
  for (const auto& s : ds.samples) {
    CHECK(s.n_frames >= 1);
    CHECK(s.n_frames <= kMaxFramesHard);
    CHECK(!s.title_tokens.empty());
    for (auto t : s.title_tokens) {
      CHECK(t >= kNumSpecialTokens);
      CHECK(t < ds.config.vocab_size);
    }
    CHECK(!s.tag_ids.empty());
  }
  for (const auto& p : ds.pairs) {
    CHECK(p.vid1 != p.vid2);
    CHECK(p.score >= 0.0);
    CHECK(p.score <= 1.0);
    CHECK(ds.find(p.vid1) != nullptr);
    CHECK(ds.find(p.vid2) != nullptr);
  }
}

TEST_CASE("synth_generate: pair scores are a monotone map of latent cosines") {
  const Dataset ds = synth_generate(small_cfg());
  std::vector<double> scores, cosines;
  for (const auto& p : ds.pairs) {
    scores.push_back(p.score);
    const std::size_t t = ds.n_topics;
    std::vector<double> m1(ds.latent.begin() + p.vid1 * t, ds.latent.begin() + (p.vid1 + 1) * t);
    std::vector<double> m2(ds.latent.begin() + p.vid2 * t, ds.latent.begin() + (p.vid2 + 1) * t);
    cosines.push_back(cosine_similarity(m1, m2));
  }
  CHECK(spearman(scores, cosines) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("synth_generate: tag frequencies are non-uniform") {
  const Dataset ds = synth_generate(small_cfg());
  std::map<std::uint64_t, std::size_t> freq;
  for (const auto& s : ds.samples)
    for (auto t : s.tag_ids) ++freq[t];
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& [tag, n] : freq) {
    lo = std::min(lo, n);
    hi = std::max(hi, n);
  }
  CHECK(hi >= 2 * lo);  // Zipf topic popularity must show through
}

TEST_CASE("dataset round-trips bit-exactly") {
  SynthConfig c = small_cfg();
  c.n_videos = 1000;
  c.n_pairs = 500;
  const Dataset ds = synth_generate(c);
  const std::string dir = temp_dir("roundtrip");
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  CHECK(ds == back);

  // a second save of the loaded copy is byte-identical
  const std::string dir2 = temp_dir("roundtrip2");
  save_dataset(back, dir2);
  for (const char* f : {"manifest.json", "frames.bin", "latent.bin", "pairs.tsv"}) {
    std::ifstream a(dir + "/" + f, std::ios::binary);
    std::ifstream b(dir2 + "/" + f, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
  }
}

TEST_CASE("empty pair list round-trips") {
  Dataset ds = synth_generate(small_cfg());
  ds.pairs.clear();
  const std::string dir = temp_dir("nopairs");
  save_dataset(ds, dir);
  CHECK(load_dataset(dir).pairs.empty());
}

TEST_CASE("truncated frame file is an error, not a crash") {
  const Dataset ds = synth_generate(small_cfg());
  const std::string dir = temp_dir("trunc");
  save_dataset(ds, dir);
  fs::resize_file(dir + "/frames.bin", 24);
  try {
    load_dataset(dir);
    FAIL("expected an IO error");
  } catch (const Error& e) {
    CHECK(e.status() == Status::Io);
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
}

TEST_CASE("version mismatch is rejected") {
  const Dataset ds = synth_generate(small_cfg());
  const std::string dir = temp_dir("version");
  save_dataset(ds, dir);
  std::ifstream in(dir + "/manifest.json");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const auto pos = text.find("\"version\": 1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 12, "\"version\": 9");
  std::ofstream(dir + "/manifest.json") << text;
  try {
    load_dataset(dir);
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.status() == Status::Parse);
    CHECK(std::string(e.what()).find("version mismatch") != std::string::npos);
  }
}

TEST_CASE("malformed record reports its index") {
  const Dataset ds = synth_generate(small_cfg());
  const std::string dir = temp_dir("badrec");
  save_dataset(ds, dir);
  std::ifstream in(dir + "/manifest.json");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const auto pos = text.find("\"n_frames\": ");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 14, "\"n_frames\": 0,");
  std::ofstream(dir + "/manifest.json") << text;
  try {
    load_dataset(dir);
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.status() == Status::Parse);
    CHECK(std::string(e.what()).find("record") != std::string::npos);
  }
}

TEST_CASE("pair file line errors carry the line number") {
  const std::string dir = temp_dir("badpair");
  std::ofstream(dir + "/pairs.tsv") << "1\t2\t0.5\n3\t3\t0.1\n";
  try {
    load_pairs(dir + "/pairs.tsv");
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.status() == Status::Parse);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("collate: masks cover exactly the real positions") {
  const Dataset ds = synth_generate(small_cfg());
  const VideoSample* a = &ds.samples[0];

  Batch one = collate({a}, 16, 8);
  CHECK(one.size == 1);
  CHECK(one.max_title == a->title_tokens.size());
  for (std::size_t t = 0; t < one.max_title; ++t) CHECK(one.token_mask[t] == 1);
  for (std::size_t f = 0; f < one.max_frames; ++f) CHECK(one.frame_mask[f] == 1);
}

TEST_CASE("collate: two samples pad to the longer one") {
  VideoSample s1, s2;
  s1.vid = 1;
  s1.title_tokens = {5, 6, 7};
  s1.n_frames = 1;
  s1.frame_dim = 2;
  s1.frames = {1.0, 2.0};
  s2.vid = 2;
  s2.title_tokens = {8, 9, 10, 11, 12, 13, 14};
  s2.n_frames = 2;
  s2.frame_dim = 2;
  s2.frames = {3.0, 4.0, 5.0, 6.0};

  Batch b = collate({&s1, &s2}, 16, 8);
  CHECK(b.max_title == 7);
  std::size_t trues = 0;
  for (std::size_t t = 0; t < 7; ++t) trues += b.token_mask[t];
  CHECK(trues == 3);
  // padding value is 0 and real values are untouched
  CHECK(b.tokens[0] == 5);
  CHECK(b.tokens[3] == 0);
  CHECK(b.frames[0] == 1.0);
  CHECK(b.frames[b.max_frames * b.frame_dim + 2] == 5.0);  // s2 frame 1
  CHECK(b.frames[2] == 0.0);                               // s1 padded frame
}

TEST_CASE("collate: equal lengths give all-true masks") {
  VideoSample s1, s2;
  s1.vid = 1;
  s1.title_tokens = {5, 6};
  s1.n_frames = 1;
  s1.frame_dim = 2;
  s1.frames = {1, 2};
  s2 = s1;
  s2.vid = 2;
  Batch b = collate({&s1, &s2}, 8, 4);
  for (auto m : b.token_mask) CHECK(m == 1);
  for (auto m : b.frame_mask) CHECK(m == 1);
}

TEST_CASE("collate: oversize samples are rejected, never truncated") {
  VideoSample s;
  s.vid = 7;
  s.title_tokens = {5, 6, 7, 8};
  s.n_frames = 1;
  s.frame_dim = 2;
  s.frames = {1, 2};
  CHECK_THROWS_AS(collate({&s}, 3, 8), Error);
  CHECK_THROWS_AS(collate({&s}, 8, 0), Error);
  CHECK_THROWS_AS(collate({}, 8, 8), Error);
}
