#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mmsim {

namespace {

constexpr int kDatasetVersion = 1;

void validate(const SynthConfig& c) {
  if (c.n_videos < 2) fail(Status::Invalid, "synth: n_videos must be >= 2");
  if (c.n_topics == 0 || c.n_tags == 0 || c.frame_dim == 0)
    fail(Status::Invalid, "synth: counts must be positive");
  if (c.n_topics > c.n_tags)
    fail(Status::Invalid, "synth: n_topics (" + std::to_string(c.n_topics) +
                              ") exceeds n_tags (" + std::to_string(c.n_tags) + ")");
  if (c.vocab_size < kNumSpecialTokens + c.n_topics)
    fail(Status::Invalid, "synth: vocab_size too small for " + std::to_string(c.n_topics) +
                              " topic bands plus special tokens");
  if (c.title_len_min == 0 || c.title_len_min > c.title_len_max)
    fail(Status::Invalid, "synth: bad title length range");
  if (c.frame_count_min == 0 || c.frame_count_min > c.frame_count_max ||
      c.frame_count_max > kMaxFramesHard)
    fail(Status::Invalid, "synth: frame count range must stay within [1, " +
                              std::to_string(kMaxFramesHard) + "]");
  if (c.noise_scale < 0.0) fail(Status::Invalid, "synth: noise_scale must be >= 0");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

const VideoSample* Dataset::find(std::uint64_t vid) const {
  for (const auto& s : samples)
    if (s.vid == vid) return &s;
  return nullptr;
}

double latent_pair_score(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    fail(Status::Shape, "latent_pair_score: mixture length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) fail(Status::Invalid, "latent_pair_score: zero mixture");
  const double c = dot / std::sqrt(na * nb);
  return std::min(1.0, std::max(0.0, c));
}

Dataset synth_generate(const SynthConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);

  const std::size_t T = cfg.n_topics;
  const std::size_t usable_vocab = cfg.vocab_size - kNumSpecialTokens;

  // Per-topic frame centroids.
  std::vector<double> centroids(T * cfg.frame_dim);
  for (auto& v : centroids) v = rng.normal();

  // Zipf-like topic popularity so tag frequencies come out non-uniform.
  std::vector<double> topic_cdf(T);
  double acc = 0.0;
  for (std::size_t k = 0; k < T; ++k) {
    acc += 1.0 / static_cast<double>(k + 1);
    topic_cdf[k] = acc;
  }
  auto draw_topic = [&]() {
    const double u = rng.uniform() * topic_cdf.back();
    return static_cast<std::size_t>(
        std::lower_bound(topic_cdf.begin(), topic_cdf.end(), u) - topic_cdf.begin());
  };

  Dataset ds;
  ds.config = cfg;
  ds.n_topics = T;
  ds.frame_dim = cfg.frame_dim;
  ds.samples.reserve(cfg.n_videos);
  ds.latent.assign(cfg.n_videos * T, 0.0);

  for (std::size_t v = 0; v < cfg.n_videos; ++v) {
    double* mix = ds.latent.data() + v * T;
    const std::size_t primary = draw_topic();
    if (T > 1 && rng.uniform() < 0.75) {
      std::size_t secondary = draw_topic();
      while (secondary == primary) secondary = draw_topic();
      const double wp = rng.uniform(0.6, 1.0);
      mix[primary] = wp;
      mix[secondary] = 1.0 - wp;
    } else {
      mix[primary] = 1.0;
    }

    VideoSample s;
    s.vid = static_cast<std::uint64_t>(v);
    s.frame_dim = cfg.frame_dim;
    s.category_id = static_cast<std::int64_t>(primary);

    // Title tokens: mostly from the active topics' bands, some uniform noise.
    const std::size_t title_len =
        cfg.title_len_min + rng.uniform_int(cfg.title_len_max - cfg.title_len_min + 1);
    s.title_tokens.reserve(title_len);
    for (std::size_t t = 0; t < title_len; ++t) {
      std::size_t token;
      if (rng.uniform() < 0.8) {
        std::size_t topic = primary;
        if (mix[primary] < 1.0 && rng.uniform() >= mix[primary]) {
          for (std::size_t k = 0; k < T; ++k)
            if (k != primary && mix[k] > 0.0) topic = k;
        }
        const std::size_t band_lo = topic * usable_vocab / T;
        const std::size_t band_hi = (topic + 1) * usable_vocab / T;
        token = kNumSpecialTokens + band_lo + rng.uniform_int(band_hi - band_lo);
      } else {
        token = kNumSpecialTokens + rng.uniform_int(usable_vocab);
      }
      s.title_tokens.push_back(token);
    }

    // Frames: mixture-weighted centroid plus Gaussian noise.
    s.n_frames = cfg.frame_count_min +
                 rng.uniform_int(cfg.frame_count_max - cfg.frame_count_min + 1);
    s.frames.resize(s.n_frames * cfg.frame_dim);
    for (std::size_t f = 0; f < s.n_frames; ++f)
      for (std::size_t d = 0; d < cfg.frame_dim; ++d) {
        double base = 0.0;
        for (std::size_t k = 0; k < T; ++k)
          if (mix[k] > 0.0) base += mix[k] * centroids[k * cfg.frame_dim + d];
        s.frames[f * cfg.frame_dim + d] = base + cfg.noise_scale * rng.normal();
      }

    // Tags: topics carrying enough weight map to their tag id; occasionally a
    // rare tag from outside the topic range.
    std::set<std::uint64_t> tags;
    for (std::size_t k = 0; k < T; ++k)
      if (mix[k] >= 0.3) tags.insert(static_cast<std::uint64_t>(k));
    if (cfg.n_tags > T && rng.uniform() < 0.3)
      tags.insert(static_cast<std::uint64_t>(T + rng.uniform_int(cfg.n_tags - T)));
    s.tag_ids.assign(tags.begin(), tags.end());

    ds.samples.push_back(std::move(s));
  }

  // Pairs: distinct unordered video pairs, score = latent cosine.
  std::set<std::pair<std::uint64_t, std::uint64_t>> seen;
  const std::size_t max_pairs = cfg.n_videos * (cfg.n_videos - 1) / 2;
  if (cfg.n_pairs > max_pairs)
    fail(Status::Invalid, "synth: n_pairs exceeds the number of distinct pairs");
  ds.pairs.reserve(cfg.n_pairs);
  while (ds.pairs.size() < cfg.n_pairs) {
    std::uint64_t v1 = rng.uniform_int(cfg.n_videos);
    std::uint64_t v2 = rng.uniform_int(cfg.n_videos);
    if (v1 == v2) continue;
    if (v1 > v2) std::swap(v1, v2);
    if (!seen.insert({v1, v2}).second) continue;
    std::vector<double> m1(ds.latent.begin() + v1 * T, ds.latent.begin() + (v1 + 1) * T);
    std::vector<double> m2(ds.latent.begin() + v2 * T, ds.latent.begin() + (v2 + 1) * T);
    ds.pairs.push_back({v1, v2, latent_pair_score(m1, m2)});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence
//
// <dir>/manifest.json  version, config, per-video records with frame offsets
// <dir>/frames.bin     little-endian float64 frame rows, back to back
// <dir>/latent.bin     little-endian float64 [n_videos x n_topics]
// <dir>/pairs.tsv      "vid1<TAB>vid2<TAB>score" text lines

namespace {

void write_doubles(const std::string& path, const std::vector<double>& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Status::Io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!out) fail(Status::Io, "short write to " + path);
}

std::vector<double> read_doubles(const std::string& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail(Status::Io, "cannot read " + path);
  const std::size_t bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * sizeof(double))
    fail(Status::Io, path + " is truncated or oversized: expected " +
                         std::to_string(expected * sizeof(double)) + " bytes, found " +
                         std::to_string(bytes));
  std::vector<double> v(expected);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!in) fail(Status::Io, "short read from " + path);
  return v;
}

json config_to_json(const SynthConfig& c) {
  return json{{"n_videos", c.n_videos},
              {"n_pairs", c.n_pairs},
              {"n_topics", c.n_topics},
              {"vocab_size", c.vocab_size},
              {"frame_dim", c.frame_dim},
              {"n_tags", c.n_tags},
              {"title_len_min", c.title_len_min},
              {"title_len_max", c.title_len_max},
              {"frame_count_min", c.frame_count_min},
              {"frame_count_max", c.frame_count_max},
              {"noise_scale", c.noise_scale},
              {"seed", c.seed}};
}

SynthConfig config_from_json(const json& j) {
  SynthConfig c;
  c.n_videos = j.at("n_videos").get<std::size_t>();
  c.n_pairs = j.at("n_pairs").get<std::size_t>();
  c.n_topics = j.at("n_topics").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.frame_dim = j.at("frame_dim").get<std::size_t>();
  c.n_tags = j.at("n_tags").get<std::size_t>();
  c.title_len_min = j.at("title_len_min").get<std::size_t>();
  c.title_len_max = j.at("title_len_max").get<std::size_t>();
  c.frame_count_min = j.at("frame_count_min").get<std::size_t>();
  c.frame_count_max = j.at("frame_count_max").get<std::size_t>();
  c.noise_scale = j.at("noise_scale").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);

  json manifest;
  manifest["format"] = "mmsim-dataset";
  manifest["version"] = kDatasetVersion;
  manifest["config"] = config_to_json(ds.config);
  manifest["frame_dim"] = ds.frame_dim;
  manifest["n_topics"] = ds.n_topics;

  std::vector<double> all_frames;
  json videos = json::array();
  std::size_t offset = 0;  // in rows
  for (const auto& s : ds.samples) {
    json rec;
    rec["vid"] = s.vid;
    rec["tokens"] = s.title_tokens;
    rec["tags"] = s.tag_ids;
    if (s.category_id)
      rec["category"] = *s.category_id;
    else
      rec["category"] = nullptr;
    rec["frames_offset"] = offset;
    rec["n_frames"] = s.n_frames;
    videos.push_back(std::move(rec));
    all_frames.insert(all_frames.end(), s.frames.begin(), s.frames.end());
    offset += s.n_frames;
  }
  manifest["videos"] = std::move(videos);
  manifest["frames_file"] = "frames.bin";
  manifest["latent_file"] = "latent.bin";
  manifest["pairs_file"] = "pairs.tsv";

  {
    std::ofstream out(dir + "/manifest.json");
    if (!out) fail(Status::Io, "cannot write " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
  }
  write_doubles(dir + "/frames.bin", all_frames);
  write_doubles(dir + "/latent.bin", ds.latent);
  save_pairs(ds.pairs, dir + "/pairs.tsv");
}

Dataset load_dataset(const std::string& dir) {
  const std::string mpath = dir + "/manifest.json";
  std::ifstream in(mpath);
  if (!in) fail(Status::Io, "cannot read " + mpath);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    fail(Status::Parse, mpath + ": " + e.what());
  }

  Dataset ds;
  try {
    if (manifest.at("format").get<std::string>() != "mmsim-dataset")
      fail(Status::Parse, mpath + ": not a dataset manifest");
    if (manifest.at("version").get<int>() != kDatasetVersion)
      fail(Status::Parse, mpath + ": version mismatch, expected " +
                              std::to_string(kDatasetVersion) + ", found " +
                              manifest.at("version").dump());
    ds.config = config_from_json(manifest.at("config"));
    ds.frame_dim = manifest.at("frame_dim").get<std::size_t>();
    ds.n_topics = manifest.at("n_topics").get<std::size_t>();
  } catch (const json::exception& e) {
    fail(Status::Parse, mpath + ": " + e.what());
  }

  std::size_t total_rows = 0;
  const json& videos = manifest.at("videos");
  std::vector<std::size_t> offsets;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    try {
      const json& rec = videos[i];
      VideoSample s;
      s.vid = rec.at("vid").get<std::uint64_t>();
      s.title_tokens = rec.at("tokens").get<std::vector<std::size_t>>();
      s.tag_ids = rec.at("tags").get<std::vector<std::uint64_t>>();
      if (!rec.at("category").is_null()) s.category_id = rec.at("category").get<std::int64_t>();
      s.n_frames = rec.at("n_frames").get<std::size_t>();
      s.frame_dim = ds.frame_dim;
      if (s.n_frames == 0 || s.n_frames > kMaxFramesHard)
        fail(Status::Parse, "n_frames out of range");
      if (s.title_tokens.empty()) fail(Status::Parse, "empty title");
      for (std::size_t t : s.title_tokens)
        if (t >= ds.config.vocab_size) fail(Status::Parse, "token id out of range");
      offsets.push_back(rec.at("frames_offset").get<std::size_t>());
      if (offsets.back() != total_rows) fail(Status::Parse, "frame offsets not contiguous");
      total_rows += s.n_frames;
      ds.samples.push_back(std::move(s));
    } catch (const Error& e) {
      fail(e.status(), mpath + ": record " + std::to_string(i) + ": " + e.what());
    } catch (const std::exception& e) {
      fail(Status::Parse, mpath + ": record " + std::to_string(i) + ": " + e.what());
    }
  }

  std::vector<double> all_frames = read_doubles(
      dir + "/" + manifest.at("frames_file").get<std::string>(), total_rows * ds.frame_dim);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    auto& s = ds.samples[i];
    const double* src = all_frames.data() + offsets[i] * ds.frame_dim;
    s.frames.assign(src, src + s.n_frames * ds.frame_dim);
    for (double v : s.frames)
      if (!std::isfinite(v))
        fail(Status::Parse, mpath + ": record " + std::to_string(i) + ": non-finite frame value");
  }

  ds.latent = read_doubles(dir + "/" + manifest.at("latent_file").get<std::string>(),
                           ds.samples.size() * ds.n_topics);
  ds.pairs = load_pairs(dir + "/" + manifest.at("pairs_file").get<std::string>());
  return ds;
}

void save_pairs(const std::vector<PairLabel>& pairs, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(Status::Io, "cannot write " + path);
  for (const auto& p : pairs)
    out << p.vid1 << "\t" << p.vid2 << "\t" << format_double(p.score) << "\n";
  if (!out) fail(Status::Io, "short write to " + path);
}

std::vector<PairLabel> load_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Status::Io, "cannot read " + path);
  std::vector<PairLabel> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    PairLabel p;
    char* end = nullptr;
    const char* s = line.c_str();
    p.vid1 = std::strtoull(s, &end, 10);
    if (end == s || *end != '\t')
      fail(Status::Parse, path + ": line " + std::to_string(lineno) + ": expected vid1<TAB>");
    s = end + 1;
    p.vid2 = std::strtoull(s, &end, 10);
    if (end == s || *end != '\t')
      fail(Status::Parse, path + ": line " + std::to_string(lineno) + ": expected vid2<TAB>");
    s = end + 1;
    p.score = std::strtod(s, &end);
    if (end == s || *end != '\0')
      fail(Status::Parse, path + ": line " + std::to_string(lineno) + ": bad score");
    if (p.vid1 == p.vid2)
      fail(Status::Parse, path + ": line " + std::to_string(lineno) + ": vid1 == vid2");
    pairs.push_back(p);
  }
  return pairs;
}

Batch collate(const std::vector<const VideoSample*>& samples, std::size_t max_title_len,
              std::size_t max_frames) {
  if (samples.empty()) fail(Status::Invalid, "collate: empty sample list");
  Batch b;
  b.size = samples.size();
  b.frame_dim = samples[0]->frame_dim;
  for (const VideoSample* s : samples) {
    if (s->title_tokens.empty())
      fail(Status::Invalid, "collate: vid " + std::to_string(s->vid) + " has an empty title");
    if (s->title_tokens.size() > max_title_len)
      fail(Status::Invalid, "collate: vid " + std::to_string(s->vid) + " has " +
                                std::to_string(s->title_tokens.size()) +
                                " title tokens, configured max is " + std::to_string(max_title_len));
    if (s->n_frames == 0 || s->n_frames > max_frames)
      fail(Status::Invalid, "collate: vid " + std::to_string(s->vid) + " has " +
                                std::to_string(s->n_frames) + " frames, configured max is " +
                                std::to_string(max_frames));
    if (s->frame_dim != b.frame_dim)
      fail(Status::Shape, "collate: vid " + std::to_string(s->vid) + " frame_dim " +
                              std::to_string(s->frame_dim) + " differs from batch " +
                              std::to_string(b.frame_dim));
    b.max_title = std::max(b.max_title, s->title_tokens.size());
    b.max_frames = std::max(b.max_frames, s->n_frames);
  }

  b.tokens.assign(b.size * b.max_title, kPadToken);
  b.token_mask.assign(b.size * b.max_title, 0);
  b.frames.assign(b.size * b.max_frames * b.frame_dim, 0.0);
  b.frame_mask.assign(b.size * b.max_frames, 0);

  for (std::size_t i = 0; i < b.size; ++i) {
    const VideoSample* s = samples[i];
    b.vids.push_back(s->vid);
    b.title_len.push_back(s->title_tokens.size());
    b.frame_count.push_back(s->n_frames);
    b.tags.push_back(s->tag_ids);
    for (std::size_t t = 0; t < s->title_tokens.size(); ++t) {
      b.tokens[i * b.max_title + t] = s->title_tokens[t];
      b.token_mask[i * b.max_title + t] = 1;
    }
    std::memcpy(b.frames.data() + i * b.max_frames * b.frame_dim, s->frames.data(),
                s->n_frames * b.frame_dim * sizeof(double));
    for (std::size_t f = 0; f < s->n_frames; ++f) b.frame_mask[i * b.max_frames + f] = 1;
  }
  return b;
}

}  // namespace mmsim
