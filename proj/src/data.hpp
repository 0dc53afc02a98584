#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"

namespace mmsim {

// Reserved vocabulary ids. Generated title tokens start at kNumSpecialTokens.
constexpr std::size_t kPadToken = 0;
constexpr std::size_t kClsToken = 1;
constexpr std::size_t kSepToken = 2;
constexpr std::size_t kMaskToken = 3;
constexpr std::size_t kNumSpecialTokens = 4;

// Frame features arrive at 1 fps capped upstream; we keep the same cap.
constexpr std::size_t kMaxFramesHard = 32;

struct VideoSample {
  std::uint64_t vid = 0;
  std::vector<std::size_t> title_tokens;
  std::size_t n_frames = 0;
  std::size_t frame_dim = 0;
  std::vector<double> frames;  // row-major [n_frames x frame_dim]
  std::vector<std::uint64_t> tag_ids;  // sorted, unique; may be empty
  std::optional<std::int64_t> category_id;

  bool operator==(const VideoSample&) const = default;
};

struct PairLabel {
  std::uint64_t vid1 = 0;
  std::uint64_t vid2 = 0;
  double score = 0.0;

  bool operator==(const PairLabel&) const = default;
};

struct SynthConfig {
  std::size_t n_videos = 2000;
  std::size_t n_pairs = 3000;
  std::size_t n_topics = 10;
  std::size_t vocab_size = 256;  // includes the 4 special ids
  std::size_t frame_dim = 32;
  std::size_t n_tags = 30;
  std::size_t title_len_min = 5;
  std::size_t title_len_max = 12;
  std::size_t frame_count_min = 3;
  std::size_t frame_count_max = 6;
  double noise_scale = 0.5;
  std::uint64_t seed = 7;

  bool operator==(const SynthConfig&) const = default;
};

struct Dataset {
  SynthConfig config;
  std::vector<VideoSample> samples;
  std::vector<PairLabel> pairs;
  // Latent topic mixture per video, row-major [n_videos x n_topics]. This is
  // the generator's ground truth; pair scores are cosines of these rows.
  std::vector<double> latent;
  std::size_t n_topics = 0;
  std::size_t frame_dim = 0;

  const VideoSample* find(std::uint64_t vid) const;
  bool operator==(const Dataset&) const = default;
};

/// Deterministic synthetic corpus with controllable ground-truth similarity.
Dataset synth_generate(const SynthConfig& cfg);

/// Cosine of two topic mixtures mapped to [0, 1]; the generator's pair score.
double latent_pair_score(const std::vector<double>& a, const std::vector<double>& b);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

void save_pairs(const std::vector<PairLabel>& pairs, const std::string& path);
std::vector<PairLabel> load_pairs(const std::string& path);

struct Batch {
  std::size_t size = 0;
  std::size_t max_title = 0;
  std::size_t max_frames = 0;
  std::size_t frame_dim = 0;
  std::vector<std::uint64_t> vids;
  std::vector<std::size_t> tokens;       // [size x max_title], pad = 0
  std::vector<std::uint8_t> token_mask;  // 1 at real token positions
  std::vector<double> frames;            // [size x max_frames x frame_dim], pad = 0
  std::vector<std::uint8_t> frame_mask;  // 1 at real frame positions
  std::vector<std::size_t> title_len;
  std::vector<std::size_t> frame_count;
  std::vector<std::vector<std::uint64_t>> tags;
};

/// Pads to the batch maxima. Samples beyond the configured maxima are an
/// error; truncation is the caller's explicit choice, never silent.
Batch collate(const std::vector<const VideoSample*>& samples, std::size_t max_title_len,
              std::size_t max_frames);

}  // namespace mmsim
