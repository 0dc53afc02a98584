#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "data.hpp"
#include "tensor.hpp"

namespace mmsim {

class Rng;

struct EncoderConfig {
  std::size_t n_layers = 4;
  std::size_t hidden_dim = 128;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 512;
  std::size_t vocab_size = 256;
  std::size_t frame_dim = 32;
  std::size_t max_frames = 32;
  std::size_t max_title_len = 32;
  std::size_t n_segment_types = 2;
  double dropout_rate = 0.1;
  // The source material does not pin down whether segment/position embeddings
  // cover the frame span, so both are switchable.
  bool use_segment_embed = true;
  bool position_embed_frames = true;

  std::size_t max_seq_len() const { return 2 + max_frames + max_title_len; }
  std::size_t head_dim() const { return hidden_dim / n_heads; }
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

struct EncoderLayer {
  Linear q, k, v, o;
  Tensor ln1_gain, ln1_bias;
  Linear ff1, ff2;
  Tensor ln2_gain, ln2_bias;
};

struct EncoderState {
  EncoderConfig cfg;
  Tensor token_embed;  // [vocab, H]
  Tensor pos_embed;    // [max_seq, H]
  Tensor seg_embed;    // [n_segment_types, H]
  Linear frame_proj;   // frame_dim -> H
  Tensor emb_ln_gain, emb_ln_bias;
  std::vector<EncoderLayer> layers;
  // BERT-style pooler over [CLS]; carried in checkpoints like the original
  // model does even though the similarity pipeline never consumes it.
  Linear pooler;
};

struct ParamRef {
  std::string name;
  Tensor tensor;
  bool no_decay = false;  // biases and layer-norm parameters skip weight decay
};

EncoderState init_encoder(const EncoderConfig& cfg, Rng& rng);
std::vector<ParamRef> encoder_params(const EncoderState& s);

/// Per-sample packed layout: [CLS] frames [SEP] title, padding only at the
/// tail so growing the batch width never shifts a real position.
struct Assembled {
  Tensor seq;  // [B, L, H] after embedding layer-norm (and dropout if on)
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::uint8_t> attn_mask;              // [B * L], 1 = real position
  std::vector<std::size_t> cls_pos;                 // per sample, always 0
  std::vector<std::vector<std::size_t>> frame_pos;  // per sample, per frame
  std::vector<std::vector<std::size_t>> title_pos;  // per sample, per token
  std::vector<std::size_t> real_count;              // real positions per sample
};

Assembled assemble_input(const EncoderState& s, const Batch& batch, double dropout_rate = 0.0,
                         Rng* rng = nullptr);

/// Post-layer-norm transformer stack; attention logits at padding key
/// positions are pushed to -1e30 before the softmax.
Tensor encode(const EncoderState& s, const Assembled& a, double dropout_rate = 0.0,
              Rng* rng = nullptr);

Linear init_linear(std::size_t in, std::size_t out, Rng& rng, double stddev = 0.02);
Tensor linear_apply(const Linear& lin, const Tensor& x2d);

}  // namespace mmsim
