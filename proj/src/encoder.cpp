#include "encoder.hpp"

#include <cmath>

#include "rng.hpp"

namespace mmsim {

using namespace ops;

namespace {
constexpr double kMaskLogit = -1e30;  // finite stand-in for -inf; exp underflows to exactly 0
}

void EncoderConfig::validate() const {
  if (n_layers == 0 || hidden_dim == 0 || n_heads == 0 || ffn_dim == 0)
    fail(Status::Invalid, "encoder config: sizes must be positive");
  if (hidden_dim % n_heads != 0)
    fail(Status::Invalid, "encoder config: hidden_dim " + std::to_string(hidden_dim) +
                              " not divisible by n_heads " + std::to_string(n_heads));
  if (vocab_size <= kNumSpecialTokens)
    fail(Status::Invalid, "encoder config: vocab_size must exceed the reserved special ids");
  if (frame_dim == 0 || max_frames == 0 || max_frames > kMaxFramesHard || max_title_len == 0)
    fail(Status::Invalid, "encoder config: bad frame/title limits");
  if (n_segment_types < 2) fail(Status::Invalid, "encoder config: need at least 2 segment types");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    fail(Status::Invalid, "encoder config: dropout_rate must be in [0, 1)");
}

Linear init_linear(std::size_t in, std::size_t out, Rng& rng, double stddev) {
  Linear lin;
  lin.w = Tensor::randn({in, out}, rng, stddev, true);
  lin.b = Tensor::zeros({out}, true);
  return lin;
}

Tensor linear_apply(const Linear& lin, const Tensor& x2d) {
  return add_bias(matmul(x2d, lin.w), lin.b);
}

EncoderState init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderState s;
  s.cfg = cfg;
  const std::size_t h = cfg.hidden_dim;
  s.token_embed = Tensor::randn({cfg.vocab_size, h}, rng, 0.02, true);
  s.pos_embed = Tensor::randn({cfg.max_seq_len(), h}, rng, 0.02, true);
  s.seg_embed = Tensor::randn({cfg.n_segment_types, h}, rng, 0.02, true);
  s.frame_proj = init_linear(cfg.frame_dim, h, rng);
  s.emb_ln_gain = Tensor::full({h}, 1.0, true);
  s.emb_ln_bias = Tensor::zeros({h}, true);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    EncoderLayer layer;
    layer.q = init_linear(h, h, rng);
    layer.k = init_linear(h, h, rng);
    layer.v = init_linear(h, h, rng);
    layer.o = init_linear(h, h, rng);
    layer.ln1_gain = Tensor::full({h}, 1.0, true);
    layer.ln1_bias = Tensor::zeros({h}, true);
    layer.ff1 = init_linear(h, cfg.ffn_dim, rng);
    layer.ff2 = init_linear(cfg.ffn_dim, h, rng);
    layer.ln2_gain = Tensor::full({h}, 1.0, true);
    layer.ln2_bias = Tensor::zeros({h}, true);
    s.layers.push_back(std::move(layer));
  }
  s.pooler = init_linear(h, h, rng);
  return s;
}

std::vector<ParamRef> encoder_params(const EncoderState& s) {
  std::vector<ParamRef> out;
  auto push = [&out](const std::string& name, const Tensor& t, bool no_decay) {
    out.push_back({name, t, no_decay});
  };
  auto push_linear = [&push](const std::string& name, const Linear& lin) {
    push(name + ".w", lin.w, false);
    push(name + ".b", lin.b, true);
  };
  push("encoder.token_embed", s.token_embed, false);
  push("encoder.pos_embed", s.pos_embed, false);
  push("encoder.seg_embed", s.seg_embed, false);
  push_linear("encoder.frame_proj", s.frame_proj);
  push("encoder.emb_ln.gain", s.emb_ln_gain, true);
  push("encoder.emb_ln.bias", s.emb_ln_bias, true);
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const std::string p = "encoder.layer" + std::to_string(l);
    const EncoderLayer& layer = s.layers[l];
    push_linear(p + ".attn.q", layer.q);
    push_linear(p + ".attn.k", layer.k);
    push_linear(p + ".attn.v", layer.v);
    push_linear(p + ".attn.o", layer.o);
    push(p + ".ln1.gain", layer.ln1_gain, true);
    push(p + ".ln1.bias", layer.ln1_bias, true);
    push_linear(p + ".ffn.1", layer.ff1);
    push_linear(p + ".ffn.2", layer.ff2);
    push(p + ".ln2.gain", layer.ln2_gain, true);
    push(p + ".ln2.bias", layer.ln2_bias, true);
  }
  push_linear("encoder.pooler", s.pooler);
  return out;
}

Assembled assemble_input(const EncoderState& s, const Batch& batch, double dropout_rate,
                         Rng* rng) {
  const EncoderConfig& cfg = s.cfg;
  if (batch.frame_dim != cfg.frame_dim)
    fail(Status::Shape, "assemble: batch frame_dim " + std::to_string(batch.frame_dim) +
                            " does not match encoder config " + std::to_string(cfg.frame_dim));
  if (batch.max_title > cfg.max_title_len || batch.max_frames > cfg.max_frames)
    fail(Status::Shape, "assemble: batch exceeds encoder limits");

  Assembled a;
  a.batch = batch.size;
  for (std::size_t i = 0; i < batch.size; ++i) {
    if (batch.title_len[i] == 0)
      fail(Status::Invalid, "assemble: vid " + std::to_string(batch.vids[i]) + " has no title");
    a.seq_len = std::max(a.seq_len, 2 + batch.frame_count[i] + batch.title_len[i]);
  }
  const std::size_t b_n = batch.size, seq = a.seq_len, h = cfg.hidden_dim;
  const std::size_t n_rows = b_n * seq;
  a.attn_mask.assign(n_rows, 0);

  // token pieces (CLS, SEP, title) gathered from the embedding table
  std::vector<std::size_t> token_ids, token_dst;
  // real frame rows and their destinations
  std::vector<double> frame_vals;
  std::vector<std::size_t> frame_dst;
  // absolute-position and segment lookups
  std::vector<std::size_t> pos_ids, pos_dst, seg_ids, seg_dst;

  for (std::size_t i = 0; i < b_n; ++i) {
    const std::size_t nf = batch.frame_count[i];
    const std::size_t nt = batch.title_len[i];
    const std::size_t base = i * seq;
    a.cls_pos.push_back(0);
    a.frame_pos.emplace_back();
    a.title_pos.emplace_back();

    auto put_token = [&](std::size_t vocab_id, std::size_t pos, std::size_t seg,
                         bool with_pos) {
      if (vocab_id >= cfg.vocab_size)
        fail(Status::Shape, "assemble: token id " + std::to_string(vocab_id) +
                                " out of range for vocab " + std::to_string(cfg.vocab_size));
      token_ids.push_back(vocab_id);
      token_dst.push_back(base + pos);
      if (with_pos) {
        pos_ids.push_back(pos);
        pos_dst.push_back(base + pos);
      }
      seg_ids.push_back(seg);
      seg_dst.push_back(base + pos);
      a.attn_mask[base + pos] = 1;
    };

    put_token(kClsToken, 0, 0, true);
    for (std::size_t f = 0; f < nf; ++f) {
      const std::size_t pos = 1 + f;
      a.frame_pos[i].push_back(pos);
      const double* src = batch.frames.data() + (i * batch.max_frames + f) * cfg.frame_dim;
      frame_vals.insert(frame_vals.end(), src, src + cfg.frame_dim);
      frame_dst.push_back(base + pos);
      if (cfg.position_embed_frames) {
        pos_ids.push_back(pos);
        pos_dst.push_back(base + pos);
      }
      seg_ids.push_back(0);
      seg_dst.push_back(base + pos);
      a.attn_mask[base + pos] = 1;
    }
    put_token(kSepToken, 1 + nf, 0, true);
    for (std::size_t t = 0; t < nt; ++t) {
      const std::size_t pos = 2 + nf + t;
      a.title_pos[i].push_back(pos);
      put_token(batch.tokens[i * batch.max_title + t], pos, 1, true);
    }
    a.real_count.push_back(2 + nf + nt);
  }

  Tensor token_rows = rows(s.token_embed, token_ids);
  Tensor x = scatter_rows(token_rows, n_rows, token_dst);

  Tensor frame_in = Tensor::from({frame_dst.size(), cfg.frame_dim}, std::move(frame_vals));
  Tensor frame_rows = linear_apply(s.frame_proj, frame_in);
  x = add(x, scatter_rows(frame_rows, n_rows, frame_dst));

  if (!pos_ids.empty())
    x = add(x, scatter_rows(rows(s.pos_embed, pos_ids), n_rows, pos_dst));
  if (cfg.use_segment_embed)
    x = add(x, scatter_rows(rows(s.seg_embed, seg_ids), n_rows, seg_dst));

  x = layer_norm(x, s.emb_ln_gain, s.emb_ln_bias);
  if (dropout_rate > 0.0 && rng) x = ops::dropout(x, dropout_rate, *rng);
  a.seq = reshape(x, {b_n, seq, h});
  return a;
}

Tensor encode(const EncoderState& s, const Assembled& a, double dropout_rate, Rng* rng) {
  const EncoderConfig& cfg = s.cfg;
  const std::size_t b_n = a.batch, seq = a.seq_len, h = cfg.hidden_dim;
  const std::size_t nh = cfg.n_heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  // additive key mask, shared by every layer
  std::vector<double> maskv(b_n * nh * seq * seq, 0.0);
  for (std::size_t i = 0; i < b_n; ++i)
    for (std::size_t j = 0; j < seq; ++j)
      if (!a.attn_mask[i * seq + j])
        for (std::size_t head = 0; head < nh; ++head)
          for (std::size_t q = 0; q < seq; ++q)
            maskv[((i * nh + head) * seq + q) * seq + j] = kMaskLogit;
  Tensor attn_bias = Tensor::from({b_n * nh, seq, seq}, std::move(maskv));

  auto drop = [&](const Tensor& t) {
    return (dropout_rate > 0.0 && rng) ? ops::dropout(t, dropout_rate, *rng) : t;
  };

  Tensor x2 = reshape(a.seq, {b_n * seq, h});
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const EncoderLayer& layer = s.layers[l];
    try {
      Tensor qh = split_heads(reshape(linear_apply(layer.q, x2), {b_n, seq, h}), nh);
      Tensor kh = split_heads(reshape(linear_apply(layer.k, x2), {b_n, seq, h}), nh);
      Tensor vh = split_heads(reshape(linear_apply(layer.v, x2), {b_n, seq, h}), nh);

      Tensor scores = add(scale(matmul(qh, transpose_last2(kh)), inv_sqrt_d), attn_bias);
      Tensor attn = drop(softmax(scores));
      Tensor ctx = reshape(merge_heads(matmul(attn, vh), nh), {b_n * seq, h});
      Tensor attn_out = drop(linear_apply(layer.o, ctx));
      x2 = layer_norm(add(x2, attn_out), layer.ln1_gain, layer.ln1_bias);

      Tensor ff = drop(linear_apply(layer.ff2, gelu(linear_apply(layer.ff1, x2))));
      x2 = layer_norm(add(x2, ff), layer.ln2_gain, layer.ln2_bias);
    } catch (const Error& e) {
      fail(e.status(), "encoder layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return reshape(x2, {b_n, seq, h});
}

}  // namespace mmsim
