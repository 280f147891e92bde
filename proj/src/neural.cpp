#include "prism/neural.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <utility>

#include "prism/common.hpp"
#include "prism/matrix_io.hpp"

#include "json.hpp"

namespace prism {

namespace {

constexpr double kMomentum = 0.9;
constexpr double kClip = 1.0;
constexpr double kLnEps = 1e-5;
constexpr double kMaskValue = -1e30;

void random_tensor(detail::Tensor& t, std::string name, int rows, int cols, double scale,
                   Rng& rng) {
  t.name = std::move(name);
  t.value.resize(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) t.value(r, c) = scale * rng.normal();
  }
  t.grad = Eigen::MatrixXd::Zero(rows, cols);
  t.vel = Eigen::MatrixXd::Zero(rows, cols);
}

void const_tensor(detail::Tensor& t, std::string name, int rows, int cols, double fill) {
  t.name = std::move(name);
  t.value = Eigen::MatrixXd::Constant(rows, cols, fill);
  t.grad = Eigen::MatrixXd::Zero(rows, cols);
  t.vel = Eigen::MatrixXd::Zero(rows, cols);
}

void tensor_step(detail::Tensor& t, double lr, double momentum, double grad_scale) {
  t.vel = momentum * t.vel + grad_scale * t.grad;
  t.value -= lr * t.vel;
}

/// Stable row softmax written into `out`.
void row_softmax(const Eigen::MatrixXd& logits, Eigen::MatrixXd& out) {
  out.resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(r).array() - m).exp().matrix();
    out.row(r) = e / e.sum();
  }
}

}  // namespace

Tokenizer description_tokenizer(const std::vector<StructuredDescription>& corpus, int max_len) {
  std::vector<std::string> texts;
  texts.reserve(corpus.size() + 1);
  for (const auto& d : corpus) texts.push_back(serialize_description(d));
  std::string locations;
  for (LocationLabel loc : kAllLocations) {
    locations += location_name(loc);
    locations += ' ';
  }
  texts.push_back(locations);
  return Tokenizer::build(texts, max_len);
}

// ---------------------------------------------------------------------------
// CausalDecoder

CausalDecoder::CausalDecoder(int vocab, int model_dim, int heads, int blocks, int ffn_dim,
                             int max_seq, std::uint64_t seed)
    : vocab_(vocab), d_(model_dim), heads_(heads), ffn_(ffn_dim), max_seq_(max_seq) {
  if (vocab < 5) throw Error(ErrorCode::usage, "decoder vocabulary must cover the special ids");
  if (model_dim < 1 || heads < 1 || blocks < 1 || ffn_dim < 1 || max_seq < 2) {
    throw Error(ErrorCode::usage, "decoder dimensions must be positive");
  }
  if (model_dim % heads != 0) {
    throw Error(ErrorCode::usage, "decoder width must divide evenly across heads");
  }
  Rng rng(seed);
  const double emb_scale = 1.0 / std::sqrt(static_cast<double>(d_));
  random_tensor(embed_, "embed", vocab_, d_, emb_scale, rng);
  random_tensor(pos_, "pos", max_seq_, d_, emb_scale, rng);
  blocks_.resize(blocks);
  for (int b = 0; b < blocks; ++b) {
    Block& blk = blocks_[b];
    const std::string tag = "b" + std::to_string(b) + ".";
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(d_));
    const double ffn_scale = 1.0 / std::sqrt(static_cast<double>(ffn_));
    const_tensor(blk.ln1_g, tag + "ln1_g", 1, d_, 1.0);
    const_tensor(blk.ln1_b, tag + "ln1_b", 1, d_, 0.0);
    random_tensor(blk.wq, tag + "wq", d_, d_, in_scale, rng);
    random_tensor(blk.wk, tag + "wk", d_, d_, in_scale, rng);
    random_tensor(blk.wv, tag + "wv", d_, d_, in_scale, rng);
    random_tensor(blk.wo, tag + "wo", d_, d_, in_scale, rng);
    const_tensor(blk.ln2_g, tag + "ln2_g", 1, d_, 1.0);
    const_tensor(blk.ln2_b, tag + "ln2_b", 1, d_, 0.0);
    random_tensor(blk.w1, tag + "w1", d_, ffn_, in_scale, rng);
    const_tensor(blk.b1, tag + "b1", 1, ffn_, 0.0);
    random_tensor(blk.w2, tag + "w2", ffn_, d_, ffn_scale, rng);
    const_tensor(blk.b2, tag + "b2", 1, d_, 0.0);
  }
  const_tensor(lnf_g_, "lnf_g", 1, d_, 1.0);
  const_tensor(lnf_b_, "lnf_b", 1, d_, 0.0);
  random_tensor(head_w_, "head_w", d_, vocab_, 1.0 / std::sqrt(static_cast<double>(d_)), rng);
  const_tensor(head_b_, "head_b", 1, vocab_, 0.0);
}

std::vector<detail::Tensor*> CausalDecoder::tensors() {
  std::vector<detail::Tensor*> all = {&embed_, &pos_};
  for (Block& b : blocks_) {
    for (detail::Tensor* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b,
                              &b.w1, &b.b1, &b.w2, &b.b2}) {
      all.push_back(t);
    }
  }
  all.push_back(&lnf_g_);
  all.push_back(&lnf_b_);
  all.push_back(&head_w_);
  all.push_back(&head_b_);
  return all;
}

std::vector<const detail::Tensor*> CausalDecoder::tensors() const {
  auto mutable_all = const_cast<CausalDecoder*>(this)->tensors();
  return {mutable_all.begin(), mutable_all.end()};
}

Eigen::MatrixXd CausalDecoder::embed_rows(const Input& in) const {
  const Eigen::Index c = in.cond.rows();
  const Eigen::Index n = static_cast<Eigen::Index>(in.tokens.size());
  if (c > 0 && in.cond.cols() != d_) {
    throw Error(ErrorCode::dimension_mismatch, "conditioning rows must match the decoder width");
  }
  if (static_cast<Eigen::Index>(in.cond_pos.size()) != c) {
    throw Error(ErrorCode::usage, "conditioning rows and position ids disagree");
  }
  Eigen::MatrixXd x(c + n, d_);
  for (Eigen::Index r = 0; r < c; ++r) {
    const int pid = in.cond_pos[r];
    if (pid < 0 || pid >= max_seq_) {
      throw Error(ErrorCode::truncation, "position id " + std::to_string(pid) +
                                             " outside the learned table of " +
                                             std::to_string(max_seq_));
    }
    x.row(r) = in.cond.row(r) + pos_.value.row(pid);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = in.tokens[i];
    if (id < 0 || id >= vocab_) {
      throw Error(ErrorCode::usage, "token id " + std::to_string(id) + " outside the vocabulary");
    }
    const int pid = in.token_pos0 + static_cast<int>(i);
    if (pid < 0 || pid >= max_seq_) {
      throw Error(ErrorCode::truncation,
                  "sequence needs position " + std::to_string(pid) +
                      " but the learned table stops at " + std::to_string(max_seq_));
    }
    x.row(c + i) = embed_.value.row(id) + pos_.value.row(pid);
  }
  return x;
}

void CausalDecoder::layer_norm(const Eigen::MatrixXd& x, const detail::Tensor& g,
                               const detail::Tensor& b, Eigen::MatrixXd& out,
                               Eigen::MatrixXd& xhat, Eigen::VectorXd& inv_std) const {
  const Eigen::Index rows = x.rows();
  xhat.resize(rows, d_);
  inv_std.resize(rows);
  out.resize(rows, d_);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    inv_std(r) = inv;
    xhat.row(r) = ((x.row(r).array() - mu) * inv).matrix();
    out.row(r) = (xhat.row(r).array() * g.value.row(0).array()).matrix() + b.value.row(0);
  }
}

Eigen::MatrixXd CausalDecoder::layer_norm_backward(const Eigen::MatrixXd& dout,
                                                   const Eigen::MatrixXd& xhat,
                                                   const Eigen::VectorXd& inv_std,
                                                   detail::Tensor& g, detail::Tensor& b) {
  g.grad.row(0) += (dout.array() * xhat.array()).colwise().sum().matrix();
  b.grad.row(0) += dout.colwise().sum();
  const Eigen::MatrixXd dxhat = (dout.array().rowwise() * g.value.row(0).array()).matrix();
  const Eigen::VectorXd m1 = dxhat.rowwise().mean();
  const Eigen::VectorXd m2 = (dxhat.array() * xhat.array()).rowwise().mean().matrix();
  const Eigen::MatrixXd inner = (dxhat.colwise() - m1) - m2.asDiagonal() * xhat;
  return inv_std.asDiagonal() * inner;
}

Eigen::MatrixXd CausalDecoder::forward(const Input& in, Cache* cache) const {
  Eigen::MatrixXd x = embed_rows(in);
  const Eigen::Index rows = x.rows();
  const int dk = d_ / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  if (cache) {
    cache->in = in;
    cache->x0 = x;
    cache->blocks.clear();
    cache->blocks.resize(blocks_.size());
  }
  Cache::BlockCache scratch;
  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    const Block& blk = blocks_[bi];
    Cache::BlockCache& bc = cache ? cache->blocks[bi] : scratch;
    layer_norm(x, blk.ln1_g, blk.ln1_b, bc.a, bc.ln1_xhat, bc.ln1_inv);
    bc.q = bc.a * blk.wq.value;
    bc.k = bc.a * blk.wk.value;
    bc.v = bc.a * blk.wv.value;
    bc.attn.assign(heads_, Eigen::MatrixXd());
    bc.o_cat.resize(rows, d_);
    for (int h = 0; h < heads_; ++h) {
      Eigen::MatrixXd scores =
          inv_sqrt * (bc.q.middleCols(h * dk, dk) * bc.k.middleCols(h * dk, dk).transpose());
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index col = r + 1; col < rows; ++col) scores(r, col) = kMaskValue;
      }
      row_softmax(scores, bc.attn[h]);
      bc.o_cat.middleCols(h * dk, dk) = bc.attn[h] * bc.v.middleCols(h * dk, dk);
    }
    x += bc.o_cat * blk.wo.value;
    layer_norm(x, blk.ln2_g, blk.ln2_b, bc.b2, bc.ln2_xhat, bc.ln2_inv);
    bc.t = ((bc.b2 * blk.w1.value).rowwise() + blk.b1.value.row(0)).array().tanh().matrix();
    x += (bc.t * blk.w2.value).rowwise() + blk.b2.value.row(0);
  }
  Eigen::MatrixXd hf;
  Eigen::MatrixXd lnf_xhat;
  Eigen::VectorXd lnf_inv;
  layer_norm(x, lnf_g_, lnf_b_, hf, lnf_xhat, lnf_inv);
  if (cache) {
    cache->lnf_xhat = lnf_xhat;
    cache->lnf_inv = lnf_inv;
  }
  Eigen::MatrixXd logits = hf * head_w_.value;
  logits.rowwise() += head_b_.value.row(0);
  return logits;
}

Eigen::MatrixXd CausalDecoder::backward(const Cache& cache, const Eigen::MatrixXd& dlogits) {
  const Eigen::Index rows = cache.x0.rows();
  if (dlogits.rows() != rows || dlogits.cols() != vocab_) {
    throw Error(ErrorCode::shape_mismatch, "logit gradient shape does not match the forward pass");
  }
  const int dk = d_ / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  Eigen::MatrixXd hf = (cache.lnf_xhat.array().rowwise() * lnf_g_.value.row(0).array()).matrix();
  hf.rowwise() += lnf_b_.value.row(0);
  head_w_.grad += hf.transpose() * dlogits;
  head_b_.grad.row(0) += dlogits.colwise().sum();
  Eigen::MatrixXd dhf = dlogits * head_w_.value.transpose();
  Eigen::MatrixXd dx = layer_norm_backward(dhf, cache.lnf_xhat, cache.lnf_inv, lnf_g_, lnf_b_);

  for (std::size_t bi = blocks_.size(); bi-- > 0;) {
    Block& blk = blocks_[bi];
    const Cache::BlockCache& bc = cache.blocks[bi];
    // Feed-forward: x_out = x_mid + tanh(ln2(x_mid) w1 + b1) w2 + b2.
    blk.w2.grad += bc.t.transpose() * dx;
    blk.b2.grad.row(0) += dx.colwise().sum();
    Eigen::MatrixXd dpre =
        ((dx * blk.w2.value.transpose()).array() * (1.0 - bc.t.array().square())).matrix();
    blk.w1.grad += bc.b2.transpose() * dpre;
    blk.b1.grad.row(0) += dpre.colwise().sum();
    dx += layer_norm_backward(dpre * blk.w1.value.transpose(), bc.ln2_xhat, bc.ln2_inv, blk.ln2_g,
                              blk.ln2_b);
    // Attention: x_mid = x_in + concat_heads(softmax(qk^T) v) wo.
    blk.wo.grad += bc.o_cat.transpose() * dx;
    Eigen::MatrixXd do_cat = dx * blk.wo.value.transpose();
    Eigen::MatrixXd dq(rows, d_), dkk(rows, d_), dv(rows, d_);
    for (int h = 0; h < heads_; ++h) {
      const auto qh = bc.q.middleCols(h * dk, dk);
      const auto kh = bc.k.middleCols(h * dk, dk);
      const auto vh = bc.v.middleCols(h * dk, dk);
      const Eigen::MatrixXd& wh = bc.attn[h];
      const auto doh = do_cat.middleCols(h * dk, dk);
      Eigen::MatrixXd dwh = doh * vh.transpose();
      dv.middleCols(h * dk, dk) = wh.transpose() * doh;
      // Row softmax backward; masked entries carry zero weight, so they stay zero.
      const Eigen::VectorXd rs = (dwh.array() * wh.array()).rowwise().sum().matrix();
      const Eigen::MatrixXd ds = (wh.array() * (dwh.colwise() - rs).array()).matrix();
      dq.middleCols(h * dk, dk) = inv_sqrt * (ds * kh);
      dkk.middleCols(h * dk, dk) = inv_sqrt * (ds.transpose() * qh);
    }
    blk.wq.grad += bc.a.transpose() * dq;
    blk.wk.grad += bc.a.transpose() * dkk;
    blk.wv.grad += bc.a.transpose() * dv;
    Eigen::MatrixXd da = dq * blk.wq.value.transpose() + dkk * blk.wk.value.transpose() +
                         dv * blk.wv.value.transpose();
    dx += layer_norm_backward(da, bc.ln1_xhat, bc.ln1_inv, blk.ln1_g, blk.ln1_b);
  }

  const Eigen::Index c = cache.in.cond.rows();
  for (Eigen::Index r = 0; r < c; ++r) pos_.grad.row(cache.in.cond_pos[r]) += dx.row(r);
  for (std::size_t i = 0; i < cache.in.tokens.size(); ++i) {
    embed_.grad.row(cache.in.tokens[i]) += dx.row(c + static_cast<Eigen::Index>(i));
    pos_.grad.row(cache.in.token_pos0 + static_cast<int>(i)) +=
        dx.row(c + static_cast<Eigen::Index>(i));
  }
  return dx;
}

double CausalDecoder::grad_squared_norm() const {
  double total = 0;
  for (const detail::Tensor* t : tensors()) total += t->grad.squaredNorm();
  return total;
}

void CausalDecoder::scale_grads(double factor) {
  for (detail::Tensor* t : tensors()) t->grad *= factor;
}

void CausalDecoder::step(double lr, double momentum) {
  for (detail::Tensor* t : tensors()) tensor_step(*t, lr, momentum, 1.0);
  zero_grads();
}

void CausalDecoder::zero_grads() {
  for (detail::Tensor* t : tensors()) t->grad.setZero();
}

std::int64_t CausalDecoder::parameter_count() const {
  std::int64_t n = 0;
  for (const detail::Tensor* t : tensors()) n += t->value.size();
  return n;
}

// ---------------------------------------------------------------------------
// EncoderModel

namespace {

std::vector<int> mlp_dims(int in, int hidden, int out) {
  if (hidden > 0) return {in, hidden, out};
  return {in, out};
}

}  // namespace

EncoderModel::EncoderModel(EncoderConfig cfg, Tokenizer tokenizer)
    : cfg_(cfg),
      tokenizer_(std::move(tokenizer)),
      mlp1_(mlp_dims(cfg.voxels, cfg.mlp_hidden, cfg.feature_dim), seed_stream(cfg.seed, "mlp1")),
      mlp2_(mlp_dims(cfg.voxels, cfg.mlp_hidden, cfg.feature_dim), seed_stream(cfg.seed, "mlp2")),
      mlpg_(mlp_dims(2 * cfg.feature_dim, cfg.mlp_g_hidden, cfg.prefix_tokens * cfg.model_dim),
            seed_stream(cfg.seed, "mlpg")),
      decoder_(tokenizer_.vocab_size(), cfg.model_dim, cfg.heads, cfg.blocks, cfg.ffn_dim,
               cfg.max_seq, seed_stream(cfg.seed, "decoder")) {
  if (cfg.voxels < 1 || cfg.feature_dim < 1 || cfg.prefix_tokens < 1) {
    throw Error(ErrorCode::usage, "encoder dimensions must be positive");
  }
  if (cfg.max_seq < cfg.prefix_tokens + 2 + kMinSegmentTokens) {
    throw Error(ErrorCode::usage, "max_seq leaves no room for a minimal segment");
  }
  for (LocationLabel loc : kAllLocations) {
    if (tokenizer_.word_id(location_name(loc)) < 0) {
      throw Error(ErrorCode::usage, std::string("tokenizer lacks the location word '") +
                                        location_name(loc) + "'");
    }
  }
  if (decoder_.parameter_count() > 2'000'000) {
    throw Error(ErrorCode::usage, "decoder exceeds the 2M parameter budget");
  }
  Rng rng(seed_stream(cfg.seed, "glue"));
  random_tensor(proj_f_, "proj_f", cfg.feature_dim, cfg.model_dim,
                1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)), rng);
  random_tensor(slot_emb_, "slot_emb", kObjectSlots, cfg.model_dim,
                1.0 / std::sqrt(static_cast<double>(cfg.model_dim)), rng);
}

std::int64_t EncoderModel::parameter_count() const {
  return mlp1_.parameter_count() + mlp2_.parameter_count() + mlpg_.parameter_count() +
         proj_f_.value.size() + slot_emb_.value.size() + decoder_.parameter_count();
}

EncoderModel::Encoded EncoderModel::encode(const Eigen::VectorXd& x) const {
  if (x.size() != cfg_.voxels) {
    throw Error(ErrorCode::dimension_mismatch,
                "expected " + std::to_string(cfg_.voxels) + " voxels, got " +
                    std::to_string(x.size()));
  }
  Encoded enc;
  enc.f1 = mlp1_.forward(x.transpose()).row(0).transpose();
  enc.f2 = mlp2_.forward(x.transpose()).row(0).transpose();
  Eigen::MatrixXd cat(1, 2 * cfg_.feature_dim);
  cat << enc.f1.transpose(), enc.f2.transpose();
  const Eigen::MatrixXd flat = mlpg_.forward(cat);
  enc.prefix.resize(cfg_.prefix_tokens, cfg_.model_dim);
  for (int i = 0; i < cfg_.prefix_tokens; ++i) {
    enc.prefix.row(i) = flat.row(0).segment(i * cfg_.model_dim, cfg_.model_dim);
  }
  return enc;
}

std::vector<int> EncoderModel::segment_targets(const StructuredDescription& d, int slot) const {
  if (slot < 0 || slot > kBackgroundSlot) {
    throw Error(ErrorCode::usage, "segment slot must be 0, 1, or 2");
  }
  std::vector<int> ids;
  if (slot == kBackgroundSlot) {
    ids = tokenizer_.tokenize(d.background);
    ids.push_back(Tokenizer::kEos);
    return ids;
  }
  const ObjectTuple& obj = d.objects[static_cast<std::size_t>(slot)];
  ids = tokenizer_.tokenize(obj.name);
  ids.push_back(Tokenizer::kSep);
  for (int id : tokenizer_.tokenize(obj.desc)) ids.push_back(id);
  ids.push_back(Tokenizer::kSep);
  ids.push_back(tokenizer_.word_id(location_name(obj.loc)));
  ids.push_back(Tokenizer::kEos);
  return ids;
}

CausalDecoder::Input EncoderModel::segment_input(const Encoded& enc, int slot,
                                                 const std::vector<int>& teacher) const {
  const int p = cfg_.prefix_tokens;
  CausalDecoder::Input in;
  if (slot == kBackgroundSlot) {
    in.cond = enc.prefix;
    in.cond_pos.resize(p);
  } else {
    in.cond.resize(p + 2, cfg_.model_dim);
    in.cond.topRows(p) = enc.prefix;
    in.cond.row(p) = slot_emb_.value.row(slot);
    const Eigen::VectorXd& f = slot == 0 ? enc.f1 : enc.f2;
    in.cond.row(p + 1) = f.transpose() * proj_f_.value;
    in.cond_pos.resize(p + 2);
  }
  for (std::size_t i = 0; i < in.cond_pos.size(); ++i) in.cond_pos[i] = static_cast<int>(i);
  // Token rows always start at the same position so stage-0 text and
  // conditioned segments share the learned position table.
  in.token_pos0 = p + 2;
  in.tokens.reserve(teacher.size() + 1);
  in.tokens.push_back(Tokenizer::kBos);
  for (int id : teacher) in.tokens.push_back(id);
  return in;
}

namespace {

/// Teacher-forced negative log-likelihood over the last `targets.size()`
/// rows. Fills dlogits (same shape as logits, zero elsewhere) when asked.
double nll_from_logits(const Eigen::MatrixXd& logits, const std::vector<int>& targets,
                       Eigen::MatrixXd* dlogits) {
  const Eigen::Index t_count = static_cast<Eigen::Index>(targets.size());
  const Eigen::Index first = logits.rows() - t_count;
  if (dlogits) *dlogits = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
  double nll = 0;
  for (Eigen::Index t = 0; t < t_count; ++t) {
    const Eigen::Index r = first + t;
    const int target = targets[static_cast<std::size_t>(t)];
    const double m = logits.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(r).array() - m).exp().matrix();
    const double total = e.sum();
    nll += m + std::log(total) - logits(r, target);
    if (dlogits) {
      dlogits->row(r) = e / total;
      (*dlogits)(r, target) -= 1.0;
    }
  }
  return nll;
}

}  // namespace

Eigen::MatrixXd EncoderModel::teacher_logits(const Encoded& enc, int slot,
                                             const std::vector<int>& targets) const {
  if (targets.empty()) throw Error(ErrorCode::usage, "segment needs at least one target token");
  std::vector<int> teacher(targets.begin(), targets.end() - 1);
  const Eigen::MatrixXd logits = decoder_.forward(segment_input(enc, slot, teacher));
  return logits.bottomRows(static_cast<Eigen::Index>(targets.size()));
}

TokenLoss EncoderModel::segments_pass(const Eigen::VectorXd& x, const StructuredDescription& d,
                                      bool accumulate) {
  if (x.size() != cfg_.voxels) {
    throw Error(ErrorCode::dimension_mismatch,
                "expected " + std::to_string(cfg_.voxels) + " voxels, got " +
                    std::to_string(x.size()));
  }
  const int p = cfg_.prefix_tokens;
  const int dm = cfg_.model_dim;
  const int f = cfg_.feature_dim;

  Mlp::Cache c1, c2, cg;
  const Eigen::MatrixXd f1 = mlp1_.forward(x.transpose(), &c1);
  const Eigen::MatrixXd f2 = mlp2_.forward(x.transpose(), &c2);
  Eigen::MatrixXd cat(1, 2 * f);
  cat << f1, f2;
  const Eigen::MatrixXd flat = mlpg_.forward(cat, &cg);
  Encoded enc;
  enc.f1 = f1.row(0).transpose();
  enc.f2 = f2.row(0).transpose();
  enc.prefix.resize(p, dm);
  for (int i = 0; i < p; ++i) enc.prefix.row(i) = flat.row(0).segment(i * dm, dm);

  Eigen::MatrixXd dprefix = Eigen::MatrixXd::Zero(p, dm);
  Eigen::RowVectorXd df1 = Eigen::RowVectorXd::Zero(f);
  Eigen::RowVectorXd df2 = Eigen::RowVectorXd::Zero(f);

  TokenLoss loss;
  std::vector<int> slots = {0, 1};
  if (cfg_.background_segment) slots.push_back(kBackgroundSlot);
  for (int slot : slots) {
    const std::vector<int> targets = segment_targets(d, slot);
    std::vector<int> teacher(targets.begin(), targets.end() - 1);
    const CausalDecoder::Input in = segment_input(enc, slot, teacher);
    CausalDecoder::Cache cache;
    const Eigen::MatrixXd logits = decoder_.forward(in, accumulate ? &cache : nullptr);
    Eigen::MatrixXd dlogits;
    loss.sum += nll_from_logits(logits, targets, accumulate ? &dlogits : nullptr);
    loss.tokens += static_cast<int>(targets.size());
    if (!accumulate) continue;
    const Eigen::MatrixXd dx = decoder_.backward(cache, dlogits);
    dprefix += dx.topRows(p);
    if (slot != kBackgroundSlot) {
      slot_emb_.grad.row(slot) += dx.row(p);
      const Eigen::RowVectorXd drow = dx.row(p + 1);
      const Eigen::VectorXd& fj = slot == 0 ? enc.f1 : enc.f2;
      proj_f_.grad += fj * drow;
      Eigen::RowVectorXd dfj = drow * proj_f_.value.transpose();
      (slot == 0 ? df1 : df2) += dfj;
    }
  }

  if (accumulate) {
    Eigen::MatrixXd dflat(1, p * dm);
    for (int i = 0; i < p; ++i) dflat.row(0).segment(i * dm, dm) = dprefix.row(i);
    const Eigen::MatrixXd dcat = mlpg_.backward(cg, dflat);
    df1 += dcat.row(0).head(f);
    df2 += dcat.row(0).tail(f);
    mlp1_.backward(c1, df1);
    mlp2_.backward(c2, df2);
  }

  loss.per_token = loss.tokens > 0 ? loss.sum / loss.tokens : 0.0;
  return loss;
}

TokenLoss EncoderModel::lm_pass(const StructuredDescription& d, bool accumulate) {
  std::vector<int> targets = tokenizer_.tokenize(serialize_description(d));
  targets.push_back(Tokenizer::kEos);
  CausalDecoder::Input in;
  in.token_pos0 = cfg_.prefix_tokens + 2;
  in.tokens.push_back(Tokenizer::kBos);
  for (std::size_t i = 0; i + 1 < targets.size(); ++i) in.tokens.push_back(targets[i]);
  CausalDecoder::Cache cache;
  const Eigen::MatrixXd logits = decoder_.forward(in, accumulate ? &cache : nullptr);
  Eigen::MatrixXd dlogits;
  TokenLoss loss;
  loss.sum = nll_from_logits(logits, targets, accumulate ? &dlogits : nullptr);
  loss.tokens = static_cast<int>(targets.size());
  loss.per_token = loss.sum / loss.tokens;
  if (accumulate) decoder_.backward(cache, dlogits);
  return loss;
}

TokenLoss EncoderModel::token_loss(const Eigen::VectorXd& x, const StructuredDescription& d) const {
  // The non-accumulating pass leaves every gradient buffer untouched.
  return const_cast<EncoderModel*>(this)->segments_pass(x, d, false);
}

TokenLoss EncoderModel::token_loss_backward(const Eigen::VectorXd& x,
                                            const StructuredDescription& d) {
  return segments_pass(x, d, true);
}

TokenLoss EncoderModel::lm_loss(const StructuredDescription& d) const {
  return const_cast<EncoderModel*>(this)->lm_pass(d, false);
}

TokenLoss EncoderModel::lm_loss_backward(const StructuredDescription& d) {
  return lm_pass(d, true);
}

SegmentDecode EncoderModel::decode_segment(const Encoded& enc, int slot, int max_tokens) const {
  if (slot < 0 || slot > kBackgroundSlot) {
    throw Error(ErrorCode::usage, "segment slot must be 0, 1, or 2");
  }
  if (max_tokens < 1) throw Error(ErrorCode::usage, "max_tokens must be positive");
  // Emitted rows must fit the learned position table.
  const int room = cfg_.max_seq - (cfg_.prefix_tokens + 2) - 1;
  SegmentDecode out;
  for (int step = 0; step < max_tokens; ++step) {
    const CausalDecoder::Input in = segment_input(enc, slot, out.ids);
    const Eigen::MatrixXd logits = decoder_.forward(in);
    const Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
    const double m = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - m).exp().matrix();
    out.steps.push_back((e / e.sum()).transpose());
    Eigen::Index pick = 0;
    row.maxCoeff(&pick);
    if (pick == Tokenizer::kEos) {
      out.hit_eos = true;
      break;
    }
    out.ids.push_back(static_cast<int>(pick));
    if (static_cast<int>(out.ids.size()) >= room) break;
  }
  return out;
}

namespace {

/// Splits emitted ids at separator tokens.
std::vector<std::vector<int>> split_fields(const std::vector<int>& ids) {
  std::vector<std::vector<int>> fields(1);
  for (int id : ids) {
    if (id == Tokenizer::kSep) {
      fields.emplace_back();
    } else {
      fields.back().push_back(id);
    }
  }
  return fields;
}

}  // namespace

StructuredDescription EncoderModel::decode_description(const Encoded& enc, int max_tokens) const {
  if (max_tokens < kMinSegmentTokens) {
    throw Error(ErrorCode::truncation,
                "max_tokens=" + std::to_string(max_tokens) +
                    " cannot fit a minimal object segment of " +
                    std::to_string(kMinSegmentTokens) + " steps");
  }
  StructuredDescription d;
  std::set<LocationLabel> used;
  for (int slot = 0; slot < kObjectSlots; ++slot) {
    const SegmentDecode seg = decode_segment(enc, slot, max_tokens);
    const auto fields = split_fields(seg.ids);
    const std::string name_txt = tokenizer_.detokenize(fields[0]);
    const std::string desc_txt = fields.size() > 1 ? tokenizer_.detokenize(fields[1]) : "";
    bool loc_from_text = false;
    LocationLabel loc = LocationLabel::full;
    if (fields.size() == 3) {
      try {
        loc = parse_location(trim(tokenizer_.detokenize(fields[2])));
        loc_from_text = true;
      } catch (const Error&) {
      }
    }
    const bool well_formed = seg.hit_eos && fields.size() == 3 && loc_from_text &&
                             !used.count(loc) && !trim(name_txt).empty() &&
                             !trim(desc_txt).empty();
    ObjectTuple& obj = d.objects[static_cast<std::size_t>(slot)];
    if (well_formed) {
      obj = {name_txt, desc_txt, loc};
    } else {
      // Parse fallback: keep the raw decoded text, pick the location by
      // restricted argmax over the five labels (earlier slots excluded).
      if (!loc_from_text || used.count(loc)) {
        const Eigen::VectorXd& dist = seg.steps.back();
        double best = -1;
        for (LocationLabel cand : kAllLocations) {
          if (used.count(cand)) continue;
          const double score = dist(tokenizer_.word_id(location_name(cand)));
          if (score > best) {
            best = score;
            loc = cand;
          }
        }
      }
      std::string name = trim(name_txt);
      if (name.empty()) name = "object";
      std::string desc = trim(desc_txt);
      if (desc.empty()) desc = trim(tokenizer_.detokenize(seg.ids));
      if (desc.empty()) desc = "unreadable";
      obj = {name, desc, loc};
    }
    used.insert(obj.loc);
  }
  const SegmentDecode seg = decode_segment(enc, kBackgroundSlot, max_tokens);
  const std::string bg = tokenizer_.detokenize(seg.ids);
  if (seg.hit_eos && !trim(bg).empty()) {
    d.background = bg;
  } else {
    d.background = trim(bg).empty() ? "background" : trim(bg);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Flat parameter access

Eigen::VectorXd EncoderModel::flatten_params() const {
  std::vector<Eigen::VectorXd> parts = {mlp1_.flatten_params(), mlp2_.flatten_params(),
                                        mlpg_.flatten_params()};
  Eigen::Index total = parts[0].size() + parts[1].size() + parts[2].size();
  std::vector<const detail::Tensor*> tensors = {&proj_f_, &slot_emb_};
  for (const detail::Tensor* t : decoder_.tensors()) tensors.push_back(t);
  for (const detail::Tensor* t : tensors) total += t->value.size();
  Eigen::VectorXd flat(total);
  Eigen::Index at = 0;
  for (const Eigen::VectorXd& part : parts) {
    flat.segment(at, part.size()) = part;
    at += part.size();
  }
  for (const detail::Tensor* t : tensors) {
    flat.segment(at, t->value.size()) =
        Eigen::Map<const Eigen::VectorXd>(t->value.data(), t->value.size());
    at += t->value.size();
  }
  return flat;
}

void EncoderModel::set_params(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) {
    throw Error(ErrorCode::shape_mismatch, "flat parameter vector has the wrong length");
  }
  Eigen::Index at = 0;
  for (Mlp* mlp : {&mlp1_, &mlp2_, &mlpg_}) {
    mlp->set_params(flat.segment(at, mlp->parameter_count()));
    at += mlp->parameter_count();
  }
  std::vector<detail::Tensor*> tensors = {&proj_f_, &slot_emb_};
  for (detail::Tensor* t : decoder_.tensors()) tensors.push_back(t);
  for (detail::Tensor* t : tensors) {
    Eigen::Map<Eigen::VectorXd>(t->value.data(), t->value.size()) =
        flat.segment(at, t->value.size());
    at += t->value.size();
  }
}

Eigen::VectorXd EncoderModel::flatten_grads() const {
  std::vector<Eigen::VectorXd> parts = {mlp1_.flatten_grads(), mlp2_.flatten_grads(),
                                        mlpg_.flatten_grads()};
  std::vector<const detail::Tensor*> tensors = {&proj_f_, &slot_emb_};
  for (const detail::Tensor* t : decoder_.tensors()) tensors.push_back(t);
  Eigen::Index total = parts[0].size() + parts[1].size() + parts[2].size();
  for (const detail::Tensor* t : tensors) total += t->grad.size();
  Eigen::VectorXd flat(total);
  Eigen::Index at = 0;
  for (const Eigen::VectorXd& part : parts) {
    flat.segment(at, part.size()) = part;
    at += part.size();
  }
  for (const detail::Tensor* t : tensors) {
    flat.segment(at, t->grad.size()) =
        Eigen::Map<const Eigen::VectorXd>(t->grad.data(), t->grad.size());
    at += t->grad.size();
  }
  return flat;
}

// ---------------------------------------------------------------------------
// Training

void EncoderModel::zero_all_grads() {
  mlp1_.zero_grads();
  mlp2_.zero_grads();
  mlpg_.zero_grads();
  proj_f_.grad.setZero();
  slot_emb_.grad.setZero();
  decoder_.zero_grads();
}

void EncoderModel::apply_step(Stage stage, double lr) {
  const bool mlps = stage != Stage::decoder_only;
  const bool dec = stage != Stage::mlps_only;
  double norm_sq = 0;
  if (mlps) {
    norm_sq += mlp1_.grad_squared_norm() + mlp2_.grad_squared_norm() + mlpg_.grad_squared_norm();
    norm_sq += proj_f_.grad.squaredNorm() + slot_emb_.grad.squaredNorm();
  }
  if (dec) norm_sq += decoder_.grad_squared_norm();
  const double norm = std::sqrt(norm_sq);
  const double scale = norm > kClip ? kClip / norm : 1.0;
  if (mlps) {
    for (Mlp* mlp : {&mlp1_, &mlp2_, &mlpg_}) {
      mlp->scale_grads(scale);
      mlp->step(lr, kMomentum, 0.0);
    }
    tensor_step(proj_f_, lr, kMomentum, scale);
    tensor_step(slot_emb_, lr, kMomentum, scale);
  }
  if (dec) {
    decoder_.scale_grads(scale);
    decoder_.step(lr, kMomentum);
  }
  zero_all_grads();
}

TrainReport train(EncoderModel& model, const std::vector<TrainPair>& corpus,
                  const TrainSchedule& sched) {
  if (sched.stage0_epochs < 0 || sched.stage1_epochs < 0 || sched.stage2_epochs < 0) {
    throw Error(ErrorCode::usage, "epoch counts must be non-negative");
  }
  if (sched.lr1 <= 0 || sched.lr2 <= 0) {
    throw Error(ErrorCode::usage, "learning rates must be positive");
  }
  if (sched.batch < 1) throw Error(ErrorCode::usage, "batch size must be positive");
  const int total_epochs = sched.stage0_epochs + sched.stage1_epochs + sched.stage2_epochs;
  TrainReport report;
  if (total_epochs == 0) return report;
  if (corpus.empty()) throw Error(ErrorCode::usage, "training corpus is empty");
  for (const TrainPair& pair : corpus) {
    if (pair.voxels.size() != model.cfg_.voxels) {
      throw Error(ErrorCode::dimension_mismatch, "corpus voxel width does not match the model");
    }
  }
  model.schedule_ = sched;

  Rng rng(seed_stream(model.cfg_.seed, "train"));
  const std::size_t n = corpus.size();
  std::vector<std::size_t> order(n);

  const auto run_stage = [&](int stage_idx, int epochs, double lr, EncoderModel::Stage mode,
                             std::vector<double>& curve) {
    for (int epoch = 0; epoch < epochs; ++epoch) {
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        std::swap(order[i], order[i + rng.below(n - i)]);
      }
      double nll = 0;
      long tokens = 0;
      for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(sched.batch)) {
        const std::size_t stop = std::min(n, start + static_cast<std::size_t>(sched.batch));
        model.zero_all_grads();
        for (std::size_t i = start; i < stop; ++i) {
          const TrainPair& pair = corpus[order[i]];
          const TokenLoss tl = mode == EncoderModel::Stage::decoder_only
                                   ? model.lm_pass(pair.description, true)
                                   : model.segments_pass(pair.voxels, pair.description, true);
          if (!std::isfinite(tl.sum)) {
            throw Error(ErrorCode::diverged, "loss diverged at stage " +
                                                 std::to_string(stage_idx) + " epoch " +
                                                 std::to_string(epoch));
          }
          nll += tl.sum;
          tokens += tl.tokens;
        }
        // Mean gradient over the batch, then the global-norm clip.
        const double inv = 1.0 / static_cast<double>(stop - start);
        model.mlp1_.scale_grads(inv);
        model.mlp2_.scale_grads(inv);
        model.mlpg_.scale_grads(inv);
        model.proj_f_.grad *= inv;
        model.slot_emb_.grad *= inv;
        model.decoder_.scale_grads(inv);
        model.apply_step(mode, lr);
      }
      curve.push_back(nll / static_cast<double>(std::max<long>(tokens, 1)));
    }
  };

  run_stage(0, sched.stage0_epochs, sched.lr1, EncoderModel::Stage::decoder_only, report.stage0);
  run_stage(1, sched.stage1_epochs, sched.lr1, EncoderModel::Stage::mlps_only, report.stage1);
  run_stage(2, sched.stage2_epochs, sched.lr2, EncoderModel::Stage::joint, report.stage2);
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'P', 'E', 'N', 'C'};

nlohmann::json schedule_json(const TrainSchedule& s) {
  return {{"stage0_epochs", s.stage0_epochs}, {"stage1_epochs", s.stage1_epochs},
          {"stage2_epochs", s.stage2_epochs}, {"lr1", s.lr1},
          {"lr2", s.lr2},                     {"batch", s.batch}};
}

TrainSchedule schedule_from_json(const nlohmann::json& j) {
  TrainSchedule s;
  s.stage0_epochs = j.at("stage0_epochs").get<int>();
  s.stage1_epochs = j.at("stage1_epochs").get<int>();
  s.stage2_epochs = j.at("stage2_epochs").get<int>();
  s.lr1 = j.at("lr1").get<double>();
  s.lr2 = j.at("lr2").get<double>();
  s.batch = j.at("batch").get<int>();
  return s;
}

nlohmann::json config_json(const EncoderConfig& c) {
  return {{"voxels", c.voxels},
          {"feature_dim", c.feature_dim},
          {"prefix_tokens", c.prefix_tokens},
          {"model_dim", c.model_dim},
          {"heads", c.heads},
          {"blocks", c.blocks},
          {"ffn_dim", c.ffn_dim},
          {"max_seq", c.max_seq},
          {"mlp_hidden", c.mlp_hidden},
          {"mlp_g_hidden", c.mlp_g_hidden},
          {"background_segment", c.background_segment},
          {"seed", c.seed}};
}

EncoderConfig config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.voxels = j.at("voxels").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.prefix_tokens = j.at("prefix_tokens").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.mlp_g_hidden = j.at("mlp_g_hidden").get<int>();
  c.background_segment = j.at("background_segment").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_encoder(const EncoderModel& model, const std::filesystem::path& path) {
  std::vector<std::pair<std::string, Eigen::MatrixXd>> values;
  values.emplace_back("mlp1", model.mlp1_.flatten_params());
  values.emplace_back("mlp2", model.mlp2_.flatten_params());
  values.emplace_back("mlpg", model.mlpg_.flatten_params());
  values.emplace_back("proj_f", model.proj_f_.value);
  values.emplace_back("slot_emb", model.slot_emb_.value);
  for (const detail::Tensor* t : model.decoder_.tensors()) {
    values.emplace_back("dec." + t->name, t->value);
  }

  nlohmann::json header;
  header["format"] = "prism-encoder";
  header["version"] = 1;
  header["config"] = config_json(model.cfg_);
  header["vocab"] = {{"words", model.tokenizer_.words()}, {"max_len", model.tokenizer_.max_len()}};
  header["schedule"] = schedule_json(model.schedule_);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, value] : values) {
    manifest.push_back({{"name", name},
                        {"rows", static_cast<std::int64_t>(value.rows())},
                        {"cols", static_cast<std::int64_t>(value.cols())}});
  }
  header["params"] = manifest;

  const std::string header_text = header.dump();
  std::string bytes(kMagic, 4);
  const std::uint32_t len = static_cast<std::uint32_t>(header_text.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  bytes += header_text;
  for (const auto& [name, value] : values) bytes += encode_matrix(value);
  write_file(path, bytes);
}

EncoderModel load_encoder(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::parse, path.string() + " is not an encoder checkpoint");
  }
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) {
    len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  }
  if (bytes.size() < 8 + static_cast<std::size_t>(len)) {
    throw Error(ErrorCode::parse, path.string() + ": checkpoint header is truncated");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& err) {
    throw Error(ErrorCode::parse, path.string() + ": checkpoint header is not valid JSON: " +
                                      err.what());
  }
  EncoderConfig cfg;
  TrainSchedule sched;
  std::vector<std::string> words;
  int max_len = 0;
  nlohmann::json manifest;
  try {
    if (header.at("format").get<std::string>() != "prism-encoder") {
      throw Error(ErrorCode::parse, path.string() + ": unknown checkpoint format");
    }
    if (header.at("version").get<int>() != 1) {
      throw Error(ErrorCode::parse, path.string() + ": unsupported checkpoint version");
    }
    cfg = config_from_json(header.at("config"));
    sched = schedule_from_json(header.at("schedule"));
    words = header.at("vocab").at("words").get<std::vector<std::string>>();
    max_len = header.at("vocab").at("max_len").get<int>();
    manifest = header.at("params");
  } catch (const nlohmann::json::exception& err) {
    throw Error(ErrorCode::parse, path.string() + ": checkpoint header is incomplete: " +
                                      err.what());
  }

  EncoderModel model(cfg, Tokenizer::from_words(words, max_len));
  model.schedule_ = sched;

  std::vector<std::pair<std::string, Eigen::MatrixXd*>> slots;
  slots.emplace_back("mlp1", nullptr);
  slots.emplace_back("mlp2", nullptr);
  slots.emplace_back("mlpg", nullptr);
  slots.emplace_back("proj_f", &model.proj_f_.value);
  slots.emplace_back("slot_emb", &model.slot_emb_.value);
  for (detail::Tensor* t : model.decoder_.tensors()) {
    slots.emplace_back("dec." + t->name, &t->value);
  }
  if (!manifest.is_array() || manifest.size() != slots.size()) {
    throw Error(ErrorCode::shape_mismatch,
                path.string() + ": checkpoint lists " + std::to_string(manifest.size()) +
                    " tensors, the model expects " + std::to_string(slots.size()));
  }

  std::size_t at = 8 + len;
  Mlp* mlps[3] = {&model.mlp1_, &model.mlp2_, &model.mlpg_};
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const nlohmann::json& entry = manifest[i];
    std::string name;
    std::int64_t rows = 0, cols = 0;
    try {
      name = entry.at("name").get<std::string>();
      rows = entry.at("rows").get<std::int64_t>();
      cols = entry.at("cols").get<std::int64_t>();
    } catch (const nlohmann::json::exception& err) {
      throw Error(ErrorCode::parse, path.string() + ": malformed tensor manifest: " + err.what());
    }
    if (name != slots[i].first) {
      throw Error(ErrorCode::shape_mismatch, path.string() + ": tensor " + std::to_string(i) +
                                                 " is '" + name + "', expected '" +
                                                 slots[i].first + "'");
    }
    const std::int64_t expect_rows =
        i < 3 ? mlps[i]->parameter_count() : slots[i].second->rows();
    const std::int64_t expect_cols = i < 3 ? 1 : slots[i].second->cols();
    if (rows != expect_rows || cols != expect_cols) {
      throw Error(ErrorCode::shape_mismatch,
                  path.string() + ": tensor '" + name + "' has shape " + std::to_string(rows) +
                      "x" + std::to_string(cols) + ", the model expects " +
                      std::to_string(expect_rows) + "x" + std::to_string(expect_cols));
    }
    const std::size_t block = 16 + static_cast<std::size_t>(rows * cols) * 4;
    if (at + block > bytes.size()) {
      throw Error(ErrorCode::parse, path.string() + ": checkpoint payload is truncated at '" +
                                        name + "'");
    }
    const Eigen::MatrixXd value =
        decode_matrix(std::string_view(bytes).substr(at, block), path.string() + ":" + name);
    at += block;
    if (value.rows() != rows || value.cols() != cols) {
      throw Error(ErrorCode::shape_mismatch,
                  path.string() + ": tensor '" + name + "' payload disagrees with the manifest");
    }
    if (i < 3) {
      mlps[i]->set_params(value.col(0));
    } else {
      *slots[i].second = value;
    }
  }
  if (at != bytes.size()) {
    throw Error(ErrorCode::parse, path.string() + ": trailing bytes after the last tensor");
  }
  return model;
}

}  // namespace prism
