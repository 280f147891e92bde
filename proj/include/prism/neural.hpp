#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prism/descriptions.hpp"
#include "prism/mlp.hpp"
#include "prism/text.hpp"

namespace prism {

/// Width choices for the voxel-to-description encoder. The defaults give
/// roughly 0.8M parameters, well inside the 2M decoder budget.
struct EncoderConfig {
  int voxels = 64;
  int feature_dim = 64;    // per-object code width
  int prefix_tokens = 8;   // conditioning rows produced by the prefix MLP
  int model_dim = 128;     // decoder residual width
  int heads = 4;
  int blocks = 2;
  int ffn_dim = 512;
  int max_seq = 96;        // learned position table size; sequences must fit
  int mlp_hidden = 128;    // per-object MLP hidden width, 0 = linear
  int mlp_g_hidden = 256;  // prefix MLP hidden width, 0 = linear
  bool background_segment = true;  // include the background term in the loss
  std::uint64_t seed = 0;
};

/// Three-stage schedule: decoder-only language pretraining, encoder MLPs
/// with the decoder frozen, then a joint fine-tune. Rates are used as given;
/// the CLI applies its desk-scale multiplier before building the schedule.
struct TrainSchedule {
  int stage0_epochs = 40;
  int stage1_epochs = 60;
  int stage2_epochs = 20;
  double lr1 = 1e-5;  // stages 0 and 1
  double lr2 = 5e-7;  // stage 2
  int batch = 8;
};

struct TokenLoss {
  double sum = 0.0;        // total teacher-forced negative log-likelihood, nats
  double per_token = 0.0;  // sum / tokens
  int tokens = 0;          // predicted positions, end-of-sequence included
};

struct TrainPair {
  Eigen::VectorXd voxels;
  StructuredDescription description;
};

struct TrainReport {
  std::vector<double> stage0, stage1, stage2;  // mean nats/token per epoch
};

/// One greedy segment decode, kept verbose so tests can audit every step.
struct SegmentDecode {
  std::vector<int> ids;   // emitted tokens, end-of-sequence excluded
  bool hit_eos = false;
  std::vector<Eigen::VectorXd> steps;  // softmax distribution per step
};

/// Tokenizer over the serialized training descriptions. The five location
/// words are always folded in so constrained location decoding works even
/// when a corpus never uses one of them.
Tokenizer description_tokenizer(const std::vector<StructuredDescription>& corpus,
                                int max_len = 256);

namespace detail {

/// Parameter tensor with its gradient and optimizer buffers. vel carries
/// momentum (or the Adam first moment); vel2 is the Adam second moment and
/// stays empty under plain momentum updates.
struct Tensor {
  std::string name;
  Eigen::MatrixXd value, grad, vel, vel2;
};

}  // namespace detail

/// Pre-norm causal transformer decoder with learned positions and manual
/// backprop. Each row is either a free conditioning vector or an embedded
/// token; the causal mask follows row order while position ids stay
/// explicit, so conditioned segments and plain text share token positions.
class CausalDecoder {
public:
  CausalDecoder(int vocab, int model_dim, int heads, int blocks, int ffn_dim, int max_seq,
                std::uint64_t seed);

  struct Input {
    Eigen::MatrixXd cond;       // leading free rows, may have zero rows
    std::vector<int> cond_pos;  // position id per conditioning row
    std::vector<int> tokens;    // token rows appended after the free rows
    int token_pos0 = 0;         // position id of tokens[0]; later rows count up
  };

  struct Cache {
    Input in;
    Eigen::MatrixXd x0;
    struct BlockCache {
      Eigen::MatrixXd a, q, k, v, o_cat, b2, t;
      std::vector<Eigen::MatrixXd> attn;  // per-head row-softmax weights
      Eigen::MatrixXd ln1_xhat, ln2_xhat;
      Eigen::VectorXd ln1_inv, ln2_inv;
    };
    std::vector<BlockCache> blocks;
    Eigen::MatrixXd lnf_xhat;
    Eigen::VectorXd lnf_inv;
  };

  /// Logits for every row. Pass a cache to enable backward().
  Eigen::MatrixXd forward(const Input& in, Cache* cache = nullptr) const;

  /// Accumulates parameter gradients for d(loss)/d(logits) and returns
  /// d(loss)/d(input rows); the caller keeps the conditioning-row slice.
  Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& dlogits);

  double grad_squared_norm() const;
  void scale_grads(double factor);
  void step(double lr, double momentum);
  void zero_grads();

  std::int64_t parameter_count() const;
  std::vector<detail::Tensor*> tensors();
  std::vector<const detail::Tensor*> tensors() const;

  int vocab() const { return vocab_; }
  int model_dim() const { return d_; }
  int max_seq() const { return max_seq_; }

private:
  struct Block {
    detail::Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  Eigen::MatrixXd embed_rows(const Input& in) const;
  void layer_norm(const Eigen::MatrixXd& x, const detail::Tensor& g, const detail::Tensor& b,
                  Eigen::MatrixXd& out, Eigen::MatrixXd& xhat, Eigen::VectorXd& inv_std) const;
  Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dout, const Eigen::MatrixXd& xhat,
                                      const Eigen::VectorXd& inv_std, detail::Tensor& g,
                                      detail::Tensor& b);

  int vocab_, d_, heads_, ffn_, max_seq_;
  detail::Tensor embed_, pos_;
  std::vector<Block> blocks_;
  detail::Tensor lnf_g_, lnf_b_, head_w_, head_b_;
};

/// Voxel-to-description encoder: two per-object MLPs, a prefix MLP feeding
/// conditioning rows to a small causal decoder, and slot-conditioned segment
/// decoding that assembles a structured description.
class EncoderModel {
public:
  static constexpr int kObjectSlots = 2;
  static constexpr int kBackgroundSlot = 2;
  /// Smallest per-segment budget that fits "name SEP desc SEP loc" plus the
  /// end-of-sequence step.
  static constexpr int kMinSegmentTokens = 6;

  EncoderModel(EncoderConfig cfg, Tokenizer tokenizer);

  struct Encoded {
    Eigen::VectorXd f1, f2;
    Eigen::MatrixXd prefix;  // prefix_tokens x model_dim; row i is slice
                             // [i*model_dim, (i+1)*model_dim) of the MLP output
  };

  const EncoderConfig& config() const { return cfg_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const TrainSchedule& schedule() const { return schedule_; }
  std::int64_t parameter_count() const;

  Encoded encode(const Eigen::VectorXd& x) const;

  /// Greedy slot-by-slot decoding. max_tokens bounds the steps spent on each
  /// segment, the end-of-sequence step included; budgets that cannot fit a
  /// minimal object segment raise a truncation error. Output that fails to
  /// parse falls back per field: locations become the argmax over the five
  /// location words (earlier slots' picks excluded), descriptions become the
  /// raw decoded text, so the result always parses.
  StructuredDescription decode_description(const Encoded& enc, int max_tokens = 48) const;

  /// Teacher-forced negative log-likelihood of d given x: both object
  /// segments conditioned on their codes, plus the background segment
  /// conditioned on the prefix alone (when enabled).
  TokenLoss token_loss(const Eigen::VectorXd& x, const StructuredDescription& d) const;

  /// token_loss plus gradient accumulation into every parameter tensor.
  TokenLoss token_loss_backward(const Eigen::VectorXd& x, const StructuredDescription& d);

  /// Unconditioned language-model loss over the serialized description; the
  /// stage-0 pretraining objective.
  TokenLoss lm_loss(const StructuredDescription& d) const;
  TokenLoss lm_loss_backward(const StructuredDescription& d);

  /// Greedy decode of one segment; slots 0 and 1 are objects, 2 is the
  /// background. Exposed so tests can audit the per-step distributions.
  SegmentDecode decode_segment(const Encoded& enc, int slot, int max_tokens) const;

  /// Teacher-forced logits, one row per target token; the values behind
  /// token_loss, exposed for independent re-computation.
  Eigen::MatrixXd teacher_logits(const Encoded& enc, int slot,
                                 const std::vector<int>& targets) const;

  /// Target ids for a segment of d: name SEP desc SEP loc EOS for object
  /// slots, background text plus EOS for the background slot.
  std::vector<int> segment_targets(const StructuredDescription& d, int slot) const;

  // Flat parameter access for finite-difference and determinism checks.
  Eigen::VectorXd flatten_params() const;
  void set_params(const Eigen::VectorXd& flat);
  Eigen::VectorXd flatten_grads() const;

private:
  enum class Stage { decoder_only, mlps_only, joint };

  CausalDecoder::Input segment_input(const Encoded& enc, int slot,
                                     const std::vector<int>& teacher) const;
  TokenLoss segments_pass(const Eigen::VectorXd& x, const StructuredDescription& d,
                          bool accumulate);
  TokenLoss lm_pass(const StructuredDescription& d, bool accumulate);
  void apply_step(Stage stage, double lr);
  void zero_all_grads();

  friend TrainReport train(EncoderModel&, const std::vector<TrainPair>&, const TrainSchedule&);
  friend void save_encoder(const EncoderModel&, const std::filesystem::path&);
  friend EncoderModel load_encoder(const std::filesystem::path&);

  EncoderConfig cfg_;
  Tokenizer tokenizer_;
  TrainSchedule schedule_;
  Mlp mlp1_, mlp2_, mlpg_;
  detail::Tensor proj_f_;    // feature_dim x model_dim
  detail::Tensor slot_emb_;  // kObjectSlots x model_dim
  CausalDecoder decoder_;
};

/// Stage 0 pretrains the decoder as a language model on the description
/// text, stage 1 trains the MLP stack at lr1 with the decoder frozen, stage
/// 2 fine-tunes everything at lr2. SGD with momentum 0.9 and a global
/// gradient-norm clip of 1.0 over the tensors being updated. Non-finite loss
/// raises a divergence error naming the stage and epoch.
TrainReport train(EncoderModel& model, const std::vector<TrainPair>& corpus,
                  const TrainSchedule& sched);

/// Single-file checkpoint: "PENC" magic, little-endian u32 header length, a
/// JSON header (config, vocabulary, schedule, tensor shape manifest), then
/// one PMAT block per tensor in manifest order. Loading validates every
/// shape against the manifest.
void save_encoder(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_encoder(const std::filesystem::path& path);

}  // namespace prism
