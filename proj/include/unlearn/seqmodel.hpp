#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "unlearn/corpus.hpp"

namespace unlearn {

using TokenId = std::int32_t;

struct SpecialTokens {
  TokenId pad = 0;
  TokenId bos = 1;
  TokenId eos = 2;
  TokenId sep = 3;
  TokenId unk = 4;
};

// Frozen word-level vocabulary. The first five entries are always
// <pad>, <bos>, <eos>, <sep>, <unk>.
class Vocabulary {
public:
  Vocabulary();
  // `words` are appended after the special tokens; duplicates are rejected.
  explicit Vocabulary(std::vector<std::string> words);

  // Lower-cased whitespace words of every question/answer plus `extra`
  // phrases, sorted.
  static Vocabulary from_corpus(const CorpusBundle &bundle,
                                std::span<const std::string> extra = {});

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string> &tokens() const { return tokens_; }
  const std::string &token(TokenId id) const;
  std::optional<TokenId> find(std::string_view word) const;
  const SpecialTokens &special() const { return special_; }

  friend bool operator==(const Vocabulary &a, const Vocabulary &b) {
    return a.tokens_ == b.tokens_;
  }

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  SpecialTokens special_;
};

enum class UnkPolicy { Strict, MapToUnk };

// Lower-case whitespace split.
std::vector<std::string> split_words(std::string_view text);

std::vector<TokenId> encode(const Vocabulary &vocab, std::string_view text,
                            UnkPolicy policy = UnkPolicy::Strict);
std::string decode(const Vocabulary &vocab, std::span<const TokenId> ids);

// prompt = BOS question SEP; answer = answer-words EOS.
struct TokenSeq {
  std::vector<TokenId> prompt;
  std::vector<TokenId> answer;

  std::size_t length() const { return prompt.size() + answer.size(); }
  // Answer without the trailing EOS.
  std::span<const TokenId> answer_words() const;
  friend bool operator==(const TokenSeq &, const TokenSeq &) = default;
};

TokenSeq tokenize(const Vocabulary &vocab, const QAPair &qa,
                  std::size_t max_seq_len, UnkPolicy policy = UnkPolicy::Strict);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 32;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

void validate(const ModelConfig &config);

// Named slice of the flat parameter vector, stored row-major.
struct TensorView {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Offsets of every tensor for a configuration. Per layer:
// ln1 (1xD), qkv (Dx3D), qkv_b, proj (DxD), proj_b, ln2, fc (Dx4D), fc_b,
// out (4DxD), out_b. Then lnf (1xD), head (DxV), head_b.
class ParamLayout {
public:
  explicit ParamLayout(const ModelConfig &config);

  std::size_t total() const { return total_; }
  const TensorView &at(std::string_view name) const;
  const std::vector<TensorView> &tensors() const { return tensors_; }

private:
  std::vector<TensorView> tensors_;
  std::size_t total_ = 0;
};

std::size_t parameter_count(const ModelConfig &config);

// Decoder-only transformer: learned token and position embeddings,
// pre-RMSNorm blocks of causal multi-head attention and a GELU MLP, untied
// output head. Parameters are held in double precision.
struct ModelState {
  ModelConfig config;
  Vocabulary vocab;
  std::vector<double> params;

  std::span<double> tensor(std::string_view name);
  std::span<const double> tensor(std::string_view name) const;

  friend bool operator==(const ModelState &, const ModelState &) = default;
};

// Random initialisation seeded by config.seed.
ModelState init_model(const ModelConfig &config, const Vocabulary &vocab);

// Deep copy used as the frozen reference model.
ModelState snapshot_reference(const ModelState &model);

// Sum over answer tokens of log p(y_t | x, y_<t). When `grad` is non-empty,
// adds weight * d(sum)/d(params) into it.
double answer_logprob(const ModelState &model, const TokenSeq &seq,
                      std::span<double> grad = {}, double weight = 1.0);

// -answer_logprob; gradient (when requested) is accumulated with `weight`.
double sequence_nll(const ModelState &model, const TokenSeq &seq,
                    std::span<double> grad = {}, double weight = 1.0);

struct AnswerTokenStats {
  std::vector<double> truth_prob; // p(y_t | x, y_<t)
  std::vector<TokenId> argmax;    // teacher-forced greedy prediction
};

AnswerTokenStats answer_token_stats(const ModelState &model, const TokenSeq &seq);

// (1/T) * sum_t p(y_t | x, y_<t), T = |answer| including EOS.
double conditional_probability(const ModelState &model, const TokenSeq &seq);

// Softmax distribution over the vocabulary at every position of `tokens`.
std::vector<std::vector<double>> next_token_distributions(
    const ModelState &model, std::span<const TokenId> tokens);

// Next-token logits after `context`.
std::vector<double> next_token_logits(const ModelState &model,
                                      std::span<const TokenId> context);

// Argmax decoding (lowest id wins ties) until EOS or max_new tokens. The EOS
// token is not included in the result.
std::vector<TokenId> greedy_generate(const ModelState &model,
                                     std::span<const TokenId> prompt,
                                     std::size_t max_new);

// Mean over positions of the final normalised hidden states.
std::vector<double> embed_sequence(const ModelState &model,
                                   std::span<const TokenId> tokens);

struct AdamSettings {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global-norm clipping; 0 disables.
  double max_grad_norm = 1.0;
};

class AdamOptimizer {
public:
  AdamOptimizer(std::size_t n_params, AdamSettings settings);

  // Applies one update. Returns the pre-clip gradient norm.
  double step(std::span<double> params, std::span<double> grad);
  std::size_t steps() const { return t_; }

private:
  AdamSettings settings_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

struct FinetuneSettings {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  AdamSettings adam;
  std::uint64_t seed = 0;
};

struct FinetuneProgress {
  std::size_t epoch = 0;
  double mean_nll = 0.0;
};

// Mini-batch Adam on the mean per-sequence NLL. The sample order is
// shuffled per epoch from settings.seed.
ModelState finetune(ModelState model, std::span<const TokenSeq> data,
                    const FinetuneSettings &settings,
                    const std::function<void(const FinetuneProgress &)> &on_epoch = {});

// Checkpoint container: "ULABCKPT", u32 version, u64 header length, JSON
// header (config + vocabulary + parameter count), raw little-endian doubles.
void write_checkpoint(const ModelState &model, std::ostream &out);
ModelState read_checkpoint(std::istream &in);
void save_checkpoint(const ModelState &model, const std::filesystem::path &path);
ModelState load_checkpoint(const std::filesystem::path &path);

} // namespace unlearn
