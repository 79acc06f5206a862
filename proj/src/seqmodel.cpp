#include "unlearn/seqmodel.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "transformer.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace {

const std::vector<std::string> kSpecialNames{"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};

// log-softmax of one row, returned together with the softmax.
void log_softmax(const detail::RowMat &logits, Eigen::Index row,
                 Eigen::RowVectorXd &logp, Eigen::RowVectorXd &prob) {
  const double mx = logits.row(row).maxCoeff();
  const auto exp = [](double v) { return std::exp(v); };
  const double lse = mx + std::log((logits.row(row).array() - mx).unaryExpr(exp).sum());
  logp = logits.row(row).array() - lse;
  prob = logp.unaryExpr(exp);
}

void check_sequence(const ModelState &model, const TokenSeq &seq) {
  if (seq.answer.empty()) {
    throw ArgumentError("token sequence has an empty answer");
  }
  if (seq.prompt.empty()) {
    throw ArgumentError("token sequence has an empty prompt");
  }
  if (seq.length() > model.config.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(seq.length()) +
                      " tokens exceeds max_seq_len " +
                      std::to_string(model.config.max_seq_len));
  }
}

// prompt followed by every answer token except the last.
std::vector<TokenId> model_input(const TokenSeq &seq) {
  std::vector<TokenId> input(seq.prompt);
  input.insert(input.end(), seq.answer.begin(), seq.answer.end() - 1);
  return input;
}

} // namespace

// ---------------------------------------------------------------------------
// Vocabulary and tokenisation

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> words) {
  tokens_ = kSpecialNames;
  tokens_.insert(tokens_.end(), std::make_move_iterator(words.begin()),
                 std::make_move_iterator(words.end()));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw ArgumentError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::from_corpus(const CorpusBundle &bundle,
                                   std::span<const std::string> extra) {
  std::set<std::string> words;
  auto add = [&](std::string_view text) {
    for (auto &w : split_words(text)) {
      words.insert(std::move(w));
    }
  };
  for (const auto *split : {&bundle.forget, &bundle.retain, &bundle.test}) {
    for (const auto &qa : *split) {
      add(qa.question);
      add(qa.answer);
    }
  }
  for (const auto &phrase : extra) {
    add(phrase);
  }
  for (const auto &special : kSpecialNames) {
    words.erase(special);
  }
  return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

const std::string &Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ArgumentError("token id " + std::to_string(id) + " outside the vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  if (it == index_.end()) {
    return std::nullopt;
  }
  return it->second;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) {
    out.push_back(std::move(cur));
  }
  return out;
}

std::vector<TokenId> encode(const Vocabulary &vocab, std::string_view text,
                            UnkPolicy policy) {
  std::vector<TokenId> ids;
  for (const auto &w : split_words(text)) {
    if (auto id = vocab.find(w)) {
      ids.push_back(*id);
    } else if (policy == UnkPolicy::MapToUnk) {
      ids.push_back(vocab.special().unk);
    } else {
      throw TokenizationError("word '" + w + "' is not in the vocabulary");
    }
  }
  return ids;
}

std::string decode(const Vocabulary &vocab, std::span<const TokenId> ids) {
  std::string out;
  for (auto id : ids) {
    if (!out.empty()) {
      out += ' ';
    }
    out += vocab.token(id);
  }
  return out;
}

std::span<const TokenId> TokenSeq::answer_words() const {
  std::span<const TokenId> all(answer);
  return all.empty() ? all : all.first(all.size() - 1);
}

TokenSeq tokenize(const Vocabulary &vocab, const QAPair &qa,
                  std::size_t max_seq_len, UnkPolicy policy) {
  const auto &sp = vocab.special();
  TokenSeq seq;
  seq.prompt.push_back(sp.bos);
  for (auto id : encode(vocab, qa.question, policy)) {
    seq.prompt.push_back(id);
  }
  seq.prompt.push_back(sp.sep);
  seq.answer = encode(vocab, qa.answer, policy);
  if (seq.answer.empty() && !split_words(qa.answer).empty()) {
    throw TokenizationError("answer of '" + qa.id + "' has no known words");
  }
  seq.answer.push_back(sp.eos);
  if (seq.length() > max_seq_len) {
    throw LengthError("pair '" + qa.id + "' needs " + std::to_string(seq.length()) +
                      " tokens, max_seq_len is " + std::to_string(max_seq_len));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Parameters

void validate(const ModelConfig &config) {
  if (config.vocab_size == 0 || config.d_model == 0 || config.n_layers == 0 ||
      config.n_heads == 0 || config.max_seq_len == 0) {
    throw ArgumentError("model config sizes must be positive");
  }
  if (config.d_model % config.n_heads != 0) {
    throw ArgumentError("d_model must be divisible by n_heads");
  }
}

ParamLayout::ParamLayout(const ModelConfig &config) {
  validate(config);
  const auto d = config.d_model;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    tensors_.push_back({std::move(name), total_, rows, cols});
    total_ += rows * cols;
  };
  add("wte", config.vocab_size, d);
  add("wpe", config.max_seq_len, d);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto p = "h" + std::to_string(l) + ".";
    add(p + "ln1", 1, d);
    add(p + "qkv", d, 3 * d);
    add(p + "qkv_b", 1, 3 * d);
    add(p + "proj", d, d);
    add(p + "proj_b", 1, d);
    add(p + "ln2", 1, d);
    add(p + "fc", d, 4 * d);
    add(p + "fc_b", 1, 4 * d);
    add(p + "out", 4 * d, d);
    add(p + "out_b", 1, d);
  }
  add("lnf", 1, d);
  add("head", d, config.vocab_size);
  add("head_b", 1, config.vocab_size);
}

const TensorView &ParamLayout::at(std::string_view name) const {
  for (const auto &t : tensors_) {
    if (t.name == name) {
      return t;
    }
  }
  throw ArgumentError("no parameter tensor named '" + std::string(name) + "'");
}

std::size_t parameter_count(const ModelConfig &config) {
  return ParamLayout(config).total();
}

std::span<double> ModelState::tensor(std::string_view name) {
  const auto t = ParamLayout(config).at(name);
  return std::span<double>(params).subspan(t.offset, t.size());
}

std::span<const double> ModelState::tensor(std::string_view name) const {
  const auto t = ParamLayout(config).at(name);
  return std::span<const double>(params).subspan(t.offset, t.size());
}

ModelState init_model(const ModelConfig &config, const Vocabulary &vocab) {
  if (config.vocab_size != vocab.size()) {
    throw ArgumentError("config.vocab_size does not match the vocabulary");
  }
  const ParamLayout layout(config);
  ModelState model{config, vocab, std::vector<double>(layout.total(), 0.0)};
  SplitMix64 rng(splitmix64_mix(config.seed));
  for (const auto &t : layout.tensors()) {
    auto span = std::span<double>(model.params).subspan(t.offset, t.size());
    const bool gain = t.name == "lnf" || t.name.ends_with("ln1") || t.name.ends_with("ln2");
    const bool bias = t.name.ends_with("_b");
    if (gain) {
      std::fill(span.begin(), span.end(), 1.0);
    } else if (!bias) {
      const double std = t.name == "wte" || t.name == "wpe"
                             ? 0.1
                             : 1.0 / std::sqrt(static_cast<double>(t.rows));
      for (auto &v : span) {
        v = std * rng.normal();
      }
    }
  }
  return model;
}

ModelState snapshot_reference(const ModelState &model) { return model; }

// ---------------------------------------------------------------------------
// Scoring

detail::LogProbTape::LogProbTape(const ModelState &model, const TokenSeq &seq)
    : net_(model) {
  check_sequence(model, seq);
  const auto &logits = net_.forward(model_input(seq));
  dlogits_.setZero(logits.rows(), logits.cols());
  Eigen::RowVectorXd logp, prob;
  for (std::size_t j = 0; j < seq.answer.size(); ++j) {
    const auto row = static_cast<Eigen::Index>(seq.prompt.size() - 1 + j);
    const auto target = seq.answer[j];
    if (target < 0 || target >= logits.cols()) {
      throw ArgumentError("answer token outside the vocabulary");
    }
    log_softmax(logits, row, logp, prob);
    logprob_ += logp[target];
    dlogits_.row(row) = -prob;
    dlogits_(row, target) += 1.0;
  }
}

void detail::LogProbTape::backward(double weight, std::span<double> grad) const {
  if (weight == 0.0) {
    return;
  }
  net_.backward(dlogits_ * weight, grad);
}

double answer_logprob(const ModelState &model, const TokenSeq &seq,
                      std::span<double> grad, double weight) {
  const detail::LogProbTape tape(model, seq);
  if (!grad.empty()) {
    tape.backward(weight, grad);
  }
  return tape.logprob();
}

double sequence_nll(const ModelState &model, const TokenSeq &seq,
                    std::span<double> grad, double weight) {
  return -answer_logprob(model, seq, grad, -weight);
}

AnswerTokenStats answer_token_stats(const ModelState &model, const TokenSeq &seq) {
  check_sequence(model, seq);
  detail::Transformer net(model);
  const auto &logits = net.forward(model_input(seq));
  AnswerTokenStats stats;
  Eigen::RowVectorXd logp, prob;
  for (std::size_t j = 0; j < seq.answer.size(); ++j) {
    const auto row = static_cast<Eigen::Index>(seq.prompt.size() - 1 + j);
    log_softmax(logits, row, logp, prob);
    stats.truth_prob.push_back(prob[seq.answer[j]]);
    Eigen::Index best = 0;
    logits.row(row).maxCoeff(&best);
    stats.argmax.push_back(static_cast<TokenId>(best));
  }
  return stats;
}

double conditional_probability(const ModelState &model, const TokenSeq &seq) {
  const auto stats = answer_token_stats(model, seq);
  const double sum = std::accumulate(stats.truth_prob.begin(), stats.truth_prob.end(), 0.0);
  return std::clamp(sum / static_cast<double>(stats.truth_prob.size()), 0.0, 1.0);
}

std::vector<std::vector<double>> next_token_distributions(const ModelState &model,
                                                          std::span<const TokenId> tokens) {
  detail::Transformer net(model);
  const auto &logits = net.forward(tokens);
  std::vector<std::vector<double>> out;
  Eigen::RowVectorXd logp, prob;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    log_softmax(logits, i, logp, prob);
    out.emplace_back(prob.data(), prob.data() + prob.size());
  }
  return out;
}

std::vector<double> next_token_logits(const ModelState &model,
                                      std::span<const TokenId> context) {
  detail::Transformer net(model);
  const auto &logits = net.forward(context);
  const auto last = logits.row(logits.rows() - 1);
  return std::vector<double>(last.data(), last.data() + last.size());
}

std::vector<TokenId> greedy_generate(const ModelState &model,
                                     std::span<const TokenId> prompt,
                                     std::size_t max_new) {
  if (prompt.empty()) {
    throw ArgumentError("generation needs a non-empty prompt");
  }
  const auto eos = model.vocab.special().eos;
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  detail::Transformer net(model);
  while (out.size() < max_new && context.size() < model.config.max_seq_len) {
    const auto &logits = net.forward(context);
    const auto last = logits.row(logits.rows() - 1);
    // Strict comparison keeps the lowest id on ties.
    Eigen::Index best = 0;
    for (Eigen::Index v = 1; v < last.size(); ++v) {
      if (last[v] > last[best]) {
        best = v;
      }
    }
    const auto tok = static_cast<TokenId>(best);
    if (tok == eos) {
      break;
    }
    out.push_back(tok);
    context.push_back(tok);
  }
  return out;
}

std::vector<double> embed_sequence(const ModelState &model,
                                   std::span<const TokenId> tokens) {
  if (tokens.empty()) {
    throw ArgumentError("cannot embed an empty token list");
  }
  detail::Transformer net(model);
  net.forward(tokens);
  const Eigen::RowVectorXd mean = net.final_hidden().colwise().mean();
  return std::vector<double>(mean.data(), mean.data() + mean.size());
}

// ---------------------------------------------------------------------------
// Optimisation

AdamOptimizer::AdamOptimizer(std::size_t n_params, AdamSettings settings)
    : settings_(settings), m_(n_params, 0.0), v_(n_params, 0.0) {
  if (!(settings.learning_rate > 0.0)) {
    throw ArgumentError("learning rate must be positive");
  }
}

double AdamOptimizer::step(std::span<double> params, std::span<double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw ArgumentError("optimizer state does not match the parameter count");
  }
  double sq = 0.0;
  for (double g : grad) {
    sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = settings_.max_grad_norm > 0.0 && norm > settings_.max_grad_norm
                          ? settings_.max_grad_norm / norm
                          : 1.0;
  ++t_;
  const double b1 = settings_.beta1;
  const double b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i] * clip;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
    params[i] -= settings_.learning_rate * (m_[i] / c1) /
                 (std::sqrt(v_[i] / c2) + settings_.epsilon);
  }
  return norm;
}

ModelState finetune(ModelState model, std::span<const TokenSeq> data,
                    const FinetuneSettings &settings,
                    const std::function<void(const FinetuneProgress &)> &on_epoch) {
  if (data.empty()) {
    throw ArgumentError("fine-tuning needs at least one sequence");
  }
  if (settings.batch_size == 0) {
    throw ArgumentError("batch_size must be at least 1");
  }
  AdamOptimizer opt(model.params.size(), settings.adam);
  std::vector<double> grad(model.params.size());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
    auto rng = SplitMix64::keyed(settings.seed, "finetune/epoch-" + std::to_string(epoch));
    rng.shuffle(order.begin(), order.end());
    double epoch_nll = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += settings.batch_size, ++batch_index) {
      const auto end = std::min(order.size(), begin + settings.batch_size);
      const double weight = 1.0 / static_cast<double>(end - begin);
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_nll = 0.0;
      for (std::size_t k = begin; k < end; ++k) {
        batch_nll += sequence_nll(model, data[order[k]], grad, weight);
      }
      if (!std::isfinite(batch_nll)) {
        throw TrainingError(epoch, batch_index, "non-finite fine-tuning loss");
      }
      opt.step(model.params, grad);
      epoch_nll += batch_nll;
    }
    if (on_epoch) {
      on_epoch({epoch, epoch_nll / static_cast<double>(data.size())});
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'U', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T> void put_le(std::ostream &out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

template <class T> T get_le(std::istream &in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) {
      throw IoError("truncated checkpoint");
    }
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

} // namespace

void write_checkpoint(const ModelState &model, std::ostream &out) {
  nlohmann::ordered_json header;
  const auto &c = model.config;
  header["config"] = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                      {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                      {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
  header["vocabulary"] = model.vocab.tokens();
  header["n_params"] = model.params.size();
  const std::string text = header.dump();
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : model.params) {
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
}

ModelState read_checkpoint(std::istream &in) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a checkpoint file");
  }
  if (get_le<std::uint32_t>(in) != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version");
  }
  const auto len = get_le<std::uint64_t>(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw IoError("truncated checkpoint header");
  }
  const auto header = nlohmann::json::parse(text);
  ModelConfig c;
  const auto &jc = header.at("config");
  c.vocab_size = jc.at("vocab_size");
  c.d_model = jc.at("d_model");
  c.n_layers = jc.at("n_layers");
  c.n_heads = jc.at("n_heads");
  c.max_seq_len = jc.at("max_seq_len");
  c.seed = jc.at("seed");
  auto tokens = header.at("vocabulary").get<std::vector<std::string>>();
  if (tokens.size() < kSpecialNames.size() ||
      !std::equal(kSpecialNames.begin(), kSpecialNames.end(), tokens.begin())) {
    throw IoError("checkpoint vocabulary lacks the special tokens");
  }
  tokens.erase(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(kSpecialNames.size()));
  ModelState model{c, Vocabulary(std::move(tokens)), {}};
  const std::size_t n = header.at("n_params");
  if (n != parameter_count(c) || model.vocab.size() != c.vocab_size) {
    throw IoError("checkpoint header is inconsistent");
  }
  model.params.resize(n);
  for (auto &v : model.params) {
    v = std::bit_cast<double>(get_le<std::uint64_t>(in));
  }
  return model;
}

void save_checkpoint(const ModelState &model, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write checkpoint '" + path.string() + "'");
  }
  write_checkpoint(model, out);
  if (!out) {
    throw IoError("write failed for '" + path.string() + "'");
  }
}

ModelState load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open checkpoint '" + path.string() + "'");
  }
  return read_checkpoint(in);
}

} // namespace unlearn
