#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "unlearn/seqmodel.hpp"

namespace unlearn::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// Forward/backward passes over one token sequence. Holds the activations of
// the last forward() call so backward() can run without recomputation.
class Transformer {
public:
  explicit Transformer(const ModelState &model);

  // Logits for every position (L x V).
  const RowMat &forward(std::span<const TokenId> tokens);

  // Accumulates d(loss)/d(params) into `grad`, given d(loss)/d(logits) for
  // the most recent forward().
  void backward(const RowMat &dlogits, std::span<double> grad) const;

  // Final RMS-normalised hidden states (L x D) of the last forward().
  const RowMat &final_hidden() const { return nf_; }

private:
  struct LayerOffsets {
    std::size_t ln1, qkv, qkv_b, proj, proj_b, ln2, fc, fc_b, out, out_b;
  };
  struct LayerCache {
    RowMat x_in, n1, qkv, att, o, x_mid, n2, u, h;
    Vec r1, r2;
  };

  const ModelState &model_;
  std::size_t d_, heads_, head_dim_, ff_, vocab_;
  std::size_t wte_, wpe_, lnf_, head_, head_b_;
  std::vector<LayerOffsets> layers_;

  std::vector<TokenId> tokens_;
  std::vector<LayerCache> cache_;
  RowMat x_out_, nf_, logits_;
  Vec rf_;
};

// Answer log-probability of one sequence with its activations retained, so
// the gradient can be applied later with a weight known only after several
// sequences have been scored.
class LogProbTape {
public:
  LogProbTape(const ModelState &model, const TokenSeq &seq);

  double logprob() const { return logprob_; }
  // grad += weight * d(logprob)/d(params)
  void backward(double weight, std::span<double> grad) const;

private:
  Transformer net_;
  RowMat dlogits_;
  double logprob_ = 0.0;
};

} // namespace unlearn::detail
