#include "transformer.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "unlearn/errors.hpp"

namespace unlearn::detail {

namespace {

using ConstMap = Eigen::Map<const RowMat>;
using GradMap = Eigen::Map<RowMat>;
using ConstRow = Eigen::Map<const Eigen::RowVectorXd>;
using GradRow = Eigen::Map<Eigen::RowVectorXd>;

constexpr double kRmsEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

void rms_forward(const RowMat &x, const ConstRow &gain, RowMat &y, Vec &r) {
  const auto rows = x.rows();
  const double dim = static_cast<double>(x.cols());
  y.resize(rows, x.cols());
  r.resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    r[i] = 1.0 / std::sqrt(x.row(i).squaredNorm() / dim + kRmsEps);
    y.row(i) = x.row(i).cwiseProduct(gain) * r[i];
  }
}

// Returns dx and accumulates the gain gradient.
RowMat rms_backward(const RowMat &x, const ConstRow &gain, const Vec &r,
                    const RowMat &dy, GradRow &dgain) {
  const double dim = static_cast<double>(x.cols());
  RowMat dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::RowVectorXd u = dy.row(i).cwiseProduct(gain);
    const double s = u.dot(x.row(i));
    dx.row(i) = r[i] * u - (r[i] * r[i] * r[i] / dim) * s * x.row(i);
    dgain += dy.row(i).cwiseProduct(x.row(i)) * r[i];
  }
  return dx;
}

double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
}

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) +
         0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

} // namespace

Transformer::Transformer(const ModelState &model) : model_(model) {
  const auto &cfg = model.config;
  d_ = cfg.d_model;
  heads_ = cfg.n_heads;
  head_dim_ = d_ / heads_;
  ff_ = 4 * d_;
  vocab_ = cfg.vocab_size;
  const ParamLayout layout(cfg);
  if (model.params.size() != layout.total()) {
    throw ArgumentError("parameter vector does not match the model config");
  }
  wte_ = layout.at("wte").offset;
  wpe_ = layout.at("wpe").offset;
  lnf_ = layout.at("lnf").offset;
  head_ = layout.at("head").offset;
  head_b_ = layout.at("head_b").offset;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto p = "h" + std::to_string(l) + ".";
    layers_.push_back({layout.at(p + "ln1").offset, layout.at(p + "qkv").offset,
                       layout.at(p + "qkv_b").offset, layout.at(p + "proj").offset,
                       layout.at(p + "proj_b").offset, layout.at(p + "ln2").offset,
                       layout.at(p + "fc").offset, layout.at(p + "fc_b").offset,
                       layout.at(p + "out").offset, layout.at(p + "out_b").offset});
  }
}

const RowMat &Transformer::forward(std::span<const TokenId> tokens) {
  const auto len = tokens.size();
  if (len == 0) {
    throw ArgumentError("forward pass over an empty sequence");
  }
  if (len > model_.config.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(len) +
                      " tokens exceeds max_seq_len " +
                      std::to_string(model_.config.max_seq_len));
  }
  const double *p = model_.params.data();
  const auto L = static_cast<Eigen::Index>(len);
  const auto D = static_cast<Eigen::Index>(d_);
  const auto hd = static_cast<Eigen::Index>(head_dim_);
  const auto F = static_cast<Eigen::Index>(ff_);
  const auto V = static_cast<Eigen::Index>(vocab_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));

  tokens_.assign(tokens.begin(), tokens.end());
  ConstMap wte(p + wte_, V, D);
  ConstMap wpe(p + wpe_, static_cast<Eigen::Index>(model_.config.max_seq_len), D);
  RowMat x(L, D);
  for (Eigen::Index i = 0; i < L; ++i) {
    const auto tok = tokens[static_cast<std::size_t>(i)];
    if (tok < 0 || tok >= V) {
      throw ArgumentError("token id " + std::to_string(tok) + " outside the vocabulary");
    }
    x.row(i) = wte.row(tok) + wpe.row(i);
  }

  cache_.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto &off = layers_[l];
    auto &c = cache_[l];
    c.x_in = x;
    rms_forward(x, ConstRow(p + off.ln1, D), c.n1, c.r1);
    c.qkv.noalias() = c.n1 * ConstMap(p + off.qkv, D, 3 * D);
    c.qkv.rowwise() += ConstRow(p + off.qkv_b, 3 * D);

    c.att.setZero(static_cast<Eigen::Index>(heads_) * L, L);
    c.o.resize(L, D);
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(heads_); ++h) {
      const auto q = c.qkv.middleCols(h * hd, hd);
      const auto k = c.qkv.middleCols(D + h * hd, hd);
      const auto v = c.qkv.middleCols(2 * D + h * hd, hd);
      RowMat scores = (q * k.transpose()) * scale;
      auto probs = c.att.middleRows(h * L, L);
      for (Eigen::Index i = 0; i < L; ++i) {
        const double mx = scores.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double e = std::exp(scores(i, j) - mx);
          probs(i, j) = e;
          sum += e;
        }
        probs.row(i).head(i + 1) /= sum;
      }
      c.o.middleCols(h * hd, hd).noalias() = probs * v;
    }
    x.noalias() += c.o * ConstMap(p + off.proj, D, D);
    x.rowwise() += ConstRow(p + off.proj_b, D);
    c.x_mid = x;

    rms_forward(x, ConstRow(p + off.ln2, D), c.n2, c.r2);
    c.u.noalias() = c.n2 * ConstMap(p + off.fc, D, F);
    c.u.rowwise() += ConstRow(p + off.fc_b, F);
    c.h = c.u.unaryExpr(&gelu);
    x.noalias() += c.h * ConstMap(p + off.out, F, D);
    x.rowwise() += ConstRow(p + off.out_b, D);
  }

  x_out_ = std::move(x);
  rms_forward(x_out_, ConstRow(p + lnf_, D), nf_, rf_);
  logits_.noalias() = nf_ * ConstMap(p + head_, D, V);
  logits_.rowwise() += ConstRow(p + head_b_, V);
  return logits_;
}

void Transformer::backward(const RowMat &dlogits, std::span<double> grad) const {
  if (grad.size() != model_.params.size()) {
    throw ArgumentError("gradient buffer does not match the parameter count");
  }
  const double *p = model_.params.data();
  double *g = grad.data();
  const auto L = static_cast<Eigen::Index>(tokens_.size());
  const auto D = static_cast<Eigen::Index>(d_);
  const auto hd = static_cast<Eigen::Index>(head_dim_);
  const auto F = static_cast<Eigen::Index>(ff_);
  const auto V = static_cast<Eigen::Index>(vocab_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));

  GradMap(g + head_, D, V).noalias() += nf_.transpose() * dlogits;
  GradRow(g + head_b_, V) += dlogits.colwise().sum();
  const RowMat dnf = dlogits * ConstMap(p + head_, D, V).transpose();
  GradRow dlnf(g + lnf_, D);
  RowMat dx = rms_backward(x_out_, ConstRow(p + lnf_, D), rf_, dnf, dlnf);

  for (std::size_t l = layers_.size(); l-- > 0;) {
    const auto &off = layers_[l];
    const auto &c = cache_[l];

    // MLP branch: x = x_mid + gelu(n2 W_fc + b_fc) W_out + b_out
    GradMap(g + off.out, F, D).noalias() += c.h.transpose() * dx;
    GradRow(g + off.out_b, D) += dx.colwise().sum();
    RowMat du = dx * ConstMap(p + off.out, F, D).transpose();
    du.array() *= c.u.unaryExpr(&gelu_grad).array();
    GradMap(g + off.fc, D, F).noalias() += c.n2.transpose() * du;
    GradRow(g + off.fc_b, F) += du.colwise().sum();
    const RowMat dn2 = du * ConstMap(p + off.fc, D, F).transpose();
    GradRow dln2(g + off.ln2, D);
    dx += rms_backward(c.x_mid, ConstRow(p + off.ln2, D), c.r2, dn2, dln2);

    // Attention branch: x_mid = x_in + attn(n1) W_proj + b_proj
    GradMap(g + off.proj, D, D).noalias() += c.o.transpose() * dx;
    GradRow(g + off.proj_b, D) += dx.colwise().sum();
    const RowMat d_o = dx * ConstMap(p + off.proj, D, D).transpose();
    RowMat dqkv = RowMat::Zero(L, 3 * D);
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(heads_); ++h) {
      const auto q = c.qkv.middleCols(h * hd, hd);
      const auto k = c.qkv.middleCols(D + h * hd, hd);
      const auto v = c.qkv.middleCols(2 * D + h * hd, hd);
      const auto probs = c.att.middleRows(h * L, L);
      const auto d_oh = d_o.middleCols(h * hd, hd);
      const RowMat dprobs = d_oh * v.transpose();
      dqkv.middleCols(2 * D + h * hd, hd).noalias() += probs.transpose() * d_oh;
      RowMat dscores = probs.cwiseProduct(dprobs);
      const Vec row_dot = dscores.rowwise().sum();
      dscores -= probs.cwiseProduct(row_dot.replicate(1, L));
      dscores *= scale;
      dqkv.middleCols(h * hd, hd).noalias() += dscores * k;
      dqkv.middleCols(D + h * hd, hd).noalias() += dscores.transpose() * q;
    }
    GradMap(g + off.qkv, D, 3 * D).noalias() += c.n1.transpose() * dqkv;
    GradRow(g + off.qkv_b, 3 * D) += dqkv.colwise().sum();
    const RowMat dn1 = dqkv * ConstMap(p + off.qkv, D, 3 * D).transpose();
    GradRow dln1(g + off.ln1, D);
    dx += rms_backward(c.x_in, ConstRow(p + off.ln1, D), c.r1, dn1, dln1);
  }

  GradMap dwte(g + wte_, V, D);
  GradMap dwpe(g + wpe_, static_cast<Eigen::Index>(model_.config.max_seq_len), D);
  for (Eigen::Index i = 0; i < L; ++i) {
    dwte.row(tokens_[static_cast<std::size_t>(i)]) += dx.row(i);
    dwpe.row(i) += dx.row(i);
  }
}

} // namespace unlearn::detail
