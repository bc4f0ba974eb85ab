#include "ovseg/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ovseg/error.hpp"

namespace ovseg {

using ag::Index;

void LossConfig::validate() const {
  if (joint_dim < 1) throw UsageError("joint dim must be positive");
  if (!(init_temperature > 0)) throw UsageError("temperature must be positive");
  if (!(max_logit_scale > 0)) throw UsageError("max logit scale must be positive");
  if (!(lambda >= 0)) throw UsageError("lambda must be non-negative");
  if (!(selection_ratio > 0 && selection_ratio <= 1)) throw UsageError("selection ratio must be in (0, 1]");
  if (!(mask_threshold >= 0 && mask_threshold < 1)) throw UsageError("mask threshold must be in [0, 1)");
  if (!(ema_coef >= 0 && ema_coef < 1)) throw UsageError("ema coefficient must be in [0, 1)");
  if (decoder_heads < 1) throw UsageError("decoder heads must be positive");
}

int selected_count(int num_groups, double ratio) {
  if (num_groups < 1) throw UsageError("need at least one group");
  const int k = static_cast<int>(std::lround(ratio * num_groups));
  return std::clamp(k, 1, num_groups);
}

int lambda_start(const LossConfig& cfg, int total_epochs) {
  if (cfg.lambda_start_epoch >= 0) return cfg.lambda_start_epoch;
  return static_cast<int>(std::lround(0.75 * total_epochs));
}

double lambda_at_epoch(const LossConfig& cfg, int epoch, int total_epochs) {
  return epoch >= lambda_start(cfg, total_epochs) ? cfg.lambda : 0.0;
}

CrossAttention::CrossAttention(nn::ParamStore& store, const std::string& name, int dim, int heads,
                               nn::Initializer& init)
    : heads_(heads), q_(store, name + ".q", dim, dim, init), out_(store, name + ".out", dim, dim, init) {
  if (heads < 1 || dim % heads != 0) throw UsageError("embed dim must be divisible by heads");
  scale_ = 1.0 / std::sqrt(static_cast<double>(dim / heads));
}

Var CrossAttention::operator()(const Var& x, const Var& keys, const Var& values,
                               std::vector<Matrix>* weights) const {
  ag::AttentionOptions opts{heads_, -1, scale_};
  return out_(ag::attention(q_(x), keys, values, opts, weights));
}

CompletionDecoder::CompletionDecoder(nn::ParamStore& store, const std::string& name, int dim, int heads,
                                     double mlp_ratio, nn::Initializer& init)
    : query_(store, name + ".query", dim, dim, init, false),
      key_(store, name + ".key", dim, dim, init, false),
      value_(store, name + ".value", dim, dim, init, false),
      ln_self_(store, name + ".ln_self", dim),
      ln_cross_(store, name + ".ln_cross", dim),
      ln_ffn_(store, name + ".ln_ffn", dim),
      ln_out_(store, name + ".ln_out", dim),
      self_attn_(store, name + ".self_attn", dim, heads, init),
      cross_attn_(store, name + ".cross_attn", dim, heads, init),
      ffn_(store, name + ".ffn", dim, nn::hidden_width(dim, mlp_ratio), init) {}

Var CompletionDecoder::operator()(const Var& caption, const Var& groups, ag::Index key_len,
                                  std::vector<Matrix>* cross_weights) const {
  if (caption.cols() != groups.cols()) throw UsageError("decoder: caption and group widths differ");
  Var keys = key_(groups);
  Var values = value_(groups);
  Var x = query_(caption);
  x = ag::add(x, self_attn_.self_attend(ln_self_(x), key_len));
  x = ag::add(x, cross_attn_(ln_cross_(x), keys, values, cross_weights));
  x = ag::add(x, ffn_(ln_ffn_(x)));
  return ln_out_(x);
}

JointHeads::JointHeads(int embed_dim, const LossConfig& cfg, nn::ParamStore& store, nn::Initializer& init,
                       const std::string& prefix)
    : visual_proj_(store, prefix + ".visual_proj", embed_dim, cfg.joint_dim, init),
      text_proj_(store, prefix + ".text_proj", embed_dim, cfg.joint_dim, init),
      decoder_(store, prefix + ".decoder", embed_dim, cfg.decoder_heads, cfg.decoder_mlp_ratio, init) {
  cfg.validate();
  Matrix s(1, 1);
  s(0, 0) = std::log(1.0 / cfg.init_temperature);
  logit_scale_ = store.add(prefix + ".logit_scale", s, false);
}

Var JointHeads::project_visual(const Var& groups) const {
  if (groups.rows() < 1) throw UsageError("no group tokens to project");
  return ag::l2_normalize_rows(visual_proj_(ag::mean_rows(groups)));
}

Var JointHeads::project_groups(const Var& groups) const {
  return ag::l2_normalize_rows(visual_proj_(groups));
}

Var JointHeads::project_text(const Var& eot_vector) const {
  return ag::l2_normalize_rows(text_proj_(eot_vector));
}

Var JointHeads::complete_masked(const Var& masked_caption, const Var& groups, ag::Index key_len) const {
  return decoder_(masked_caption, groups, key_len);
}

double JointHeads::temperature() const { return std::exp(-logit_scale_.value()(0, 0)); }

void JointHeads::clamp_logit_scale(double max_scale) {
  double& s = logit_scale_.mutable_value()(0, 0);
  s = std::min(s, std::log(max_scale));
}

namespace {

void check_pair(const Var& a, const Var& b) {
  if (a.rows() < 1 || a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError("contrastive pair shapes differ");
  }
}

Var symmetric_cross_entropy(const Var& logits) {
  return ag::scale(ag::add(ag::cross_entropy_diagonal(logits),
                           ag::cross_entropy_diagonal(ag::transpose(logits))),
                   0.5);
}

}  // namespace

Var contrastive_loss(const Var& a, const Var& b, const Var& log_scale) {
  check_pair(a, b);
  return symmetric_cross_entropy(ag::mul_scalar(ag::matmul_nt(a, b), ag::exp(log_scale)));
}

Var contrastive_loss(const Var& a, const Var& b, double temperature) {
  if (!(temperature > 0)) throw UsageError("temperature must be positive");
  check_pair(a, b);
  return symmetric_cross_entropy(ag::scale(ag::matmul_nt(a, b), 1.0 / temperature));
}

Var entity_completion_loss(const Var& completed, const Var& entity, const Var& log_scale) {
  return contrastive_loss(completed, entity, log_scale);
}

std::vector<int> top_k_indices(std::span<const double> scores, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return scores[x] > scores[y]; });
  order.resize(static_cast<size_t>(std::clamp<int>(k, 0, static_cast<int>(order.size()))));
  return order;
}

SubgroupSelection select_subgroups(const Matrix& group_embeddings, const Matrix& entity, double ratio) {
  if (entity.rows() != 1 || entity.cols() != group_embeddings.cols()) {
    throw UsageError("entity embedding width does not match groups");
  }
  const int k = selected_count(static_cast<int>(group_embeddings.rows()), ratio);
  Eigen::VectorXd sim = group_embeddings * entity.transpose();
  std::vector<double> scores(sim.data(), sim.data() + sim.size());
  SubgroupSelection sel;
  sel.indices = top_k_indices(scores, k);
  for (int i : sel.indices) sel.similarity.push_back(scores[static_cast<size_t>(i)]);
  return sel;
}

Var ground_masks(const Var& image_tokens, const Var& subgroups) {
  if (image_tokens.cols() != subgroups.cols()) throw UsageError("ground_masks: width mismatch");
  return ag::sigmoid(ag::matmul_nt(image_tokens, subgroups));
}

namespace {

// Rectangular n x m (n <= m) assignment with row/column potentials.
// Returns the column of each row.
std::vector<int> hungarian_core(const Matrix& a) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(a.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assign(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] != 0) assign[p[j] - 1] = j - 1;
  }
  return assign;
}

double assignment_cost(const Matrix& cost, const std::vector<int>& assign) {
  double total = 0.0;
  for (size_t i = 0; i < assign.size(); ++i) total += cost(static_cast<Index>(i), assign[i]);
  return total;
}

}  // namespace

std::vector<int> solve_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  if (n != cost.cols()) throw UsageError("assignment cost matrix must be square");
  if (n == 0) return {};
  if (!cost.allFinite()) throw NumericError("non-finite assignment cost");
  const std::vector<int> best = hungarian_core(cost);
  const double optimum = assignment_cost(cost, best);
  const double tol = 1e-12 * std::max(1.0, std::abs(optimum));

  // Fix rows in order to the smallest column that still admits an optimum.
  std::vector<int> result(n, -1);
  std::vector<char> col_used(n, 0);
  double fixed = 0.0;
  for (int i = 0; i < n; ++i) {
    const int rest = n - i - 1;
    for (int c = 0; c < n; ++c) {
      if (col_used[c]) continue;
      double tail = 0.0;
      if (rest > 0) {
        std::vector<int> rows, cols;
        for (int r = i + 1; r < n; ++r) rows.push_back(r);
        for (int cc = 0; cc < n; ++cc) {
          if (!col_used[cc] && cc != c) cols.push_back(cc);
        }
        Matrix sub(rest, rest);
        for (int r = 0; r < rest; ++r) {
          for (int cc = 0; cc < rest; ++cc) sub(r, cc) = cost(rows[r], cols[cc]);
        }
        tail = assignment_cost(sub, hungarian_core(sub));
      }
      if (fixed + cost(i, c) + tail <= optimum + tol) {
        result[i] = c;
        col_used[c] = 1;
        fixed += cost(i, c);
        break;
      }
    }
    if (result[i] < 0) return best;
  }
  return result;
}

Matrix matching_cost(const Matrix& target, const Matrix& pred) {
  if (target.rows() != pred.rows() || target.cols() != pred.cols()) {
    throw UsageError("matching: mask shapes differ");
  }
  const Index k = target.cols();
  Matrix cost(k, k);
  Eigen::VectorXd tn = target.colwise().norm().transpose();
  Eigen::VectorXd pn = pred.colwise().norm().transpose();
  for (Index a = 0; a < k; ++a) {
    for (Index b = 0; b < k; ++b) {
      const double denom = tn(a) * pn(b);
      cost(a, b) = denom > 0 ? -target.col(a).dot(pred.col(b)) / denom : 0.0;
    }
  }
  return cost;
}

std::vector<int> hungarian_match(const Matrix& target, const Matrix& pred) {
  if (target.cols() < 1) throw UsageError("matching needs at least one mask");
  return solve_assignment(matching_cost(target, pred));
}

double dice_distance(std::span<const double> target, std::span<const double> pred) {
  if (target.size() != pred.size()) throw UsageError("dice: length mismatch");
  double inter = 0.0, st = 0.0, sp = 0.0;
  for (size_t i = 0; i < target.size(); ++i) {
    inter += target[i] * pred[i];
    st += target[i];
    sp += pred[i];
  }
  return 1.0 - (2.0 * inter + kDiceSmooth) / (st + sp + kDiceSmooth);
}

Var dice_distance(const Matrix& target, const Var& pred) {
  if (target.rows() != pred.rows() || target.cols() != pred.cols()) throw UsageError("dice: shape mismatch");
  Var inter = ag::sum(ag::mul(ag::constant(target), pred));
  Var num = ag::add_scalar(ag::scale(inter, 2.0), kDiceSmooth);
  Var den = ag::add_scalar(ag::sum(pred), target.sum() + kDiceSmooth);
  return ag::add_scalar(ag::scale(ag::div(num, den), -1.0), 1.0);
}

Matrix binarize(const Matrix& soft, double threshold) {
  return (soft.array() > threshold).cast<double>().matrix();
}

MaskConsistency mask_consistency(const Matrix& target_first, const Matrix& target_second,
                                 const Var& pred_first, const Var& pred_second, double threshold) {
  const Index k = target_first.cols();
  if (k < 1 || target_second.cols() != k || pred_first.cols() != k || pred_second.cols() != k) {
    throw UsageError("mask consistency: subgroup counts differ");
  }
  MaskConsistency out;
  out.perm_first = hungarian_match(target_first, pred_first.value());
  out.perm_second = hungarian_match(target_second, pred_second.value());
  const Matrix hard_first = binarize(target_first, threshold);
  const Matrix hard_second = binarize(target_second, threshold);
  std::vector<Var> terms;
  for (Index i = 0; i < k; ++i) {
    const int c1[] = {out.perm_first[static_cast<size_t>(i)]};
    const int c2[] = {out.perm_second[static_cast<size_t>(i)]};
    terms.push_back(dice_distance(hard_first.col(i), ag::gather_cols(pred_first, c1)));
    terms.push_back(dice_distance(hard_second.col(i), ag::gather_cols(pred_second, c2)));
  }
  Var total = ag::sum(ag::concat_rows(terms));
  out.loss = ag::scale(total, 0.5 / static_cast<double>(k));
  return out;
}

void ema_update(nn::ParamStore& momentum, const nn::ParamStore& online, long double m) {
  if (!(m >= 0 && m <= 1)) throw UsageError("ema coefficient must be in [0, 1]");
  if (momentum.entries().size() != online.entries().size()) throw UsageError("ema: parameter sets differ");
  const long double keep = m;
  const long double take = 1.0L - m;
  for (const auto& [name, entry] : momentum.entries()) {
    const Var& src = online.at(name);
    Var dst = entry.var;
    if (src.rows() != dst.rows() || src.cols() != dst.cols()) throw UsageError("ema: shape mismatch for " + name);
    double* d = dst.mutable_value().data();
    const double* s = src.value().data();
    for (Index i = 0; i < dst.value().size(); ++i) {
      d[i] = static_cast<double>(keep * static_cast<long double>(d[i]) + take * static_cast<long double>(s[i]));
    }
  }
}

Var total_loss(const Var& contrast, const Var& entity, const Var& mask, double lambda) {
  Var total = ag::add(contrast, entity);
  if (lambda != 0.0) total = ag::add(total, ag::scale(mask, lambda));
  return total;
}

}  // namespace ovseg
