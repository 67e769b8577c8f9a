// SPDX-License-Identifier: Apache-2.0
#include "pbd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <random>

#include "kernels.hpp"
#include "pbd/errors.hpp"
#include "pbd/packer.hpp"

namespace pbd {
namespace {

constexpr double kLnEps = 1e-5;

enum LayerGroup { LN1G, LN1B, WQKV, BQKV, WO, BO, LN2G, LN2B, W1, B1, W2, B2, kLayerGroups };
enum FinalGroup { LNFG, LNFB, WOUT, BOUT };

std::size_t layer_off(const ModelParams& p, int layer, int g) { return p.groups()[2 + layer * kLayerGroups + g].offset; }
std::size_t final_off(const ModelParams& p, int g) {
  return p.groups()[2 + p.config().n_layers * kLayerGroups + g].offset;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
}

void layer_norm(int n, int d, const double* x, const double* g, const double* b, double* y, double* mu, double* rs) {
  for (int i = 0; i < n; ++i) {
    const double* xr = x + static_cast<long>(i) * d;
    double m = 0.0;
    for (int c = 0; c < d; ++c) m += xr[c];
    m /= d;
    double v = 0.0;
    for (int c = 0; c < d; ++c) v += (xr[c] - m) * (xr[c] - m);
    v /= d;
    const double r = 1.0 / std::sqrt(v + kLnEps);
    double* yr = y + static_cast<long>(i) * d;
    for (int c = 0; c < d; ++c) yr[c] = (xr[c] - m) * r * g[c] + b[c];
    if (mu) mu[i] = m;
    if (rs) rs[i] = r;
  }
}

// dx += LN'(dy); dg, db accumulate.
void layer_norm_backward(int n, int d, const double* x, const double* mu, const double* rs, const double* g,
                         const double* dy, double* dx, double* dg, double* db) {
  std::vector<double> xhat(d), dxhat(d);
  for (int i = 0; i < n; ++i) {
    const double* xr = x + static_cast<long>(i) * d;
    const double* dyr = dy + static_cast<long>(i) * d;
    double m1 = 0.0, m2 = 0.0;
    for (int c = 0; c < d; ++c) {
      xhat[c] = (xr[c] - mu[i]) * rs[i];
      dxhat[c] = dyr[c] * g[c];
      dg[c] += dyr[c] * xhat[c];
      db[c] += dyr[c];
      m1 += dxhat[c];
      m2 += dxhat[c] * xhat[c];
    }
    m1 /= d;
    m2 /= d;
    double* dxr = dx + static_cast<long>(i) * d;
    for (int c = 0; c < d; ++c) dxr[c] += rs[i] * (dxhat[c] - m1 - xhat[c] * m2);
  }
}

void add_bias(int n, int cols, double* y, const double* b) {
  for (int i = 0; i < n; ++i) {
    double* r = y + static_cast<long>(i) * cols;
    for (int c = 0; c < cols; ++c) r[c] += b[c];
  }
}

void col_sum_acc(int n, int cols, const double* y, double* out) {
  for (int i = 0; i < n; ++i) {
    const double* r = y + static_cast<long>(i) * cols;
    for (int c = 0; c < cols; ++c) out[c] += r[c];
  }
}

struct LayerActs {
  std::vector<double> x_in, h, qkv, att, x_mid, h2, u, g;
  std::vector<double> mu1, rs1, mu2, rs2;
  std::vector<int> lo, hi;
  std::vector<std::size_t> poff;
  std::size_t span_total = 0;
  std::vector<double> probs;  // head-major, each head holds every row's span
};

// Runs new rows through every layer. keys[l]/values[l] already hold `prefix`
// rows and receive the new ones. On return `x` holds the final residual stream.
void run_layers(const ModelParams& P, std::span<const TokenId> tokens, std::span<const int> positions,
                const AttentionMask& mask, std::vector<std::vector<double>>& keys,
                std::vector<std::vector<double>>& values, int prefix, std::vector<LayerActs>* acts,
                std::vector<double>& x) {
  const auto& cfg = P.config();
  const int d = cfg.d_model, H = cfg.n_heads, dh = d / H, ff = cfg.d_ff;
  const int n = static_cast<int>(tokens.size());
  const int total = prefix + n;
  const double* w = P.values().data();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  x.assign(static_cast<std::size_t>(n) * d, 0.0);
  const double* tok_emb = w + P.groups()[0].offset;
  const double* pos_emb = w + P.groups()[1].offset;
  for (int i = 0; i < n; ++i) {
    const double* te = tok_emb + static_cast<long>(tokens[i]) * d;
    const double* pe = pos_emb + static_cast<long>(positions[i]) * d;
    double* xr = x.data() + static_cast<long>(i) * d;
    for (int c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
  }

  std::vector<double> h(static_cast<std::size_t>(n) * d), qkv(static_cast<std::size_t>(n) * 3 * d),
      att(static_cast<std::size_t>(n) * d), tmp(static_cast<std::size_t>(n) * d), u(static_cast<std::size_t>(n) * ff),
      g(static_cast<std::size_t>(n) * ff), kt(static_cast<std::size_t>(d) * total), s(total);
  std::vector<double> mu1(n), rs1(n), mu2(n), rs2(n);

  // Key spans depend only on the mask.
  std::vector<int> lo(n, 0), hi(n, 0);
  std::vector<std::size_t> poff(n, 0);
  std::size_t span_total = 0;
  for (int i = 0; i < n; ++i) {
    const std::uint8_t* row = mask.row(i);
    int a = 0, b = total;
    while (a < total && !row[a]) ++a;
    while (b > a && !row[b - 1]) --b;
    lo[i] = a;
    hi[i] = b;
    poff[i] = span_total;
    span_total += static_cast<std::size_t>(b - a);
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    auto p = [&](int grp) { return w + layer_off(P, l, grp); };
    LayerActs* la = acts ? &(*acts)[l] : nullptr;
    if (la) la->x_in = x;

    layer_norm(n, d, x.data(), p(LN1G), p(LN1B), h.data(), mu1.data(), rs1.data());
    kern::gemm_nn(n, 3 * d, d, h.data(), d, p(WQKV), 3 * d, qkv.data(), 3 * d, false);
    add_bias(n, 3 * d, qkv.data(), p(BQKV));

    auto& K = keys[l];
    auto& V = values[l];
    K.resize(static_cast<std::size_t>(total) * d);
    V.resize(static_cast<std::size_t>(total) * d);
    for (int i = 0; i < n; ++i) {
      const double* src = qkv.data() + static_cast<long>(i) * 3 * d;
      std::copy(src + d, src + 2 * d, K.data() + static_cast<long>(prefix + i) * d);
      std::copy(src + 2 * d, src + 3 * d, V.data() + static_cast<long>(prefix + i) * d);
    }
    kern::transpose(total, d, K.data(), d, kt.data(), total);

    if (la) {
      la->probs.assign(span_total * H, 0.0);
      la->span_total = span_total;
    }
    std::fill(att.begin(), att.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const int a = lo[i], b = hi[i];
      if (a >= b) continue;
      const std::uint8_t* row = mask.row(i);
      for (int hh = 0; hh < H; ++hh) {
        const double* q = qkv.data() + static_cast<long>(i) * 3 * d + hh * dh;
        for (int j = a; j < b; ++j) s[j] = 0.0;
        for (int c = 0; c < dh; ++c) {
          const double qc = q[c];
          const double* kr = kt.data() + static_cast<long>(hh * dh + c) * total;
          for (int j = a; j < b; ++j) s[j] += qc * kr[j];
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = a; j < b; ++j) {
          if (!row[j]) continue;
          s[j] *= scale;
          mx = std::max(mx, s[j]);
        }
        double sum = 0.0;
        for (int j = a; j < b; ++j) {
          if (row[j]) {
            s[j] = std::exp(s[j] - mx);
            sum += s[j];
          } else {
            s[j] = 0.0;
          }
        }
        const double inv = 1.0 / sum;
        double* o = att.data() + static_cast<long>(i) * d + hh * dh;
        for (int j = a; j < b; ++j) {
          if (!row[j]) continue;
          s[j] *= inv;
          const double pj = s[j];
          const double* vr = V.data() + static_cast<long>(j) * d + hh * dh;
          for (int c = 0; c < dh; ++c) o[c] += pj * vr[c];
        }
        if (la) std::copy(s.begin() + a, s.begin() + b, la->probs.begin() + hh * span_total + poff[i]);
      }
    }

    kern::gemm_nn(n, d, d, att.data(), d, p(WO), d, tmp.data(), d, false);
    add_bias(n, d, tmp.data(), p(BO));
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += tmp[k];
    if (la) la->x_mid = x;

    std::vector<double>& h2 = la ? la->h2 : h;
    h2.resize(static_cast<std::size_t>(n) * d);
    if (la) {
      la->h = h;
      la->qkv = qkv;
      la->att = att;
      la->mu1 = mu1;
      la->rs1 = rs1;
    }
    layer_norm(n, d, x.data(), p(LN2G), p(LN2B), h2.data(), mu2.data(), rs2.data());
    kern::gemm_nn(n, ff, d, h2.data(), d, p(W1), ff, u.data(), ff, false);
    add_bias(n, ff, u.data(), p(B1));
    for (std::size_t k = 0; k < u.size(); ++k) g[k] = gelu(u[k]);
    kern::gemm_nn(n, d, ff, g.data(), ff, p(W2), d, tmp.data(), d, false);
    add_bias(n, d, tmp.data(), p(B2));
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += tmp[k];
    if (la) {
      la->u = u;
      la->g = g;
      la->mu2 = mu2;
      la->rs2 = rs2;
      la->lo = lo;
      la->hi = hi;
      la->poff = poff;
    }
  }
}

// Final norm and output projection for the listed rows of x.
void project(const ModelParams& P, const std::vector<double>& x, std::span<const int> rows, std::vector<double>& hf,
             std::vector<double>* mu, std::vector<double>* rs, std::vector<double>& logits) {
  const auto& cfg = P.config();
  const int d = cfg.d_model, Vn = cfg.vocab_size;
  const int R = static_cast<int>(rows.size());
  std::vector<double> xr(static_cast<std::size_t>(R) * d);
  for (int r = 0; r < R; ++r) std::copy_n(x.data() + static_cast<long>(rows[r]) * d, d, xr.data() + static_cast<long>(r) * d);
  hf.resize(xr.size());
  if (mu) mu->resize(R);
  if (rs) rs->resize(R);
  const double* w = P.values().data();
  layer_norm(R, d, xr.data(), w + final_off(P, LNFG), w + final_off(P, LNFB), hf.data(), mu ? mu->data() : nullptr,
             rs ? rs->data() : nullptr);
  logits.resize(static_cast<std::size_t>(R) * Vn);
  kern::gemm_nn(R, Vn, d, hf.data(), d, w + final_off(P, WOUT), Vn, logits.data(), Vn, false);
  add_bias(R, Vn, logits.data(), w + final_off(P, BOUT));
}

// -log softmax(z)[target]; writes softmax(z) - onehot into grad when given.
double cross_entropy(const double* z, int n, TokenId target, double* grad) {
  double mx = z[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, z[j]);
  double sum = 0.0;
  if (!grad) {
    for (int j = 0; j < n; ++j) sum += std::exp(z[j] - mx);
    return mx + std::log(sum) - z[target];
  }
  for (int j = 0; j < n; ++j) {
    grad[j] = std::exp(z[j] - mx);
    sum += grad[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < n; ++j) grad[j] *= inv;
  grad[target] -= 1.0;
  return mx + std::log(sum) - z[target];
}

struct RowWeights {
  std::vector<int> rows;
  std::vector<double> weight;  // per row: stream weight / per-sample stream count
  std::vector<LossStream> stream;
  std::vector<int> sample;
};

RowWeights target_rows(std::span<const TokenId> targets, std::span<const LossStream> streams,
                       const std::vector<int>& sub_lengths, const LossWeights& w) {
  RowWeights out;
  int start = 0;
  for (int s = 0; s < static_cast<int>(sub_lengths.size()); ++s) {
    const int end = start + sub_lengths[s];
    int n_ntp = 0, n_mtp = 0;
    for (int i = start; i < end; ++i) {
      if (targets[i] == kIgnore) continue;
      (streams[i] == LossStream::Ntp ? n_ntp : n_mtp) += 1;
    }
    for (int i = start; i < end; ++i) {
      if (targets[i] == kIgnore) continue;
      if (streams[i] == LossStream::None) throw ContractError("target without a loss stream");
      const bool ntp = streams[i] == LossStream::Ntp;
      out.rows.push_back(i);
      out.weight.push_back(ntp ? w.ntp / n_ntp : w.mtp / n_mtp);
      out.stream.push_back(streams[i]);
      out.sample.push_back(s);
    }
    start = end;
  }
  return out;
}

LossReport accumulate_loss(const RowWeights& rw, const std::vector<double>& ce, const LossWeights& w, int samples) {
  LossReport rep;
  rep.samples = samples;
  std::vector<double> sum_ntp(samples, 0.0), sum_mtp(samples, 0.0);
  std::vector<int> cnt_ntp(samples, 0), cnt_mtp(samples, 0);
  for (std::size_t r = 0; r < rw.rows.size(); ++r) {
    if (rw.stream[r] == LossStream::Ntp) {
      sum_ntp[rw.sample[r]] += ce[r];
      ++cnt_ntp[rw.sample[r]];
    } else {
      sum_mtp[rw.sample[r]] += ce[r];
      ++cnt_mtp[rw.sample[r]];
    }
  }
  for (int s = 0; s < samples; ++s) {
    if (cnt_ntp[s]) rep.l_ntp += sum_ntp[s] / cnt_ntp[s];
    if (cnt_mtp[s]) rep.l_mtp += sum_mtp[s] / cnt_mtp[s];
    rep.ntp_tokens += cnt_ntp[s];
    rep.mtp_tokens += cnt_mtp[s];
  }
  rep.l_total = w.ntp * rep.l_ntp + w.mtp * rep.l_mtp;
  return rep;
}

void check_inputs(const ModelConfig& cfg, std::span<const TokenId> tokens, std::span<const int> positions, int prefix) {
  if (tokens.size() != positions.size()) throw ContractError("tokens and positions differ in length");
  if (prefix + static_cast<long>(tokens.size()) > cfg.max_seq_len) {
    throw CapacityError("sequence of " + std::to_string(prefix + tokens.size()) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size) throw ContractError("token id outside the vocabulary");
    if (positions[i] < 0 || positions[i] >= cfg.max_seq_len) {
      throw CapacityError("position id " + std::to_string(positions[i]) + " exceeds max_seq_len");
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

ModelParams::ModelParams(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int d = config.d_model, ff = config.d_ff, Vn = config.vocab_size;
  std::size_t off = 0;
  auto add = [&](std::string name, int rows, int cols) {
    groups_.push_back({std::move(name), off, rows, cols});
    off += static_cast<std::size_t>(rows) * cols;
  };
  add("tok_emb", Vn, d);
  add("pos_emb", config.max_seq_len, d);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.gain", 1, d);
    add(p + "ln1.bias", 1, d);
    add(p + "attn.wqkv", d, 3 * d);
    add(p + "attn.bqkv", 1, 3 * d);
    add(p + "attn.wo", d, d);
    add(p + "attn.bo", 1, d);
    add(p + "ln2.gain", 1, d);
    add(p + "ln2.bias", 1, d);
    add(p + "ff.w1", d, ff);
    add(p + "ff.b1", 1, ff);
    add(p + "ff.w2", ff, d);
    add(p + "ff.b2", 1, d);
  }
  add("lnf.gain", 1, d);
  add("lnf.bias", 1, d);
  add("out.w", d, Vn);
  add("out.b", 1, Vn);
  values_.assign(off, 0.0);
}

ModelParams ModelParams::initialized(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (const auto& g : p.groups_) {
    double* v = p.data(g);
    const bool embedding = g.name.ends_with("_emb");
    const bool gain = g.name.ends_with(".gain");
    const bool bias = g.rows == 1 && !gain;
    const double bound = 1.0 / std::sqrt(static_cast<double>(g.rows));
    std::uniform_real_distribution<double> fan_in(-bound, bound);
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = embedding ? unit(rng) : gain ? 1.0 : bias ? 0.0 : fan_in(rng);
    }
  }
  return p;
}

const ParamGroup& ModelParams::group(std::string_view name) const {
  for (const auto& g : groups_) {
    if (g.name == name) return g;
  }
  throw ContractError("unknown parameter group: " + std::string(name));
}

bool ModelParams::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

KVCache::KVCache(const ModelConfig& config)
    : d_model_(config.d_model), keys_(config.n_layers), values_(config.n_layers) {}

void KVCache::truncate(int length) {
  if (length < 0 || length > this->length()) throw ContractError("cache truncation out of range");
  for (auto& k : keys_) k.resize(static_cast<std::size_t>(length) * d_model_);
  for (auto& v : values_) v.resize(static_cast<std::size_t>(length) * d_model_);
  tokens_.resize(length);
  positions_.resize(length);
  visible_.resize(length);
}

void KVCache::append_journal(TokenId token, int position, std::vector<std::uint8_t> visible) {
  tokens_.push_back(token);
  positions_.push_back(position);
  visible_.push_back(std::move(visible));
}

AttentionMask KVCache::journal_mask() const {
  const int n = length();
  AttentionMask m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < static_cast<int>(visible_[i].size()); ++j)
      if (visible_[i][j]) m.set(i, j);
  return m;
}

LossReport loss_joint(std::span<const double> logits, int vocab_size, const TrainingExample& ex,
                      const LossWeights& weights) {
  if (logits.size() != static_cast<std::size_t>(ex.size()) * vocab_size) {
    throw ContractError("logits are not aligned with the example");
  }
  auto rw = target_rows(ex.targets, ex.streams, {ex.size()}, weights);
  std::vector<double> ce(rw.rows.size());
  for (std::size_t r = 0; r < rw.rows.size(); ++r) {
    ce[r] = cross_entropy(logits.data() + static_cast<std::size_t>(rw.rows[r]) * vocab_size, vocab_size,
                          ex.targets[rw.rows[r]], nullptr);
  }
  return accumulate_loss(rw, ce, weights, 1);
}

TransformerModel::TransformerModel(ModelParams params) : params_(std::move(params)) {}

std::vector<double> TransformerModel::extend(KVCache& cache, std::span<const TokenId> tokens,
                                             std::span<const int> positions, const AttentionMask& mask,
                                             std::span<const int> logit_rows) const {
  const int prefix = cache.length();
  const int n = static_cast<int>(tokens.size());
  check_inputs(config(), tokens, positions, prefix);
  if (mask.rows() != n || mask.cols() != prefix + n) throw ContractError("mask does not match cache + new rows");
  for (int r : logit_rows) {
    if (r < 0 || r >= n) throw ContractError("logit row out of range");
  }
  std::vector<double> x;
  run_layers(params_, tokens, positions, mask, cache.keys(), cache.values(), prefix, nullptr, x);
  for (int i = 0; i < n; ++i) {
    cache.append_journal(tokens[i], positions[i], std::vector<std::uint8_t>(mask.row(i), mask.row(i) + prefix + n));
  }
  std::vector<double> hf, logits;
  project(params_, x, logit_rows, hf, nullptr, nullptr, logits);
  return logits;
}

std::vector<double> TransformerModel::forward(std::span<const TokenId> tokens, std::span<const int> positions,
                                              const AttentionMask& mask) const {
  KVCache cache(config());
  std::vector<int> rows(tokens.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return extend(cache, tokens, positions, mask, rows);
}

std::vector<double> TransformerModel::forward(const TrainingExample& ex) const {
  return forward(ex.tokens, ex.positions, build_training_mask(ex.layout));
}

LossReport TransformerModel::loss(const PackedSequence& batch, const LossWeights& weights) const {
  const auto& cfg = config();
  check_inputs(cfg, batch.tokens, batch.positions, 0);
  const auto mask = build_training_mask(batch.layout);
  auto rw = target_rows(batch.targets, batch.streams, batch.layout.sub_sample_lengths(), weights);
  std::vector<std::vector<double>> K(cfg.n_layers), V(cfg.n_layers);
  std::vector<double> x, hf, logits;
  run_layers(params_, batch.tokens, batch.positions, mask, K, V, 0, nullptr, x);
  project(params_, x, rw.rows, hf, nullptr, nullptr, logits);
  std::vector<double> ce(rw.rows.size());
  for (std::size_t r = 0; r < rw.rows.size(); ++r) {
    ce[r] = cross_entropy(logits.data() + r * cfg.vocab_size, cfg.vocab_size, batch.targets[rw.rows[r]], nullptr);
  }
  return accumulate_loss(rw, ce, weights, static_cast<int>(batch.layout.samples.size()));
}

LossReport TransformerModel::loss_and_grad(const PackedSequence& batch, std::vector<double>& grad,
                                           const LossWeights& weights) const {
  const auto& cfg = config();
  const ModelParams& P = params_;
  check_inputs(cfg, batch.tokens, batch.positions, 0);
  const int d = cfg.d_model, H = cfg.n_heads, dh = d / H, ff = cfg.d_ff, Vn = cfg.vocab_size;
  const int T = batch.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto mask = build_training_mask(batch.layout);
  auto rw = target_rows(batch.targets, batch.streams, batch.layout.sub_sample_lengths(), weights);
  const int R = static_cast<int>(rw.rows.size());

  std::vector<LayerActs> acts(cfg.n_layers);
  std::vector<std::vector<double>> K(cfg.n_layers), V(cfg.n_layers);
  std::vector<double> x, hf, mu_f, rs_f, logits;
  run_layers(P, batch.tokens, batch.positions, mask, K, V, 0, &acts, x);
  project(P, x, rw.rows, hf, &mu_f, &rs_f, logits);

  grad.assign(P.values().size(), 0.0);
  const double* w = P.values().data();
  double* gw = grad.data();

  std::vector<double> ce(R), dlogits(static_cast<std::size_t>(R) * Vn);
  for (int r = 0; r < R; ++r) {
    double* gr = dlogits.data() + static_cast<long>(r) * Vn;
    ce[r] = cross_entropy(logits.data() + static_cast<long>(r) * Vn, Vn, batch.targets[rw.rows[r]], gr);
    for (int j = 0; j < Vn; ++j) gr[j] *= rw.weight[r];
  }
  auto report = accumulate_loss(rw, ce, weights, static_cast<int>(batch.layout.samples.size()));

  // Output projection and final norm.
  kern::gemm_tn_acc(d, Vn, R, hf.data(), d, dlogits.data(), Vn, gw + final_off(P, WOUT), Vn);
  col_sum_acc(R, Vn, dlogits.data(), gw + final_off(P, BOUT));
  std::vector<double> wt(static_cast<std::size_t>(std::max(Vn, 3 * d)) * std::max(d, ff));
  kern::transpose(d, Vn, w + final_off(P, WOUT), Vn, wt.data(), d);
  std::vector<double> dhf(static_cast<std::size_t>(R) * d), dxr(static_cast<std::size_t>(R) * d, 0.0);
  kern::gemm_nn(R, d, Vn, dlogits.data(), Vn, wt.data(), d, dhf.data(), d, false);
  {
    std::vector<double> xr(static_cast<std::size_t>(R) * d);
    for (int r = 0; r < R; ++r) std::copy_n(x.data() + static_cast<long>(rw.rows[r]) * d, d, xr.data() + static_cast<long>(r) * d);
    layer_norm_backward(R, d, xr.data(), mu_f.data(), rs_f.data(), w + final_off(P, LNFG), dhf.data(), dxr.data(),
                        gw + final_off(P, LNFG), gw + final_off(P, LNFB));
  }
  std::vector<double> dX(static_cast<std::size_t>(T) * d, 0.0);
  for (int r = 0; r < R; ++r) {
    double* dst = dX.data() + static_cast<long>(rw.rows[r]) * d;
    const double* src = dxr.data() + static_cast<long>(r) * d;
    for (int c = 0; c < d; ++c) dst[c] += src[c];
  }

  std::vector<double> dG(static_cast<std::size_t>(T) * ff), dH(static_cast<std::size_t>(T) * d),
      dAtt(static_cast<std::size_t>(T) * d), dQKV(static_cast<std::size_t>(T) * 3 * d), vt(static_cast<std::size_t>(d) * T),
      dp(T);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerActs& la = acts[l];
    auto p = [&](int grp) { return w + layer_off(P, l, grp); };
    auto gp = [&](int grp) { return gw + layer_off(P, l, grp); };

    // Feed-forward block.
    kern::gemm_tn_acc(ff, d, T, la.g.data(), ff, dX.data(), d, gp(W2), d);
    col_sum_acc(T, d, dX.data(), gp(B2));
    kern::transpose(ff, d, p(W2), d, wt.data(), ff);
    kern::gemm_nn(T, ff, d, dX.data(), d, wt.data(), ff, dG.data(), ff, false);
    for (std::size_t k = 0; k < dG.size(); ++k) dG[k] *= gelu_grad(la.u[k]);
    kern::gemm_tn_acc(d, ff, T, la.h2.data(), d, dG.data(), ff, gp(W1), ff);
    col_sum_acc(T, ff, dG.data(), gp(B1));
    kern::transpose(d, ff, p(W1), ff, wt.data(), d);
    kern::gemm_nn(T, d, ff, dG.data(), ff, wt.data(), d, dH.data(), d, false);
    layer_norm_backward(T, d, la.x_mid.data(), la.mu2.data(), la.rs2.data(), p(LN2G), dH.data(), dX.data(), gp(LN2G),
                        gp(LN2B));

    // Attention output projection.
    kern::gemm_tn_acc(d, d, T, la.att.data(), d, dX.data(), d, gp(WO), d);
    col_sum_acc(T, d, dX.data(), gp(BO));
    kern::transpose(d, d, p(WO), d, wt.data(), d);
    kern::gemm_nn(T, d, d, dX.data(), d, wt.data(), d, dAtt.data(), d, false);

    // Attention core.
    std::fill(dQKV.begin(), dQKV.end(), 0.0);
    kern::transpose(T, d, la.qkv.data() + 2 * d, 3 * d, vt.data(), T);
    for (int i = 0; i < T; ++i) {
      const int a = la.lo[i], b = la.hi[i];
      if (a >= b) continue;
      for (int hh = 0; hh < H; ++hh) {
        const double* prob = la.probs.data() + hh * la.span_total + la.poff[i];
        const double* dA = dAtt.data() + static_cast<long>(i) * d + hh * dh;
        for (int j = a; j < b; ++j) dp[j] = 0.0;
        for (int c = 0; c < dh; ++c) {
          const double dc = dA[c];
          const double* vr = vt.data() + static_cast<long>(hh * dh + c) * T;
          for (int j = a; j < b; ++j) dp[j] += dc * vr[j];
        }
        double spd = 0.0;
        for (int j = a; j < b; ++j) spd += prob[j - a] * dp[j];
        const double* q = la.qkv.data() + static_cast<long>(i) * 3 * d + hh * dh;
        double* dq = dQKV.data() + static_cast<long>(i) * 3 * d + hh * dh;
        for (int j = a; j < b; ++j) {
          const double pj = prob[j - a];
          if (pj == 0.0) continue;
          const double ds = pj * (dp[j] - spd) * scale;
          const double* kj = la.qkv.data() + static_cast<long>(j) * 3 * d + d + hh * dh;
          double* dk = dQKV.data() + static_cast<long>(j) * 3 * d + d + hh * dh;
          double* dv = dk + d;
          for (int c = 0; c < dh; ++c) {
            dq[c] += ds * kj[c];
            dk[c] += ds * q[c];
            dv[c] += pj * dA[c];
          }
        }
      }
    }
    kern::gemm_tn_acc(d, 3 * d, T, la.h.data(), d, dQKV.data(), 3 * d, gp(WQKV), 3 * d);
    col_sum_acc(T, 3 * d, dQKV.data(), gp(BQKV));
    kern::transpose(d, 3 * d, p(WQKV), 3 * d, wt.data(), d);
    kern::gemm_nn(T, d, 3 * d, dQKV.data(), 3 * d, wt.data(), d, dH.data(), d, false);
    layer_norm_backward(T, d, la.x_in.data(), la.mu1.data(), la.rs1.data(), p(LN1G), dH.data(), dX.data(), gp(LN1G),
                        gp(LN1B));
  }

  double* gtok = gw + P.groups()[0].offset;
  double* gpos = gw + P.groups()[1].offset;
  for (int i = 0; i < T; ++i) {
    const double* src = dX.data() + static_cast<long>(i) * d;
    double* te = gtok + static_cast<long>(batch.tokens[i]) * d;
    double* pe = gpos + static_cast<long>(batch.positions[i]) * d;
    for (int c = 0; c < d; ++c) {
      te[c] += src[c];
      pe[c] += src[c];
    }
  }
  return report;
}

double learning_rate(const TrainConfig& cfg, int step) {
  const double warm = cfg.warmup > 0 ? std::min(1.0, (step + 1.0) / cfg.warmup) : 1.0;
  const double progress = cfg.steps > 0 ? std::min(1.0, static_cast<double>(step) / cfg.steps) : 1.0;
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return cfg.lr * warm * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

std::vector<LossPoint> train(TransformerModel& model, AdamState& state, const std::vector<TrainingExample>& dataset,
                             const TrainConfig& cfg) {
  if (dataset.empty()) throw ContractError("training dataset is empty");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].size() > cfg.batch_tokens) {
      throw ContractError("example " + std::to_string(i) + " has " + std::to_string(dataset[i].size()) +
                          " tokens, more than batch_tokens " + std::to_string(cfg.batch_tokens));
    }
  }
  auto& w = model.params().values();
  const std::size_t n = w.size();
  if (state.m.size() != n) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }

  StreamPacker<std::size_t> packer({shuffled_cycle(dataset.size(), cfg.seed ^ 0x9e3779b97f4a7c15ULL)}, {1.0},
                                   [&](std::size_t i) { return dataset[i].size(); }, cfg.batch_tokens, cfg.buffer,
                                   cfg.seed);
  // Replaying the packer keeps a resumed run on the same batch sequence.
  for (int s = 0; s < state.step; ++s) packer.next();

  std::vector<LossPoint> curve;
  std::vector<double> grad;
  const int last = cfg.stop_at >= 0 ? std::min(cfg.stop_at, cfg.steps) : cfg.steps;
  for (int step = state.step; step < last; ++step) {
    auto batch = packer.next();
    std::vector<const TrainingExample*> members;
    for (auto i : batch->items) members.push_back(&dataset[i]);
    const auto packed = pack_examples(members);
    const auto rep = model.loss_and_grad(packed, grad, cfg.weights);
    const double inv = 1.0 / rep.samples;
    if (!std::isfinite(rep.l_total)) {
      throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (ntp " + std::to_string(rep.l_ntp) +
                            ", mtp " + std::to_string(rep.l_mtp) + ")");
    }
    double norm2 = 0.0;
    for (double& g : grad) {
      g *= inv;
      norm2 += g * g;
    }
    const double norm = std::sqrt(norm2);
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
      const double c = cfg.grad_clip / norm;
      for (double& g : grad) g *= c;
    }
    const double lr = learning_rate(cfg, step);
    const int t = ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < n; ++k) {
      state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * grad[k];
      state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
      w[k] -= lr * (state.m[k] / bc1) / (std::sqrt(state.v[k] / bc2) + cfg.eps);
    }
    curve.push_back({step, lr, rep.l_ntp * inv, rep.l_mtp * inv, rep.l_total * inv});
  }
  return curve;
}

void write_loss_csv(std::ostream& out, const std::vector<LossPoint>& curve) {
  out << "step,lr,l_ntp,l_mtp,l_total\n";
  out.precision(10);
  for (const auto& p : curve) out << p.step << ',' << p.lr << ',' << p.l_ntp << ',' << p.l_mtp << ',' << p.l_total << '\n';
}

namespace {

constexpr char kMagic[8] = {'P', 'B', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("checkpoint truncated");
  return v;
}

void put_doubles(std::ostream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_doubles(std::istream& in, std::vector<double>& v) {
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) throw IoError("checkpoint truncated");
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, const AdamState& state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const auto& c = params.config();
  out.write(kMagic, sizeof(kMagic));
  put(out, kCheckpointVersion);
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len, state.step}) put<std::int32_t>(out, v);
  put<std::uint64_t>(out, params.values().size());
  const bool moments = state.m.size() == params.values().size();
  put<std::uint8_t>(out, moments ? 1 : 0);
  put_doubles(out, params.values());
  if (moments) {
    put_doubles(out, state.m);
    put_doubles(out, state.v);
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

ModelParams load_checkpoint(const std::string& path, AdamState* state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("not a checkpoint: " + path);
  if (get<std::uint32_t>(in) != kCheckpointVersion) throw IoError("unsupported checkpoint version: " + path);
  ModelConfig c;
  c.vocab_size = get<std::int32_t>(in);
  c.d_model = get<std::int32_t>(in);
  c.n_layers = get<std::int32_t>(in);
  c.n_heads = get<std::int32_t>(in);
  c.d_ff = get<std::int32_t>(in);
  c.max_seq_len = get<std::int32_t>(in);
  const int step = get<std::int32_t>(in);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }
  ModelParams params(c);
  if (get<std::uint64_t>(in) != params.values().size()) throw IoError("checkpoint weight count mismatch: " + path);
  const bool moments = get<std::uint8_t>(in) != 0;
  get_doubles(in, params.values());
  AdamState st;
  st.step = step;
  if (moments) {
    st.m.resize(params.values().size());
    st.v.resize(params.values().size());
    get_doubles(in, st.m);
    get_doubles(in, st.v);
  }
  if (state) *state = std::move(st);
  return params;
}

}  // namespace pbd
