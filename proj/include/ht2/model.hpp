#pragma once

#include <cmath>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ht2/tensor.hpp"

// Causal transformer controller. Tokens are per-timestep (observation, action)
// pairs run through a shared MLP encoder; missing actions are replaced by a
// learnable mask token before concatenation. Pre-LN blocks with GELU MLPs.
// The output head predicts the full (obs + act) vector per timestep for the
// policy, or a scalar value for the critic.

namespace ht2 {

struct ModelConfig {
  int context_len = 16;
  int n_layers = 4;
  int d_model = 192;
  int n_heads = 4;
  int mlp_ratio = 2;
  std::vector<int> encoder_hidden = {512, 512};
  std::vector<int> head_hidden = {256, 128};
  int obs_dim = 20;
  int act_dim = 18;
  int out_dim = 38;  // obs_dim + act_dim for the policy, 1 for the critic

  int token_dim() const { return obs_dim + act_dim; }

  void validate() const {
    if (context_len < 1) throw std::invalid_argument("model: context_len must be >= 1");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("model: d_model must be divisible by n_heads");
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || mlp_ratio < 1 || obs_dim < 1 ||
        act_dim < 1 || out_dim < 1)
      throw std::invalid_argument("model: all dimensions must be positive");
  }

  static ModelConfig policy_default() { return ModelConfig{}; }
  static ModelConfig critic_default(int critic_state_dim) {
    ModelConfig c;
    c.obs_dim = critic_state_dim;
    c.out_dim = 1;
    return c;
  }
};

namespace ag_model {

template <class S>
using T = ag::Tensor<S>;

template <class S>
struct Linear {
  T<S> w;  // [out, in]
  T<S> b;  // [out]
};

template <class S>
struct Block {
  T<S> ln1_g, ln1_b;
  Linear<S> qkv;   // [3*d, d]
  Linear<S> proj;  // [d, d]
  T<S> ln2_g, ln2_b;
  Linear<S> fc1;  // [d*ratio, d]
  Linear<S> fc2;  // [d, d*ratio]
};

}  // namespace ag_model

template <class S>
struct PolicyParams {
  ModelConfig cfg;
  std::vector<ag_model::Linear<S>> encoder;
  std::vector<ag_model::Block<S>> blocks;
  ag::Tensor<S> lnf_g, lnf_b;
  std::vector<ag_model::Linear<S>> head;
  ag::Tensor<S> mask_token;  // [act_dim]
  ag::Tensor<S> log_std;     // [act_dim]
  ag::Tensor<S> pos_emb;     // [k, d_model], fixed sinusoidal, not learnable

  static PolicyParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const S wstd = S(0.02);
    auto lin = [&](int out, int in) {
      return ag_model::Linear<S>{ag::Tensor<S>::randn({out, in}, rng, wstd, true),
                                 ag::Tensor<S>::zeros({out}, true)};
    };
    PolicyParams p;
    p.cfg = cfg;
    int in = cfg.token_dim();
    for (int h : cfg.encoder_hidden) {
      p.encoder.push_back(lin(h, in));
      in = h;
    }
    p.encoder.push_back(lin(cfg.d_model, in));
    for (int l = 0; l < cfg.n_layers; ++l) {
      ag_model::Block<S> b;
      b.ln1_g = ag::Tensor<S>::full({cfg.d_model}, S(1), true);
      b.ln1_b = ag::Tensor<S>::zeros({cfg.d_model}, true);
      b.qkv = lin(3 * cfg.d_model, cfg.d_model);
      b.proj = lin(cfg.d_model, cfg.d_model);
      b.ln2_g = ag::Tensor<S>::full({cfg.d_model}, S(1), true);
      b.ln2_b = ag::Tensor<S>::zeros({cfg.d_model}, true);
      b.fc1 = lin(cfg.d_model * cfg.mlp_ratio, cfg.d_model);
      b.fc2 = lin(cfg.d_model, cfg.d_model * cfg.mlp_ratio);
      p.blocks.push_back(std::move(b));
    }
    p.lnf_g = ag::Tensor<S>::full({cfg.d_model}, S(1), true);
    p.lnf_b = ag::Tensor<S>::zeros({cfg.d_model}, true);
    in = cfg.d_model;
    for (int h : cfg.head_hidden) {
      p.head.push_back(lin(h, in));
      in = h;
    }
    p.head.push_back(lin(cfg.out_dim, in));
    p.mask_token = ag::Tensor<S>::randn({cfg.act_dim}, rng, wstd, true);
    p.log_std = ag::Tensor<S>::full({cfg.act_dim}, S(std::log(0.135)), true);
    p.pos_emb = sinusoidal_pos_emb(cfg.context_len, cfg.d_model);
    return p;
  }

  static ag::Tensor<S> sinusoidal_pos_emb(int k, int d) {
    auto pe = ag::Tensor<S>::zeros({k, d});
    for (int pos = 0; pos < k; ++pos)
      for (int i = 0; i < d / 2; ++i) {
        double freq = std::pow(10000.0, -2.0 * i / d);
        pe.data()[pos * d + 2 * i] = S(std::sin(pos * freq));
        pe.data()[pos * d + 2 * i + 1] = S(std::cos(pos * freq));
      }
    return pe;
  }

  /// Learnable parameters in a fixed order (checkpoint manifest order).
  std::vector<ag::NamedParam<S>> named() const {
    std::vector<ag::NamedParam<S>> out;
    auto addlin = [&](const std::string& n, const ag_model::Linear<S>& l) {
      out.push_back({n + ".w", l.w});
      out.push_back({n + ".b", l.b});
    };
    for (size_t i = 0; i < encoder.size(); ++i) addlin("enc." + std::to_string(i), encoder[i]);
    for (size_t l = 0; l < blocks.size(); ++l) {
      std::string p = "blk." + std::to_string(l);
      out.push_back({p + ".ln1.g", blocks[l].ln1_g});
      out.push_back({p + ".ln1.b", blocks[l].ln1_b});
      addlin(p + ".qkv", blocks[l].qkv);
      addlin(p + ".proj", blocks[l].proj);
      out.push_back({p + ".ln2.g", blocks[l].ln2_g});
      out.push_back({p + ".ln2.b", blocks[l].ln2_b});
      addlin(p + ".fc1", blocks[l].fc1);
      addlin(p + ".fc2", blocks[l].fc2);
    }
    out.push_back({"lnf.g", lnf_g});
    out.push_back({"lnf.b", lnf_b});
    for (size_t i = 0; i < head.size(); ++i) addlin("head." + std::to_string(i), head[i]);
    out.push_back({"mask_token", mask_token});
    out.push_back({"log_std", log_std});
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& p : named()) n += p.tensor.size();
    return n;
  }

  /// Deep copy (independent storage).
  PolicyParams clone() const {
    PolicyParams c;
    c.cfg = cfg;
    auto cp = [](const ag::Tensor<S>& t) {
      return ag::Tensor<S>::from(t.shape(), t.values(), t.requires_grad());
    };
    auto cplin = [&](const ag_model::Linear<S>& l) {
      return ag_model::Linear<S>{cp(l.w), cp(l.b)};
    };
    for (const auto& l : encoder) c.encoder.push_back(cplin(l));
    for (const auto& b : blocks) {
      ag_model::Block<S> nb;
      nb.ln1_g = cp(b.ln1_g); nb.ln1_b = cp(b.ln1_b);
      nb.qkv = cplin(b.qkv); nb.proj = cplin(b.proj);
      nb.ln2_g = cp(b.ln2_g); nb.ln2_b = cp(b.ln2_b);
      nb.fc1 = cplin(b.fc1); nb.fc2 = cplin(b.fc2);
      c.blocks.push_back(std::move(nb));
    }
    c.lnf_g = cp(lnf_g); c.lnf_b = cp(lnf_b);
    for (const auto& l : head) c.head.push_back(cplin(l));
    c.mask_token = cp(mask_token);
    c.log_std = cp(log_std);
    c.pos_emb = cp(pos_emb);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Forward pieces. All take batched windows:
//   obs [B,k,obs_dim], act [B,k,act_dim], present [B,k,1] in {0,1},
//   attn_mask [Bm,k,k] additive (0 allowed, large negative forbidden).

/// Additive causal mask; with fill m < k the first k-m positions are padding
/// and real queries attend to real keys only (pad rows keep self-attention so
/// their softmax stays finite; their outputs are never consumed).
template <class S>
ag::Tensor<S> causal_mask(int k, int fill) {
  auto m = ag::Tensor<S>::zeros({1, k, k});
  const S neg = S(-1e30);
  int pad = k - fill;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      bool ok = j <= i && (j >= pad || j == i);
      m.data()[i * k + j] = ok ? S(0) : neg;
    }
  return m;
}

template <class S>
ag::Tensor<S> encode_tokens(ag::Tape<S>& tp, const PolicyParams<S>& p, const ag::Tensor<S>& obs,
                            const ag::Tensor<S>& act, const ag::Tensor<S>& present,
                            bool add_pos = true) {
  const auto& cfg = p.cfg;
  if (obs.rank() != 3 || obs.dim(2) != cfg.obs_dim)
    throw std::invalid_argument("encode_tokens: obs must be [B,k," +
                                std::to_string(cfg.obs_dim) + "]");
  if (act.rank() != 3 || act.dim(2) != cfg.act_dim)
    throw std::invalid_argument("encode_tokens: act must be [B,k," +
                                std::to_string(cfg.act_dim) + "]");
  int B = obs.dim(0), k = obs.dim(1);
  if (k > cfg.context_len)
    throw std::invalid_argument("encode_tokens: sequence longer than context");

  // action slice: real action where present, mask token elsewhere
  auto not_present = ag::Tensor<S>::zeros(present.shape());
  for (int64_t i = 0; i < present.size(); ++i)
    not_present.data()[i] = S(1) - present.data()[i];
  auto act_real = ag::mul(tp, act, present);
  auto mt = ag::add(tp, ag::Tensor<S>::zeros({B, k, cfg.act_dim}), p.mask_token);
  auto act_in = ag::add(tp, act_real, ag::mul(tp, mt, not_present));

  auto x = ag::concat_last(tp, obs, act_in);
  for (size_t i = 0; i < p.encoder.size(); ++i) {
    x = ag::linear(tp, x, p.encoder[i].w, p.encoder[i].b);
    if (i + 1 < p.encoder.size()) x = ag::gelu(tp, x);
  }
  if (add_pos) {
    if (k == cfg.context_len) {
      x = ag::add(tp, x, p.pos_emb);
    } else {  // short sequence: embeddings by absolute index 0..k-1
      auto pe = ag::Tensor<S>::zeros({k, cfg.d_model});
      std::copy(p.pos_emb.data(), p.pos_emb.data() + int64_t(k) * cfg.d_model, pe.data());
      x = ag::add(tp, x, pe);
    }
  }
  return x;
}

/// Transformer trunk: tokens [B,k,d] -> final hidden states [B,k,d].
template <class S>
ag::Tensor<S> forward_hidden(ag::Tape<S>& tp, const PolicyParams<S>& p,
                             const ag::Tensor<S>& tokens, const ag::Tensor<S>& attn_mask) {
  const auto& cfg = p.cfg;
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.d_model)
    throw std::invalid_argument("forward_hidden: tokens must be [B,k,d_model]");
  int B = tokens.dim(0), k = tokens.dim(1);
  int H = cfg.n_heads, dh = cfg.d_model / H;
  const S scl = S(1) / std::sqrt(S(dh));
  auto x = tokens;
  for (const auto& blk : p.blocks) {
    auto h = ag::layer_norm(tp, x, blk.ln1_g, blk.ln1_b);
    auto qkv = ag::linear(tp, h, blk.qkv.w, blk.qkv.b);
    auto q = ag::split_heads(tp, ag::slice_last(tp, qkv, 0, cfg.d_model), H);
    auto kk = ag::split_heads(tp, ag::slice_last(tp, qkv, cfg.d_model, cfg.d_model), H);
    auto v = ag::split_heads(tp, ag::slice_last(tp, qkv, 2 * cfg.d_model, cfg.d_model), H);
    auto scores = ag::bmm(tp, q, kk, false, true, scl);
    auto probs = ag::softmax_masked(tp, scores, attn_mask);
    auto ctx = ag::merge_heads(tp, ag::bmm(tp, probs, v), H);
    auto proj = ag::linear(tp, ctx, blk.proj.w, blk.proj.b);
    x = ag::add(tp, x, proj);

    auto m = ag::layer_norm(tp, x, blk.ln2_g, blk.ln2_b);
    auto f = ag::gelu(tp, ag::linear(tp, m, blk.fc1.w, blk.fc1.b));
    f = ag::linear(tp, f, blk.fc2.w, blk.fc2.b);
    x = ag::add(tp, x, f);
  }
  (void)B; (void)k;
  return ag::layer_norm(tp, x, p.lnf_g, p.lnf_b);
}

/// Output head over every position: hidden [B,k,d] -> [B,k,out_dim].
template <class S>
ag::Tensor<S> output_head(ag::Tape<S>& tp, const PolicyParams<S>& p,
                          const ag::Tensor<S>& hidden) {
  auto x = hidden;
  for (size_t i = 0; i < p.head.size(); ++i) {
    x = ag::linear(tp, x, p.head[i].w, p.head[i].b);
    if (i + 1 < p.head.size()) x = ag::gelu(tp, x);
  }
  return x;
}

/// Output head applied to the last position only: hidden [B,k,d] -> [B,out_dim].
template <class S>
ag::Tensor<S> output_head_last(ag::Tape<S>& tp, const PolicyParams<S>& p,
                               const ag::Tensor<S>& hidden) {
  auto x = ag::select_dim1(tp, hidden, hidden.dim(1) - 1);
  for (size_t i = 0; i < p.head.size(); ++i) {
    x = ag::linear(tp, x, p.head[i].w, p.head[i].b);
    if (i + 1 < p.head.size()) x = ag::gelu(tp, x);
  }
  return x;
}

/// Full pass over batched windows, predictions at every position (pre-training).
template <class S>
ag::Tensor<S> forward_predictions(ag::Tape<S>& tp, const PolicyParams<S>& p,
                                  const ag::Tensor<S>& obs, const ag::Tensor<S>& act,
                                  const ag::Tensor<S>& present, const ag::Tensor<S>& attn_mask) {
  auto tokens = encode_tokens(tp, p, obs, act, present);
  auto hidden = forward_hidden(tp, p, tokens, attn_mask);
  return output_head(tp, p, hidden);
}

// ---------------------------------------------------------------------------
// History buffer: ring of the last k (observation, action) pairs in the
// model's normalized input space. The action of the newest entry may be
// missing until the controller commits it (mask token applies meanwhile).

template <class S>
class HistoryBuffer {
 public:
  struct Entry {
    std::vector<S> obs;
    std::vector<S> act;
    bool has_action = false;
  };

  explicit HistoryBuffer(int capacity = 16) : cap_(capacity) {}

  void clear() { entries_.clear(); }
  int size() const { return int(entries_.size()); }
  int capacity() const { return cap_; }
  bool empty() const { return entries_.empty(); }

  void push(std::vector<S> obs, std::optional<std::vector<S>> act = std::nullopt) {
    Entry e;
    e.obs = std::move(obs);
    if (act) {
      e.act = std::move(*act);
      e.has_action = true;
    }
    entries_.push_back(std::move(e));
    if (int(entries_.size()) > cap_) entries_.pop_front();
  }

  /// Commit the action taken for the newest entry.
  void set_last_action(std::vector<S> act) {
    if (entries_.empty()) throw std::invalid_argument("history: empty buffer");
    entries_.back().act = std::move(act);
    entries_.back().has_action = true;
  }

  const Entry& entry(int i) const { return entries_[size_t(i)]; }

 private:
  int cap_;
  std::deque<Entry> entries_;
};

/// Builds a left-padded [1,k,*] window (pad entries are zeros through the
/// encoder with action marked present so the mask token is not substituted).
template <class S>
struct QueryWindow {
  ag::Tensor<S> obs, act, present, mask;
};

template <class S>
QueryWindow<S> build_window(const ModelConfig& cfg, const HistoryBuffer<S>& hist) {
  if (hist.empty()) throw std::invalid_argument("predict_action: empty history");
  int k = cfg.context_len;
  int m = std::min(hist.size(), k);
  QueryWindow<S> w;
  w.obs = ag::Tensor<S>::zeros({1, k, cfg.obs_dim});
  w.act = ag::Tensor<S>::zeros({1, k, cfg.act_dim});
  w.present = ag::Tensor<S>::zeros({1, k, 1});
  int pad = k - m;
  for (int i = 0; i < pad; ++i) w.present.data()[i] = S(1);
  for (int i = 0; i < m; ++i) {
    const auto& e = hist.entry(hist.size() - m + i);
    int pos = pad + i;
    for (int j = 0; j < cfg.obs_dim; ++j) w.obs.data()[pos * cfg.obs_dim + j] = e.obs[j];
    if (e.has_action)
      for (int j = 0; j < cfg.act_dim; ++j) w.act.data()[pos * cfg.act_dim + j] = e.act[j];
    w.present.data()[pos] = e.has_action ? S(1) : S(0);
  }
  w.mask = causal_mask<S>(k, m);
  return w;
}

/// Deterministic action mean for the newest decision point: the action slice
/// of the last-position prediction. Optionally returns the final hidden state
/// at the last position (the latent used by the representation analysis).
template <class S>
std::vector<S> predict_action(const PolicyParams<S>& p, const HistoryBuffer<S>& hist,
                              std::vector<S>* latent_out = nullptr) {
  auto w = build_window(p.cfg, hist);
  ag::Tape<S> tp;
  tp.grad_enabled = false;
  auto tokens = encode_tokens(tp, p, w.obs, w.act, w.present);
  auto hidden = forward_hidden(tp, p, tokens, w.mask);
  if (latent_out) {
    latent_out->assign(size_t(p.cfg.d_model), S(0));
    const S* h = hidden.data() + (int64_t(p.cfg.context_len) - 1) * p.cfg.d_model;
    for (int j = 0; j < p.cfg.d_model; ++j) (*latent_out)[j] = h[j];
  }
  auto out = output_head_last(tp, p, hidden);
  int off = p.cfg.out_dim == 1 ? 0 : p.cfg.obs_dim;
  int len = p.cfg.out_dim == 1 ? 1 : p.cfg.act_dim;
  std::vector<S> act(static_cast<size_t>(len));
  for (int j = 0; j < len; ++j) act[size_t(j)] = out.data()[off + j];
  return act;
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian sampling

template <class S>
struct ActionSample {
  std::vector<S> action;
  S log_prob;
};

template <class S>
S gaussian_log_prob(const std::vector<S>& action, const std::vector<S>& mean,
                    const std::vector<S>& log_std) {
  if (action.size() != mean.size() || mean.size() != log_std.size())
    throw std::invalid_argument("gaussian_log_prob: size mismatch");
  S lp = S(-0.5) * S(mean.size()) * S(std::log(2.0 * M_PI));
  for (size_t i = 0; i < mean.size(); ++i) {
    S z = (action[i] - mean[i]) * std::exp(-log_std[i]);
    lp -= log_std[i] + S(0.5) * z * z;
  }
  return lp;
}

template <class S>
ActionSample<S> sample_action(const std::vector<S>& mean, const std::vector<S>& log_std,
                              Rng& rng) {
  if (mean.size() != log_std.size())
    throw std::invalid_argument("sample_action: mean/log_std size mismatch");
  ActionSample<S> s;
  s.action.resize(mean.size());
  for (size_t i = 0; i < mean.size(); ++i)
    s.action[i] = mean[i] + std::exp(log_std[i]) * S(rng.gaussian());
  s.log_prob = gaussian_log_prob(s.action, mean, log_std);
  return s;
}

}  // namespace ht2
