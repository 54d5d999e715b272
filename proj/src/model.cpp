#include "opsa/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include <nlohmann/json.hpp>

#include "opsa/error.hpp"
#include "opsa/kernels.hpp"
#include "opsa/parallel.hpp"

namespace opsa::model {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

// Tensor order inside one block.
enum BlockTensor : std::size_t {
  kLn1Gain,
  kLn1Bias,
  kQkvW,
  kQkvB,
  kOutW,
  kOutB,
  kLn2Gain,
  kLn2Bias,
  kFcW,
  kFcB,
  kProjW,
  kProjB,
  kPerBlock
};

constexpr std::size_t kTokEmb = 0;
constexpr std::size_t kPosEmb = 1;
constexpr std::size_t kFirstBlock = 2;

std::size_t block_index(std::size_t b, BlockTensor t) { return kFirstBlock + b * kPerBlock + t; }
std::size_t final_index(const ModelConfig& c, std::size_t k) {
  return kFirstBlock + static_cast<std::size_t>(c.num_blocks) * kPerBlock + k;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluK * (u + kGeluC * u * u * u))); }

double gelu_grad(double u) {
  const double th = std::tanh(kGeluK * (u + kGeluC * u * u * u));
  return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluK * (1.0 + 3.0 * kGeluC * u * u);
}

void layer_norm_row(const double* x, const double* gain, const double* bias, double* xhat, double* rstd_out,
                    double* y, std::size_t n) {
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  *rstd_out = rstd;
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    y[i] = xhat[i] * gain[i] + bias[i];
  }
}

// dx += LN'(dy); gain/bias gradients accumulated.
void layer_norm_row_backward(const double* dy, const double* xhat, double rstd, const double* gain, double* dgain,
                             double* dbias, double* dx, std::size_t n, std::vector<double>& scratch) {
  scratch.resize(n);
  double mean_d = 0.0;
  double mean_dx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dgain[i] += dy[i] * xhat[i];
    dbias[i] += dy[i];
    scratch[i] = dy[i] * gain[i];
    mean_d += scratch[i];
    mean_dx += scratch[i] * xhat[i];
  }
  mean_d /= static_cast<double>(n);
  mean_dx /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) dx[i] += rstd * (scratch[i] - mean_d - xhat[i] * mean_dx);
}

double normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace

// ---------------------------------------------------------------------------
// config

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::config, what); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (context_length < 1) fail("context_length must be >= 1");
  if (embedding_width < 1 || num_blocks < 1 || num_heads < 1) fail("dimensions must be positive");
  if (embedding_width % num_heads != 0) fail("embedding_width must be divisible by num_heads");
  if (prefix_slots < 0) fail("prefix_slots must be non-negative");
  if (anchor_token >= vocab_size) fail("anchor_token outside the vocabulary");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["vocab_size"] = vocab_size;
  j["context_length"] = context_length;
  j["embedding_width"] = embedding_width;
  j["num_blocks"] = num_blocks;
  j["num_heads"] = num_heads;
  j["seed"] = seed;
  j["anchor_token"] = anchor_token;
  j["prefix_slots"] = prefix_slots;
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.context_length = j.value("context_length", c.context_length);
  c.embedding_width = j.value("embedding_width", c.embedding_width);
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.seed = j.value("seed", c.seed);
  c.anchor_token = j.value("anchor_token", c.anchor_token);
  c.prefix_slots = j.value("prefix_slots", c.prefix_slots);
  return c;
}

// ---------------------------------------------------------------------------
// tensors

TensorSet::TensorSet(std::shared_ptr<const std::vector<Entry>> layout) : layout_(std::move(layout)) {
  std::size_t n = 0;
  for (const auto& e : *layout_) n = std::max(n, e.offset + e.size());
  data_.assign(n, 0.0);
}

std::span<double> TensorSet::tensor(std::size_t index) {
  const auto& e = (*layout_)[index];
  return {data_.data() + e.offset, e.size()};
}

std::span<const double> TensorSet::tensor(std::size_t index) const {
  const auto& e = (*layout_)[index];
  return {data_.data() + e.offset, e.size()};
}

std::size_t TensorSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < layout_->size(); ++i) {
    if ((*layout_)[i].name == name) return i;
  }
  throw Error(ErrorKind::shape, "no tensor named " + std::string(name));
}

std::span<const double> TensorSet::tensor(std::string_view name) const { return tensor(index_of(name)); }
std::span<double> TensorSet::tensor(std::string_view name) { return tensor(index_of(name)); }

void TensorSet::set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

bool TensorSet::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::shared_ptr<const std::vector<TensorSet::Entry>> make_layout(const ModelConfig& c) {
  c.validate();
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto C = static_cast<std::size_t>(c.embedding_width);
  const auto M = static_cast<std::size_t>(c.mlp_width());
  const auto P = static_cast<std::size_t>(c.position_table_size());
  auto layout = std::make_shared<std::vector<TensorSet::Entry>>();
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    layout->push_back({std::move(name), offset, rows, cols});
    offset += rows * cols;
  };
  add("tok_emb", V, C);
  add("pos_emb", P, C);
  for (int b = 0; b < c.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    add(p + "ln1.gain", 1, C);
    add(p + "ln1.bias", 1, C);
    add(p + "attn.qkv.weight", C, 3 * C);
    add(p + "attn.qkv.bias", 1, 3 * C);
    add(p + "attn.out.weight", C, C);
    add(p + "attn.out.bias", 1, C);
    add(p + "ln2.gain", 1, C);
    add(p + "ln2.bias", 1, C);
    add(p + "mlp.fc.weight", C, M);
    add(p + "mlp.fc.bias", 1, M);
    add(p + "mlp.proj.weight", M, C);
    add(p + "mlp.proj.bias", 1, C);
  }
  add("ln_f.gain", 1, C);
  add("ln_f.bias", 1, C);
  add("head.weight", C, V);
  add("head.bias", 1, V);
  return layout;
}

Parameters::Parameters(ModelConfig config, TensorSet tensors) : config_(config), tensors_(std::move(tensors)) {
  config_.validate();
  if (!tensors_.all_finite()) throw Error(ErrorKind::numeric, "non-finite parameter value");
}

std::string Parameters::fingerprint() const {
  Fnv1a h;
  h.update(config_.to_json());
  h.update_values(tensors_.values());
  return h.hex();
}

Parameters init(const ModelConfig& config) {
  TensorSet t(make_layout(config));
  Rng rng(derive_seed(config.seed, 1));
  const double resid_scale = 1.0 / std::sqrt(2.0 * config.num_blocks);
  for (std::size_t i = 0; i < t.count(); ++i) {
    const auto& e = t.layout()[i];
    auto values = t.tensor(i);
    const bool is_gain = e.name.ends_with(".gain");
    const bool is_bias = e.name.ends_with(".bias");
    if (is_gain) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (is_bias) {
      std::fill(values.begin(), values.end(), 0.0);
    } else {
      double std = 0.02;
      if (e.name == "head.weight") std = 0.005;
      if (e.name.ends_with("attn.out.weight") || e.name.ends_with("mlp.proj.weight")) std *= resid_scale;
      for (double& v : values) v = std * normal(rng);
    }
  }
  return Parameters(config, std::move(t));
}

// ---------------------------------------------------------------------------
// forward

std::vector<int> position_ids(const ModelConfig& config, std::span<const Token> tokens) {
  std::vector<int> ids(tokens.size());
  int anchor = -1;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (anchor < 0 && config.anchor_token >= 0 && tokens[i] == config.anchor_token) anchor = static_cast<int>(i);
    ids[i] = anchor < 0 ? static_cast<int>(i) : config.prefix_slots + static_cast<int>(i) - anchor;
  }
  return ids;
}

ForwardTrace::ForwardTrace(const ModelConfig& c, std::size_t capacity) : capacity_(capacity) {
  const std::size_t C = static_cast<std::size_t>(c.embedding_width);
  const std::size_t M = static_cast<std::size_t>(c.mlp_width());
  const std::size_t H = static_cast<std::size_t>(c.num_heads);
  const std::size_t V = static_cast<std::size_t>(c.vocab_size);
  const std::size_t T = capacity;
  tokens_.assign(T, 0);
  pos_ids_.assign(T, 0);
  blocks_.resize(static_cast<std::size_t>(c.num_blocks));
  for (auto& b : blocks_) {
    b.x.assign(T * C, 0.0);
    b.ln1_hat.assign(T * C, 0.0);
    b.ln1_rstd.assign(T, 0.0);
    b.ln1.assign(T * C, 0.0);
    b.qkv.assign(T * 3 * C, 0.0);
    b.att.assign(H * T * T, 0.0);
    b.att_out.assign(T * C, 0.0);
    b.mid.assign(T * C, 0.0);
    b.ln2_hat.assign(T * C, 0.0);
    b.ln2_rstd.assign(T, 0.0);
    b.ln2.assign(T * C, 0.0);
    b.fc.assign(T * M, 0.0);
    b.act.assign(T * M, 0.0);
  }
  final_x_.assign(T * C, 0.0);
  lnf_hat_.assign(T * C, 0.0);
  lnf_rstd_.assign(T, 0.0);
  lnf_.assign(T * C, 0.0);
  logprobs_.assign(T * V, 0.0);
}

std::span<const double> ForwardTrace::logprobs(std::size_t t) const {
  const std::size_t V = logprobs_.size() / capacity_;
  return {logprobs_.data() + t * V, V};
}

LogProbs ForwardTrace::take_logprobs() const {
  LogProbs out;
  out.length = length_;
  out.vocab = capacity_ == 0 ? 0 : logprobs_.size() / capacity_;
  out.values.assign(logprobs_.begin(), logprobs_.begin() + static_cast<long>(length_ * out.vocab));
  return out;
}

void ForwardTrace::push(const Parameters& params, Token token) { extend(params, std::span<const Token>(&token, 1)); }

void ForwardTrace::extend(const Parameters& params, std::span<const Token> new_tokens) {
  const ModelConfig& c = params.config();
  const std::size_t n = new_tokens.size();
  if (n == 0) return;
  if (length_ + n > capacity_ || length_ + n > static_cast<std::size_t>(c.context_length)) {
    throw Error(ErrorKind::length, "sequence exceeds context length " + std::to_string(c.context_length));
  }
  const std::size_t t0 = length_;
  int anchor = anchor_index_;
  std::vector<int> pids(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Token token = new_tokens[r];
    if (token < 0 || token >= c.vocab_size) throw Error(ErrorKind::shape, "token outside vocabulary");
    const int t = static_cast<int>(t0 + r);
    if (anchor < 0 && c.anchor_token >= 0 && token == c.anchor_token) anchor = t;
    pids[r] = anchor < 0 ? t : c.prefix_slots + t - anchor;
    if (pids[r] >= c.position_table_size()) throw Error(ErrorKind::length, "position id beyond the position table");
  }
  anchor_index_ = anchor;

  const TensorSet& w = params.tensors();
  const std::size_t C = static_cast<std::size_t>(c.embedding_width);
  const std::size_t M = static_cast<std::size_t>(c.mlp_width());
  const std::size_t H = static_cast<std::size_t>(c.num_heads);
  const std::size_t D = static_cast<std::size_t>(c.head_width());
  const std::size_t V = static_cast<std::size_t>(c.vocab_size);
  const std::size_t T = capacity_;

  std::vector<double> x(n * C);
  for (std::size_t r = 0; r < n; ++r) {
    tokens_[t0 + r] = new_tokens[r];
    pos_ids_[t0 + r] = pids[r];
    const double* te = w.tensor(kTokEmb).data() + static_cast<std::size_t>(new_tokens[r]) * C;
    const double* pe = w.tensor(kPosEmb).data() + static_cast<std::size_t>(pids[r]) * C;
    for (std::size_t i = 0; i < C; ++i) x[r * C + i] = te[i] + pe[i];
  }
  std::vector<double> tmp(n * C);
  std::vector<double> scores(t0 + n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));

  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    Block& b = blocks_[bi];
    auto W = [&](BlockTensor k) { return w.tensor(block_index(bi, k)).data(); };
    std::copy(x.begin(), x.end(), b.x.begin() + static_cast<long>(t0 * C));
    for (std::size_t t = t0; t < t0 + n; ++t) {
      layer_norm_row(b.x.data() + t * C, W(kLn1Gain), W(kLn1Bias), b.ln1_hat.data() + t * C, &b.ln1_rstd[t],
                     b.ln1.data() + t * C, C);
    }
    kernels::linear_rows(b.ln1.data() + t0 * C, W(kQkvW), W(kQkvB), b.qkv.data() + t0 * 3 * C, n, C, 3 * C);
    for (std::size_t t = t0; t < t0 + n; ++t) {
      const double* qkv = b.qkv.data() + t * 3 * C;
      double* ao = b.att_out.data() + t * C;
      for (std::size_t h = 0; h < H; ++h) {
        const double* q = qkv + h * D;
        double mx = -1e300;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* k = b.qkv.data() + j * 3 * C + C + h * D;
          double s = 0.0;
          for (std::size_t d = 0; d < D; ++d) s += q[d] * k[d];
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        double* prob = b.att.data() + (h * T + t) * T;
        double* out = ao + h * D;
        std::fill_n(out, D, 0.0);
        for (std::size_t j = 0; j <= t; ++j) {
          const double p = scores[j] / sum;
          prob[j] = p;
          const double* v = b.qkv.data() + j * 3 * C + 2 * C + h * D;
          for (std::size_t d = 0; d < D; ++d) out[d] += p * v[d];
        }
      }
    }
    kernels::linear_rows(b.att_out.data() + t0 * C, W(kOutW), W(kOutB), tmp.data(), n, C, C);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t t = t0 + r;
      const double* xr = b.x.data() + t * C;
      double* mid = b.mid.data() + t * C;
      for (std::size_t i = 0; i < C; ++i) mid[i] = xr[i] + tmp[r * C + i];
      layer_norm_row(mid, W(kLn2Gain), W(kLn2Bias), b.ln2_hat.data() + t * C, &b.ln2_rstd[t], b.ln2.data() + t * C,
                     C);
    }
    kernels::linear_rows(b.ln2.data() + t0 * C, W(kFcW), W(kFcB), b.fc.data() + t0 * M, n, C, M);
    for (std::size_t i = t0 * M; i < (t0 + n) * M; ++i) b.act[i] = gelu(b.fc[i]);
    kernels::linear_rows(b.act.data() + t0 * M, W(kProjW), W(kProjB), tmp.data(), n, M, C);
    for (std::size_t r = 0; r < n; ++r) {
      const double* mid = b.mid.data() + (t0 + r) * C;
      for (std::size_t i = 0; i < C; ++i) x[r * C + i] = mid[i] + tmp[r * C + i];
    }
  }
  std::copy(x.begin(), x.end(), final_x_.begin() + static_cast<long>(t0 * C));
  for (std::size_t t = t0; t < t0 + n; ++t) {
    layer_norm_row(final_x_.data() + t * C, w.tensor(final_index(c, 0)).data(), w.tensor(final_index(c, 1)).data(),
                   lnf_hat_.data() + t * C, &lnf_rstd_[t], lnf_.data() + t * C, C);
  }
  kernels::linear_rows(lnf_.data() + t0 * C, w.tensor(final_index(c, 2)).data(), w.tensor(final_index(c, 3)).data(),
                       logprobs_.data() + t0 * V, n, C, V);
  for (std::size_t t = t0; t < t0 + n; ++t) kernels::log_softmax_row(logprobs_.data() + t * V, V);
  length_ += n;
}

ForwardTrace forward_trace(const Parameters& params, std::span<const Token> tokens) {
  if (tokens.size() > static_cast<std::size_t>(params.config().context_length)) {
    throw Error(ErrorKind::length, "input of " + std::to_string(tokens.size()) + " tokens exceeds context length " +
                                       std::to_string(params.config().context_length));
  }
  ForwardTrace trace(params.config(), tokens.size());
  trace.extend(params, tokens);
  return trace;
}

LogProbs forward_logprobs(const Parameters& params, std::span<const Token> tokens) {
  return forward_trace(params, tokens).take_logprobs();
}

std::vector<Distribution> forward_distributions(const Parameters& params, std::span<const Token> tokens) {
  const LogProbs lp = forward_logprobs(params, tokens);
  std::vector<Distribution> out(lp.length);
  for (std::size_t t = 0; t < lp.length; ++t) {
    const auto row = lp.row(t);
    out[t].logp.assign(row.begin(), row.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward

void backward(const Parameters& params, const ForwardTrace& tr, std::span<const double> dlogits, Gradients& g) {
  const ModelConfig& c = params.config();
  const TensorSet& w = params.tensors();
  const std::size_t C = static_cast<std::size_t>(c.embedding_width);
  const std::size_t M = static_cast<std::size_t>(c.mlp_width());
  const std::size_t H = static_cast<std::size_t>(c.num_heads);
  const std::size_t D = static_cast<std::size_t>(c.head_width());
  const std::size_t V = static_cast<std::size_t>(c.vocab_size);
  const std::size_t T = tr.length_;
  const std::size_t cap = tr.capacity_;
  if (dlogits.size() != T * V) throw Error(ErrorKind::shape, "dlogits must be T x V");

  std::vector<double> scratch;
  std::vector<double> dres(T * C, 0.0);
  {
    std::vector<double> dlnf(C);
    double* dWu = g.tensor(final_index(c, 2)).data();
    double* dbu = g.tensor(final_index(c, 3)).data();
    const double* Wu = w.tensor(final_index(c, 2)).data();
    const double* gain = w.tensor(final_index(c, 0)).data();
    double* dgain = g.tensor(final_index(c, 0)).data();
    double* dbias = g.tensor(final_index(c, 1)).data();
    for (std::size_t t = 0; t < T; ++t) {
      const double* dl = dlogits.data() + t * V;
      std::fill(dlnf.begin(), dlnf.end(), 0.0);
      kernels::linear_row_backward_input(dl, Wu, dlnf.data(), C, V);
      kernels::linear_row_backward_weight(tr.lnf_.data() + t * C, dl, dWu, dbu, C, V);
      layer_norm_row_backward(dlnf.data(), tr.lnf_hat_.data() + t * C, tr.lnf_rstd_[t], gain, dgain, dbias,
                              dres.data() + t * C, C, scratch);
    }
  }

  std::vector<double> dact(M), dfc(M), dln(C), dao(T * C), dqkv(T * 3 * C), datt(T);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t bi = tr.blocks_.size(); bi-- > 0;) {
    const auto& b = tr.blocks_[bi];
    auto W = [&](BlockTensor k) { return w.tensor(block_index(bi, k)).data(); };
    auto G = [&](BlockTensor k) { return g.tensor(block_index(bi, k)).data(); };

    // MLP branch; dres is the gradient w.r.t. the block output.
    for (std::size_t t = 0; t < T; ++t) {
      const double* dm = dres.data() + t * C;
      std::fill(dact.begin(), dact.end(), 0.0);
      kernels::linear_row_backward_input(dm, W(kProjW), dact.data(), M, C);
      kernels::linear_row_backward_weight(b.act.data() + t * M, dm, G(kProjW), G(kProjB), M, C);
      const double* fc = b.fc.data() + t * M;
      for (std::size_t i = 0; i < M; ++i) dfc[i] = dact[i] * gelu_grad(fc[i]);
      std::fill(dln.begin(), dln.end(), 0.0);
      kernels::linear_row_backward_input(dfc.data(), W(kFcW), dln.data(), C, M);
      kernels::linear_row_backward_weight(b.ln2.data() + t * C, dfc.data(), G(kFcW), G(kFcB), C, M);
      // dres becomes d(mid): residual path plus the LayerNorm path.
      layer_norm_row_backward(dln.data(), b.ln2_hat.data() + t * C, b.ln2_rstd[t], W(kLn2Gain), G(kLn2Gain),
                              G(kLn2Bias), dres.data() + t * C, C, scratch);
    }

    // Attention branch.
    std::fill(dao.begin(), dao.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double* da = dres.data() + t * C;
      kernels::linear_row_backward_input(da, W(kOutW), dao.data() + t * C, C, C);
      kernels::linear_row_backward_weight(b.att_out.data() + t * C, da, G(kOutW), G(kOutB), C, C);
    }
    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* prob = b.att.data() + (h * cap + t) * cap;
        const double* dout = dao.data() + t * C + h * D;
        double dot = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* v = b.qkv.data() + j * 3 * C + 2 * C + h * D;
          double* dv = dqkv.data() + j * 3 * C + 2 * C + h * D;
          double s = 0.0;
          for (std::size_t d = 0; d < D; ++d) {
            s += dout[d] * v[d];
            dv[d] += prob[j] * dout[d];
          }
          datt[j] = s;
          dot += prob[j] * s;
        }
        const double* q = b.qkv.data() + t * 3 * C + h * D;
        double* dq = dqkv.data() + t * 3 * C + h * D;
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = prob[j] * (datt[j] - dot) * scale;
          const double* k = b.qkv.data() + j * 3 * C + C + h * D;
          double* dk = dqkv.data() + j * 3 * C + C + h * D;
          for (std::size_t d = 0; d < D; ++d) {
            dq[d] += ds * k[d];
            dk[d] += ds * q[d];
          }
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const double* dq = dqkv.data() + t * 3 * C;
      std::fill(dln.begin(), dln.end(), 0.0);
      kernels::linear_row_backward_input(dq, W(kQkvW), dln.data(), C, 3 * C);
      kernels::linear_row_backward_weight(b.ln1.data() + t * C, dq, G(kQkvW), G(kQkvB), C, 3 * C);
      layer_norm_row_backward(dln.data(), b.ln1_hat.data() + t * C, b.ln1_rstd[t], W(kLn1Gain), G(kLn1Gain),
                              G(kLn1Bias), dres.data() + t * C, C, scratch);
    }
  }

  double* dte = g.tensor(kTokEmb).data();
  double* dpe = g.tensor(kPosEmb).data();
  for (std::size_t t = 0; t < T; ++t) {
    double* a = dte + static_cast<std::size_t>(tr.tokens_[t]) * C;
    double* p = dpe + static_cast<std::size_t>(tr.pos_ids_[t]) * C;
    const double* d = dres.data() + t * C;
    for (std::size_t i = 0; i < C; ++i) {
      a[i] += d[i];
      p[i] += d[i];
    }
  }
}

Gradients gradient(const Parameters& params, const LossEvaluator& loss) {
  Gradients g = params.tensors().zeros_like();
  const double value = loss(params, &g);
  if (!std::isfinite(value)) throw Error(ErrorKind::numeric, "non-finite loss");
  if (!g.all_finite()) throw Error(ErrorKind::numeric, "non-finite gradient");
  return g;
}

double accumulate_ordered(std::size_t n, const Gradients& like,
                          const std::function<double(std::size_t, Gradients*)>& item, Gradients* out,
                          ExecMode mode) {
  std::vector<double> values(n, 0.0);
  if (!out) {
    for_each_index(n, mode, [&](std::size_t i) { values[i] = item(i, nullptr); });
  } else {
    std::vector<Gradients> parts(n, like.zeros_like());
    for_each_index(n, mode, [&](std::size_t i) { values[i] = item(i, &parts[i]); });
    std::vector<const double*> ptrs;
    ptrs.push_back(out->values().data());
    for (const auto& p : parts) ptrs.push_back(p.values().data());
    std::vector<double> sum(out->size());
    if (mode == ExecMode::parallel) {
      kernels::ordered_sum_parallel(ptrs, sum);
    } else {
      kernels::ordered_sum_serial(ptrs, sum);
    }
    std::copy(sum.begin(), sum.end(), out->values().begin());
  }
  double total = 0.0;
  for (double v : values) total += v;
  return total;
}

// ---------------------------------------------------------------------------
// decoding

DecodeConfig DecodeConfig::greedy(int max_new_tokens) {
  DecodeConfig c;
  c.mode = Mode::greedy;
  c.max_new_tokens = max_new_tokens;
  return c;
}

DecodeConfig DecodeConfig::sampled(std::uint64_t seed, double temperature, double top_p, int top_k,
                                   int max_new_tokens) {
  DecodeConfig c;
  c.mode = Mode::sampled;
  c.seed = seed;
  c.temperature = temperature;
  c.top_p = top_p;
  c.top_k = top_k;
  c.max_new_tokens = max_new_tokens;
  return c;
}

void DecodeConfig::validate() const {
  if (max_new_tokens < 0) throw Error(ErrorKind::config, "max_new_tokens must be non-negative");
  if (mode == Mode::sampled) {
    if (!(temperature > 0.0)) throw Error(ErrorKind::config, "temperature must be positive");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw Error(ErrorKind::config, "top_p must be in (0,1]");
    if (top_k < 0) throw Error(ErrorKind::config, "top_k must be non-negative");
  }
}

Token pick_token(std::span<const double> logp, const DecodeConfig& cfg, Rng& rng) {
  const std::size_t V = logp.size();
  if (cfg.mode == DecodeConfig::Mode::greedy) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < V; ++j) {
      if (logp[j] > logp[best]) best = j;
    }
    return static_cast<Token>(best);
  }
  std::vector<double> scaled(logp.begin(), logp.end());
  for (double& v : scaled) v /= cfg.temperature;
  kernels::log_softmax_row(scaled.data(), V);
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scaled[a] > scaled[b]; });
  std::size_t keep = V;
  if (cfg.top_k > 0) keep = std::min(keep, static_cast<std::size_t>(cfg.top_k));
  if (cfg.top_p < 1.0) {
    double cum = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
      cum += std::exp(scaled[order[i]]);
      if (cum >= cfg.top_p) {
        keep = i + 1;
        break;
      }
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) total += std::exp(scaled[order[i]]);
  const double u = uniform01(rng) * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    cum += std::exp(scaled[order[i]]);
    if (u < cum) return static_cast<Token>(order[i]);
  }
  return static_cast<Token>(order[keep - 1]);
}

TokenSequence decode(const Parameters& params, std::span<const Token> prompt, const DecodeConfig& cfg,
                     std::span<const Token> forced_prefix) {
  if (prompt.empty()) throw Error(ErrorKind::empty_input, "empty prompt");
  cfg.validate();
  const auto limit = static_cast<std::size_t>(params.config().context_length);
  if (prompt.size() > limit) throw Error(ErrorKind::length, "prompt exceeds context length");
  const std::size_t budget = static_cast<std::size_t>(cfg.max_new_tokens);
  const std::size_t cap = std::min(limit, prompt.size() + std::max(budget, forced_prefix.size()));
  ForwardTrace trace(params.config(), cap);
  trace.extend(params, prompt);
  Rng rng(derive_seed(cfg.seed, 7));
  TokenSequence response;
  while (response.size() < budget || response.size() < forced_prefix.size()) {
    Token next;
    if (response.size() < forced_prefix.size()) {
      next = forced_prefix[response.size()];
    } else {
      next = pick_token(trace.logprobs(trace.length() - 1), cfg, rng);
    }
    response.push_back(next);
    if (next == tok::EOS && response.size() >= forced_prefix.size()) break;
    if (trace.length() >= cap) break;
    trace.push(params, next);
  }
  return response;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {
constexpr std::string_view kMagic = "OPSA-CHECKPOINT 1\n";
}

std::string serialize_checkpoint(const Parameters& params) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian doubles");
  nlohmann::ordered_json header;
  header["config"] = nlohmann::json::parse(params.config().to_json());
  auto& arrays = header["arrays"];
  arrays = nlohmann::json::array();
  for (const auto& e : params.tensors().layout()) {
    arrays.push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols}, {"offset", e.offset}});
  }
  header["count"] = params.tensors().size();
  header["fingerprint"] = params.fingerprint();
  std::string out(kMagic);
  out += header.dump();
  out += '\n';
  const auto values = params.tensors().values();
  out.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
  return out;
}

Parameters parse_checkpoint(std::string_view bytes) {
  if (!bytes.starts_with(kMagic)) throw Error(ErrorKind::io, "not an opsa checkpoint");
  bytes.remove_prefix(kMagic.size());
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw Error(ErrorKind::io, "truncated checkpoint header");
  const auto header = nlohmann::json::parse(bytes.substr(0, nl));
  bytes.remove_prefix(nl + 1);
  const ModelConfig config = ModelConfig::from_json(header.at("config").dump());
  TensorSet t(make_layout(config));
  const auto& arrays = header.at("arrays");
  if (arrays.size() != t.count()) throw Error(ErrorKind::io, "checkpoint layout mismatch");
  for (std::size_t i = 0; i < t.count(); ++i) {
    const auto& e = t.layout()[i];
    if (arrays[i].at("name") != e.name || arrays[i].at("rows") != e.rows || arrays[i].at("cols") != e.cols) {
      throw Error(ErrorKind::io, "checkpoint array mismatch at " + e.name);
    }
  }
  if (bytes.size() != t.size() * sizeof(double)) throw Error(ErrorKind::io, "checkpoint payload size mismatch");
  std::memcpy(t.values().data(), bytes.data(), bytes.size());
  Parameters p(config, std::move(t));
  if (p.fingerprint() != header.at("fingerprint").get<std::string>()) {
    throw Error(ErrorKind::io, "checkpoint fingerprint mismatch");
  }
  return p;
}

void save_checkpoint(const Parameters& params, const std::string& path) {
  write_file_atomic(path, serialize_checkpoint(params));
}

Parameters load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

}  // namespace opsa::model
