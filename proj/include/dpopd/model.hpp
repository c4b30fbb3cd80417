// Copyright 2026 The dpopd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Windowed feed-forward language model with hand-derived backpropagation, and
// the frozen teachers (exact Markov oracle or a pre-trained model).
//
//   e      = concat(E[w_1], ..., E[w_k])          (k*d)
//   hidden = tanh(W1^T e + b1)                      (h)
//   logits = W2^T hidden + b2                       (V)
//
// where w_1..w_k is the last-k token window before the predicted position,
// left-padded with PAD.

#ifndef DPOPD_MODEL_HPP_
#define DPOPD_MODEL_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dpopd/data.hpp"
#include "dpopd/nn_core.hpp"
#include "dpopd/rng.hpp"

namespace dpopd {

struct ModelConfig {
  int vocab_size = 32;
  int context = 4;  // k
  int embed = 8;    // d
  int hidden = 32;  // h

  void validate() const {
    if (vocab_size < 1 || context < 1 || embed < 1 || hidden < 1) {
      throw std::invalid_argument("model config: all dimensions must be >= 1");
    }
  }

  std::size_t num_params() const {
    const auto V = static_cast<std::size_t>(vocab_size), k = static_cast<std::size_t>(context),
               d = static_cast<std::size_t>(embed), h = static_cast<std::size_t>(hidden);
    return V * d + k * d * h + h + h * V + V;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Parameter groups stored contiguously in the order E, W1, b1, W2, b2.
/// W1 is (k*d) x h and W2 is h x V, both row-major.
class Params {
 public:
  Params() = default;
  explicit Params(const ModelConfig& config) : config_(config), flat_(config.num_params(), 0.0) {
    config.validate();
  }
  Params(const ModelConfig& config, Vector flat) : config_(config), flat_(std::move(flat)) {
    config.validate();
    if (flat_.size() != config.num_params()) {
      throw std::invalid_argument("params: flat vector has " + std::to_string(flat_.size()) +
                                  " entries, config needs " + std::to_string(config.num_params()));
    }
  }

  const ModelConfig& config() const { return config_; }
  std::size_t size() const { return flat_.size(); }
  std::span<double> flat() { return flat_; }
  std::span<const double> flat() const { return flat_; }
  const Vector& vector() const { return flat_; }

  struct Layout {
    std::size_t embed, w1, b1, w2, b2, end;
  };
  Layout layout() const { return layout_of(config_); }
  static Layout layout_of(const ModelConfig& c) {
    const auto V = static_cast<std::size_t>(c.vocab_size), k = static_cast<std::size_t>(c.context),
               d = static_cast<std::size_t>(c.embed), h = static_cast<std::size_t>(c.hidden);
    Layout l{};
    l.embed = 0;
    l.w1 = l.embed + V * d;
    l.b1 = l.w1 + k * d * h;
    l.w2 = l.b1 + h;
    l.b2 = l.w2 + h * V;
    l.end = l.b2 + V;
    return l;
  }

  std::span<const double> embedding() const { return group(layout().embed, layout().w1); }
  std::span<const double> w1() const { return group(layout().w1, layout().b1); }
  std::span<const double> b1() const { return group(layout().b1, layout().w2); }
  std::span<const double> w2() const { return group(layout().w2, layout().b2); }
  std::span<const double> b2() const { return group(layout().b2, layout().end); }

  std::uint64_t hash() const {
    const std::int32_t dims[4] = {config_.vocab_size, config_.context, config_.embed, config_.hidden};
    return fnv1a64(flat_.data(), flat_.size() * sizeof(double), fnv1a64(dims, sizeof(dims)));
  }

  friend bool operator==(const Params&, const Params&) = default;

 private:
  std::span<const double> group(std::size_t begin, std::size_t end) const {
    return {flat_.data() + begin, end - begin};
  }

  ModelConfig config_;
  Vector flat_;
};

/// Last `k` tokens of seq[0, t), left-padded with PAD.
inline TokenSeq context_window(std::span<const Token> seq, std::size_t t, int k) {
  TokenSeq w(static_cast<std::size_t>(k), Vocab::kPad);
  const std::size_t n = std::min<std::size_t>(t, static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) w[static_cast<std::size_t>(k) - n + i] = seq[t - n + i];
  return w;
}

struct Activations {
  Vector embed;   // k*d
  Vector hidden;  // h, post-tanh
  Vector logits;  // V
};

inline Activations forward_activations(const Params& params, std::span<const Token> window) {
  const ModelConfig& c = params.config();
  if (window.size() != static_cast<std::size_t>(c.context)) {
    throw std::invalid_argument("forward: window has " + std::to_string(window.size()) +
                                " tokens, model context is " + std::to_string(c.context));
  }
  const auto V = static_cast<std::size_t>(c.vocab_size), d = static_cast<std::size_t>(c.embed),
             h = static_cast<std::size_t>(c.hidden), kd = window.size() * d;
  const auto E = params.embedding();
  const auto W1 = params.w1();
  const auto B1 = params.b1();
  const auto W2 = params.w2();
  const auto B2 = params.b2();

  Activations a;
  a.embed.resize(kd);
  for (std::size_t p = 0; p < window.size(); ++p) {
    const Token tok = window[p];
    if (tok < 0 || static_cast<std::size_t>(tok) >= V) {
      throw std::invalid_argument("forward: token " + std::to_string(tok) + " outside vocabulary");
    }
    std::copy_n(E.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(tok) * d), d,
                a.embed.begin() + static_cast<std::ptrdiff_t>(p * d));
  }
  a.hidden.assign(B1.begin(), B1.end());
  for (std::size_t i = 0; i < kd; ++i) {
    const double x = a.embed[i];
    if (x == 0.0) continue;
    const double* row = W1.data() + i * h;
    for (std::size_t j = 0; j < h; ++j) a.hidden[j] += x * row[j];
  }
  for (double& x : a.hidden) x = std::tanh(x);
  a.logits.assign(B2.begin(), B2.end());
  for (std::size_t j = 0; j < h; ++j) {
    const double x = a.hidden[j];
    const double* row = W2.data() + j * V;
    for (std::size_t v = 0; v < V; ++v) a.logits[v] += x * row[v];
  }
  return a;
}

/// z(.|s) for the window ending at state s.
inline Vector forward_logits(const Params& params, std::span<const Token> window) {
  return forward_activations(params, window).logits;
}

/// Logits for predicting seq[t] from seq[0, t).
inline Vector logits_at(const Params& params, std::span<const Token> seq, std::size_t t) {
  return forward_logits(params, context_window(seq, t, params.config().context));
}

/// mask[t] is true for loss-bearing positions t >= offset.
inline std::vector<bool> continuation_mask(std::size_t length, std::size_t offset) {
  std::vector<bool> mask(length, false);
  for (std::size_t t = offset; t < length; ++t) mask[t] = true;
  return mask;
}

/// Accumulates d(loss)/d(theta) for one position into `grad`, given
/// d(loss)/d(logits) at that position.
inline void backprop_position(const Params& params, std::span<const Token> window,
                              std::span<const double> grad_logits, std::span<double> grad) {
  const ModelConfig& c = params.config();
  const auto V = static_cast<std::size_t>(c.vocab_size), d = static_cast<std::size_t>(c.embed),
             h = static_cast<std::size_t>(c.hidden);
  const auto lay = params.layout();
  const Activations a = forward_activations(params, window);
  const auto W1 = params.w1();
  const auto W2 = params.w2();

  for (std::size_t v = 0; v < V; ++v) grad[lay.b2 + v] += grad_logits[v];
  Vector grad_hidden(h, 0.0);
  for (std::size_t j = 0; j < h; ++j) {
    const double hj = a.hidden[j];
    const double* w2row = W2.data() + j * V;
    double* g2row = grad.data() + lay.w2 + j * V;
    double acc = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      g2row[v] += hj * grad_logits[v];
      acc += w2row[v] * grad_logits[v];
    }
    grad_hidden[j] = acc * (1.0 - hj * hj);  // through tanh
  }
  for (std::size_t j = 0; j < h; ++j) grad[lay.b1 + j] += grad_hidden[j];
  const std::size_t kd = a.embed.size();
  for (std::size_t i = 0; i < kd; ++i) {
    const double x = a.embed[i];
    const double* w1row = W1.data() + i * h;
    double* g1row = grad.data() + lay.w1 + i * h;
    double acc = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      g1row[j] += x * grad_hidden[j];
      acc += w1row[j] * grad_hidden[j];
    }
    const std::size_t p = i / d;
    grad[lay.embed + static_cast<std::size_t>(window[p]) * d + (i % d)] += acc;
  }
}

/// Exact per-example gradient g_i: backpropagates the given logit-space
/// gradients at every masked-in position, sums them and divides by the number
/// of masked-in positions. Entries of `grad_at_logits` at masked-out positions
/// are ignored. No gradient flows through token identities.
inline Vector per_example_grad(const Params& params, std::span<const Token> sequence,
                               const std::vector<bool>& mask,
                               std::span<const Vector> grad_at_logits) {
  if (mask.size() != sequence.size() || grad_at_logits.size() != sequence.size()) {
    throw std::invalid_argument("per_example_grad: sequence, mask and gradients must have equal length");
  }
  Vector grad(params.size(), 0.0);
  std::size_t count = 0;
  const int k = params.config().context;
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    if (!mask[t]) continue;
    ++count;
    if (grad_at_logits[t].size() != static_cast<std::size_t>(params.config().vocab_size)) {
      throw std::invalid_argument("per_example_grad: logit gradient at position " + std::to_string(t) +
                                  " has wrong length");
    }
    backprop_position(params, context_window(sequence, t, k), grad_at_logits[t], grad);
  }
  if (count > 0) {
    const double inv = 1.0 / static_cast<double>(count);
    for (double& g : grad) g *= inv;
  }
  return grad;
}

/// Ancestral sampling of at most `max_new` tokens after `prefix`, stopping at
/// EOS (which is included in the result).
inline TokenSeq sample_continuation(const Params& params, std::span<const Token> prefix,
                                    std::size_t max_new, double tau, RngStream& stream) {
  if (max_new < 1) throw std::invalid_argument("sample_continuation: max_new must be >= 1");
  TokenSeq seq(prefix.begin(), prefix.end());
  TokenSeq out;
  out.reserve(max_new);
  while (out.size() < max_new) {
    const Vector p = softmax_with_temperature(logits_at(params, seq, seq.size()), tau);
    const auto tok = static_cast<Token>(sample_categorical(p, stream));
    out.push_back(tok);
    seq.push_back(tok);
    if (tok == Vocab::kEos) break;
  }
  return out;
}

/// Entries i.i.d. uniform in [-scale, scale].
inline Params init_params(const ModelConfig& config, double scale, RngStream& stream) {
  Params p(config);
  if (scale == 0.0) return p;
  for (double& x : p.flat()) x = scale * (2.0 * stream.uniform() - 1.0);
  return p;
}

// ---------------------------------------------------------------------------
// Parameter files: "DPOPDMDL", u32 version, u32 V, k, d, h, then f64 values
// (E, W1, b1, W2, b2), all little-endian.

inline constexpr char kParamsMagic[8] = {'D', 'P', 'O', 'P', 'D', 'M', 'D', 'L'};
inline constexpr std::uint32_t kParamsVersion = 1;

namespace detail {
template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}
}  // namespace detail

inline std::string serialize_params(const Params& params) {
  std::string out(kParamsMagic, sizeof(kParamsMagic));
  auto put = [&out](auto v) {
    v = detail::to_little(v);
    out.append(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  const ModelConfig& c = params.config();
  put(kParamsVersion);
  put(static_cast<std::uint32_t>(c.vocab_size));
  put(static_cast<std::uint32_t>(c.context));
  put(static_cast<std::uint32_t>(c.embed));
  put(static_cast<std::uint32_t>(c.hidden));
  for (double x : params.flat()) put(x);
  return out;
}

inline void save_params(const Params& params, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_params(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline Params load_params(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open parameter file " + path.string());
  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, kParamsMagic, 8) != 0) {
    throw std::runtime_error(path.string() + ": not a parameter file (bad magic)");
  }
  auto get = [&f, &path](auto& v) {
    if (!f.read(reinterpret_cast<char*>(&v), sizeof(v))) {
      throw std::runtime_error(path.string() + ": truncated parameter file");
    }
    v = detail::to_little(v);
  };
  std::uint32_t version = 0, V = 0, k = 0, d = 0, h = 0;
  get(version);
  if (version != kParamsVersion) {
    throw std::runtime_error(path.string() + ": unsupported format version " + std::to_string(version));
  }
  get(V);
  get(k);
  get(d);
  get(h);
  const ModelConfig config{static_cast<int>(V), static_cast<int>(k), static_cast<int>(d), static_cast<int>(h)};
  config.validate();
  Vector flat(config.num_params());
  for (double& x : flat) get(x);
  if (f.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error(path.string() + ": trailing bytes after parameters");
  }
  return Params(config, std::move(flat));
}

// ---------------------------------------------------------------------------
// Teachers

/// Exact next-token distribution of the generating chain. The control code is
/// read from the first token of the state; the history is the last `order`
/// content tokens inside the last `window` tokens, left-padded the way the
/// chain starts.
struct OracleTeacher {
  std::shared_ptr<const MarkovChainSpec> chain;
  int window = 4;
};

struct NeuralTeacher {
  std::shared_ptr<const Params> params;
};

/// Frozen teacher. Holds only const views; nothing here mutates it.
class TeacherHandle {
 public:
  explicit TeacherHandle(OracleTeacher t) : impl_(std::move(t)) {}
  explicit TeacherHandle(NeuralTeacher t) : impl_(std::move(t)) {}

  static TeacherHandle oracle(MarkovChainSpec chain, int window) {
    return TeacherHandle(OracleTeacher{std::make_shared<const MarkovChainSpec>(std::move(chain)), window});
  }
  static TeacherHandle neural(Params params) {
    return TeacherHandle(NeuralTeacher{std::make_shared<const Params>(std::move(params))});
  }

  bool is_oracle() const { return std::holds_alternative<OracleTeacher>(impl_); }
  const OracleTeacher* as_oracle() const { return std::get_if<OracleTeacher>(&impl_); }
  const NeuralTeacher* as_neural() const { return std::get_if<NeuralTeacher>(&impl_); }
  bool frozen() const { return true; }

  int vocab_size() const {
    if (const auto* o = as_oracle()) return o->chain->vocab.size;
    return as_neural()->params->config().vocab_size;
  }

  /// Hash of the teacher's defining state (chain table or parameters).
  std::uint64_t fingerprint() const {
    if (const auto* o = as_oracle()) return o->chain->hash();
    return as_neural()->params->hash();
  }

 private:
  std::variant<OracleTeacher, NeuralTeacher> impl_;
};

/// Oracle's next-token probabilities over the full vocabulary (before flooring).
inline Vector oracle_probs(const OracleTeacher& oracle, std::span<const Token> state) {
  const MarkovChainSpec& chain = *oracle.chain;
  const Vocab& vocab = chain.vocab;
  const std::size_t start = state.size() > static_cast<std::size_t>(oracle.window)
                                ? state.size() - static_cast<std::size_t>(oracle.window)
                                : 0;
  std::vector<int> history;
  for (std::size_t i = start; i < state.size(); ++i) {
    if (vocab.is_content(state[i])) history.push_back(vocab.content_index(state[i]));
  }
  const auto m = static_cast<std::size_t>(chain.order);
  if (history.size() > m) history.erase(history.begin(), history.end() - static_cast<std::ptrdiff_t>(m));
  while (history.size() < m) history.insert(history.begin(), 0);

  Vector probs(static_cast<std::size_t>(vocab.size), 0.0);
  auto add_row = [&](int code, double weight) {
    const auto row = chain.row(code, history);
    for (int o = 0; o < chain.num_outcomes(); ++o) {
      probs[static_cast<std::size_t>(chain.outcome_token(o))] += weight * row[static_cast<std::size_t>(o)];
    }
  };
  if (!state.empty() && vocab.is_code(state[0])) {
    add_row(vocab.code_index(state[0]), 1.0);
  } else {
    // No control code: uniform mixture over codes.
    for (int c = 0; c < vocab.num_codes; ++c) add_row(c, 1.0 / vocab.num_codes);
  }
  return probs;
}

/// log p_T(.|s) at distillation temperature tau_d for the state `state`
/// (the full token prefix; each teacher applies its own window).
inline Vector teacher_log_probs(const TeacherHandle& teacher, std::span<const Token> state, double tau_d) {
  if (const auto* o = teacher.as_oracle()) {
    // Floor, then p^(1/tau) renormalized == log_softmax(log p, tau).
    return log_softmax(floored_log_probs(oracle_probs(*o, state)), tau_d);
  }
  const Params& p = *teacher.as_neural()->params;
  return log_softmax(logits_at(p, state, state.size()), tau_d);
}

}  // namespace dpopd

#endif  // DPOPD_MODEL_HPP_
