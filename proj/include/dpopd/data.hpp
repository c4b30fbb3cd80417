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

// Synthetic private corpora drawn from control-code-conditioned Markov chains,
// plus the on-disk corpus format.
//
// Corpus file layout (UTF-8):
//   line 1   {"vocab_size":V,"num_codes":K,"order":m,"split":"train",
//             "chain_hash":"<16 hex>","seed":S,"n":count}
//   line 2.. id<TAB>code<TAB>prompt tokens<TAB>reference tokens
// Token lists are space separated base-10 integers; the reference may be
// empty. A missing control code is written as "-".

#ifndef DPOPD_DATA_HPP_
#define DPOPD_DATA_HPP_

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpopd/nn_core.hpp"
#include "dpopd/rng.hpp"

namespace dpopd {

/// Token layout: PAD, BOS, EOS, then K control codes, then content tokens.
struct Vocab {
  static constexpr Token kPad = 0;
  static constexpr Token kBos = 1;
  static constexpr Token kEos = 2;
  static constexpr Token kFirstCode = 3;

  int size = 0;
  int num_codes = 0;

  Vocab() = default;
  Vocab(int vocab_size, int codes) : size(vocab_size), num_codes(codes) {
    if (codes < 1) throw std::invalid_argument("vocab: need at least one control code");
    if (vocab_size < kFirstCode + codes + 2) {
      throw std::invalid_argument("vocab: size " + std::to_string(vocab_size) +
                                  " too small for " + std::to_string(codes) +
                                  " control codes (need >= " +
                                  std::to_string(kFirstCode + codes + 2) + ")");
    }
  }

  int num_content() const { return size - kFirstCode - num_codes; }
  Token code_token(int code) const { return kFirstCode + code; }
  Token content_token(int index) const { return kFirstCode + num_codes + index; }
  bool is_code(Token t) const { return t >= kFirstCode && t < kFirstCode + num_codes; }
  bool is_content(Token t) const { return t >= kFirstCode + num_codes && t < size; }
  int code_index(Token t) const { return t - kFirstCode; }
  int content_index(Token t) const { return t - kFirstCode - num_codes; }

  friend bool operator==(const Vocab&, const Vocab&) = default;
};

/// Per-(control code, content m-gram) next-token tables over content ∪ {EOS}.
/// Generation starts from the m-gram made of the first content token repeated.
struct MarkovChainSpec {
  Vocab vocab;
  int order = 1;
  double concentration = 0.5;
  bool deterministic = false;
  std::uint64_t seed = 0;
  /// Rows laid out by (code, history) with history digits most-significant
  /// first; each row has num_outcomes() entries, EOS last.
  std::vector<double> table;

  int num_outcomes() const { return vocab.num_content() + 1; }
  int eos_outcome() const { return vocab.num_content(); }
  std::size_t rows_per_code() const {
    std::size_t r = 1;
    for (int i = 0; i < order; ++i) r *= static_cast<std::size_t>(vocab.num_content());
    return r;
  }
  std::size_t num_rows() const { return rows_per_code() * static_cast<std::size_t>(vocab.num_codes); }

  /// `history` holds exactly `order` content indices, oldest first.
  std::size_t row_index(int code, std::span<const int> history) const {
    std::size_t r = 0;
    for (int h : history) r = r * static_cast<std::size_t>(vocab.num_content()) + static_cast<std::size_t>(h);
    return static_cast<std::size_t>(code) * rows_per_code() + r;
  }
  std::span<const double> row(std::size_t index) const {
    return {table.data() + index * static_cast<std::size_t>(num_outcomes()),
            static_cast<std::size_t>(num_outcomes())};
  }
  std::span<const double> row(int code, std::span<const int> history) const {
    return row(row_index(code, history));
  }

  Token outcome_token(int outcome) const {
    return outcome == eos_outcome() ? Vocab::kEos : vocab.content_token(outcome);
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64("dpopd-chain-v1");
    const std::int32_t dims[4] = {vocab.size, vocab.num_codes, order, deterministic ? 1 : 0};
    h = fnv1a64(dims, sizeof(dims), h);
    return fnv1a64(table.data(), table.size() * sizeof(double), h);
  }
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Draws every row from a symmetric Dirichlet(concentration). EOS mass is capped
/// at 0.2 by rescaling the remaining entries. With `deterministic` each row is
/// replaced by a one-hot on its argmax (the concentration -> 0 limit).
inline MarkovChainSpec generate_chain(const Vocab& vocab, int order, double concentration,
                                      RngStream& stream, bool deterministic = false) {
  if (order < 1 || order > 3) throw std::invalid_argument("generate_chain: order must be 1, 2 or 3");
  if (!(concentration > 0.0)) throw std::invalid_argument("generate_chain: concentration must be > 0");
  constexpr double kEosCap = 0.2;
  MarkovChainSpec spec;
  spec.vocab = vocab;
  spec.order = order;
  spec.concentration = concentration;
  spec.deterministic = deterministic;
  spec.seed = stream.seed();
  const auto outcomes = static_cast<std::size_t>(spec.num_outcomes());
  spec.table.assign(spec.num_rows() * outcomes, 0.0);
  for (std::size_t r = 0; r < spec.num_rows(); ++r) {
    std::span<double> row(spec.table.data() + r * outcomes, outcomes);
    double total = 0.0;
    for (double& x : row) {
      x = stream.gamma(concentration);
      total += x;
    }
    if (total <= 0.0) {
      // Every gamma draw underflowed; fall back to uniform.
      for (double& x : row) x = 1.0;
      total = static_cast<double>(outcomes);
    }
    for (double& x : row) x /= total;
    double& eos = row[outcomes - 1];
    if (eos > kEosCap) {
      const double rest = 1.0 - eos;
      for (std::size_t o = 0; o + 1 < outcomes; ++o) {
        row[o] = rest > 0.0 ? row[o] * (1.0 - kEosCap) / rest
                            : (1.0 - kEosCap) / static_cast<double>(outcomes - 1);
      }
      eos = kEosCap;
    }
    if (deterministic) {
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      std::fill(row.begin(), row.end(), 0.0);
      row[best] = 1.0;
    }
  }
  return spec;
}

inline MarkovChainSpec generate_chain(int vocab_size, int order, int num_codes,
                                      double concentration, RngStream& stream,
                                      bool deterministic = false) {
  return generate_chain(Vocab(vocab_size, num_codes), order, concentration, stream, deterministic);
}

struct Example {
  std::uint64_t id = 0;
  std::optional<Token> control_code;
  TokenSeq prompt;
  TokenSeq reference;

  friend bool operator==(const Example&, const Example&) = default;
};

struct CorpusHeader {
  int vocab_size = 0;
  int num_codes = 0;
  int order = 0;
  std::string split = "train";
  std::string chain_hash;
  std::uint64_t seed = 0;

  Vocab vocab() const { return Vocab(vocab_size, num_codes); }
  friend bool operator==(const CorpusHeader&, const CorpusHeader&) = default;
};

/// One split of a corpus (one file on disk).
struct Corpus {
  CorpusHeader header;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Train/valid/test splits from one chain, with disjoint record ids.
struct SplitCorpus {
  Corpus train;
  Corpus valid;
  Corpus test;

  /// N, the number of private training records.
  std::size_t num_train() const { return train.size(); }
};

/// Model input [c, BOS, x...] and the index where the continuation starts.
struct ModelInput {
  TokenSeq tokens;
  std::size_t continuation_offset = 0;
};

inline ModelInput build_model_input(const Example& example) {
  ModelInput in;
  in.tokens.reserve(example.prompt.size() + 2);
  if (example.control_code) in.tokens.push_back(*example.control_code);
  in.tokens.push_back(Vocab::kBos);
  in.tokens.insert(in.tokens.end(), example.prompt.begin(), example.prompt.end());
  in.continuation_offset = in.tokens.size();
  return in;
}

namespace detail {

// Rolls the chain once. Returns false if EOS arrived before `prompt_len`.
inline bool roll_sequence(const MarkovChainSpec& spec, int code, std::size_t prompt_len,
                          std::size_t total_len, RngStream& stream, TokenSeq& out) {
  out.clear();
  std::vector<int> history(static_cast<std::size_t>(spec.order), 0);
  for (std::size_t t = 0; t < total_len; ++t) {
    const auto outcome = static_cast<int>(sample_categorical(spec.row(code, history), stream));
    out.push_back(spec.outcome_token(outcome));
    if (outcome == spec.eos_outcome()) return t >= prompt_len;
    history.erase(history.begin());
    history.push_back(outcome);
  }
  return true;
}

}  // namespace detail

/// Samples `n` examples with sequential ids starting at `first_id`.
inline std::vector<Example> sample_examples(const MarkovChainSpec& spec, std::size_t n,
                                            std::size_t prompt_len, std::size_t total_len,
                                            RngStream& stream, std::uint64_t first_id = 0) {
  if (prompt_len < 1 || prompt_len >= total_len) {
    throw std::invalid_argument("sample_corpus: need 1 <= prompt_len < total_len");
  }
  constexpr int kMaxRetries = 100;
  std::vector<Example> out;
  out.reserve(n);
  TokenSeq seq;
  for (std::size_t i = 0; i < n; ++i) {
    const int code = static_cast<int>(stream.uniform() * spec.vocab.num_codes) % spec.vocab.num_codes;
    int attempt = 0;
    while (!detail::roll_sequence(spec, code, prompt_len, total_len, stream, seq)) {
      if (++attempt >= kMaxRetries) {
        throw std::runtime_error("sample_corpus: EOS before prompt end in " +
                                 std::to_string(kMaxRetries) + " consecutive draws");
      }
    }
    Example ex;
    ex.id = first_id + i;
    ex.control_code = spec.vocab.code_token(code);
    ex.prompt.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(prompt_len));
    ex.reference.assign(seq.begin() + static_cast<std::ptrdiff_t>(prompt_len), seq.end());
    out.push_back(std::move(ex));
  }
  return out;
}

inline CorpusHeader make_header(const MarkovChainSpec& spec, std::string split) {
  CorpusHeader h;
  h.vocab_size = spec.vocab.size;
  h.num_codes = spec.vocab.num_codes;
  h.order = spec.order;
  h.split = std::move(split);
  h.chain_hash = hex64(spec.hash());
  h.seed = spec.seed;
  return h;
}

inline SplitCorpus sample_corpus(const MarkovChainSpec& spec, std::size_t n_train,
                                 std::size_t n_valid, std::size_t n_test, std::size_t prompt_len,
                                 std::size_t total_len, RngStream& stream) {
  SplitCorpus c;
  c.train.header = make_header(spec, "train");
  c.valid.header = make_header(spec, "valid");
  c.test.header = make_header(spec, "test");
  c.train.examples = sample_examples(spec, n_train, prompt_len, total_len, stream, 0);
  c.valid.examples = sample_examples(spec, n_valid, prompt_len, total_len, stream, n_train);
  c.test.examples = sample_examples(spec, n_test, prompt_len, total_len, stream, n_train + n_valid);
  return c;
}

// ---------------------------------------------------------------------------
// File I/O

class CorpusError : public std::runtime_error {
 public:
  CorpusError(const std::string& path, std::size_t line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void append_tokens(std::string& out, const TokenSeq& seq) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(seq[i]);
  }
}

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace detail

inline std::string serialize_corpus(const Corpus& corpus) {
  nlohmann::ordered_json header;
  header["vocab_size"] = corpus.header.vocab_size;
  header["num_codes"] = corpus.header.num_codes;
  header["order"] = corpus.header.order;
  header["split"] = corpus.header.split;
  header["chain_hash"] = corpus.header.chain_hash;
  header["seed"] = corpus.header.seed;
  header["n"] = corpus.examples.size();
  std::string out = header.dump();
  out += '\n';
  for (const Example& ex : corpus.examples) {
    out += std::to_string(ex.id);
    out += '\t';
    out += ex.control_code ? std::to_string(*ex.control_code) : std::string("-");
    out += '\t';
    detail::append_tokens(out, ex.prompt);
    out += '\t';
    detail::append_tokens(out, ex.reference);
    out += '\n';
  }
  return out;
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string text = serialize_corpus(corpus);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline Corpus parse_corpus(std::string_view text, const std::string& name = "<corpus>") {
  Corpus corpus;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  std::uint64_t declared_n = 0;
  Vocab vocab;
  while (pos < text.size()) {
    ++line_no;
    const auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) throw CorpusError(name, line_no, "truncated line (missing newline)");
    const std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line_no == 1) {
      nlohmann::json h;
      try {
        h = nlohmann::json::parse(line);
        for (const auto& key : {"vocab_size", "num_codes", "order", "split", "chain_hash", "seed", "n"}) {
          if (!h.contains(key)) throw CorpusError(name, 1, std::string("header missing \"") + key + "\"");
        }
        corpus.header.vocab_size = h.at("vocab_size").get<int>();
        corpus.header.num_codes = h.at("num_codes").get<int>();
        corpus.header.order = h.at("order").get<int>();
        corpus.header.split = h.at("split").get<std::string>();
        corpus.header.chain_hash = h.at("chain_hash").get<std::string>();
        corpus.header.seed = h.at("seed").get<std::uint64_t>();
        declared_n = h.at("n").get<std::uint64_t>();
        vocab = corpus.header.vocab();
      } catch (const CorpusError&) {
        throw;
      } catch (const std::exception& e) {
        throw CorpusError(name, 1, std::string("bad header: ") + e.what());
      }
      continue;
    }
    const auto fields = detail::split_view(line, '\t');
    if (fields.size() != 4) {
      throw CorpusError(name, line_no, "expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    }
    Example ex;
    if (!detail::parse_int(fields[0], ex.id)) throw CorpusError(name, line_no, "bad record id");
    if (fields[1] != "-") {
      Token code = 0;
      if (!detail::parse_int(fields[1], code)) throw CorpusError(name, line_no, "bad control code");
      if (!vocab.is_code(code)) throw CorpusError(name, line_no, "token " + std::to_string(code) + " is not a control code");
      ex.control_code = code;
    }
    auto parse_seq = [&](std::string_view field, TokenSeq& out, const char* what) {
      if (field.empty()) return;
      for (auto tok : detail::split_view(field, ' ')) {
        Token t = 0;
        if (!detail::parse_int(tok, t)) throw CorpusError(name, line_no, std::string("bad token in ") + what);
        if (t < 0 || t >= vocab.size) {
          throw CorpusError(name, line_no, "token " + std::to_string(t) + " outside vocabulary of size " +
                                               std::to_string(vocab.size));
        }
        out.push_back(t);
      }
    };
    parse_seq(fields[2], ex.prompt, "prompt");
    parse_seq(fields[3], ex.reference, "reference");
    if (ex.prompt.empty()) throw CorpusError(name, line_no, "empty prompt");
    corpus.examples.push_back(std::move(ex));
  }
  if (line_no == 0) throw CorpusError(name, 1, "empty file");
  if (corpus.examples.size() != declared_n) {
    throw CorpusError(name, line_no, "header declares " + std::to_string(declared_n) + " records, found " +
                                         std::to_string(corpus.examples.size()));
  }
  for (std::size_t i = 1; i < corpus.examples.size(); ++i) {
    if (corpus.examples[i].id <= corpus.examples[i - 1].id) {
      throw CorpusError(name, i + 2, "record ids must be strictly increasing");
    }
  }
  return corpus;
}

inline Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open corpus " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_corpus(ss.str(), path.string());
}

/// Throws IntegrityError when the corpus was not generated from `spec`.
inline void verify_chain(const Corpus& corpus, const MarkovChainSpec& spec) {
  const std::string expected = hex64(spec.hash());
  if (corpus.header.chain_hash != expected) {
    throw IntegrityError("chain hash mismatch: corpus header has " + corpus.header.chain_hash +
                         ", recomputed " + expected);
  }
  if (corpus.header.vocab() != spec.vocab || corpus.header.order != spec.order) {
    throw IntegrityError("corpus vocabulary/order does not match the chain");
  }
}

}  // namespace dpopd

#endif  // DPOPD_DATA_HPP_
