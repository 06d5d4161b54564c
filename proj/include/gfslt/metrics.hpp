#pragma once

// Corpus-level BLEU-1..4, ROUGE-L, and highlighted hypothesis/reference
// diffs for qualitative comparison tables.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gfslt/errors.hpp"
#include "gfslt/vocab.hpp"

namespace gfslt {

using TokenList = std::vector<std::string>;

struct CorpusPair {
  std::vector<TokenList> hypotheses;
  std::vector<TokenList> references;  // one reference per hypothesis

  void validate() const {
    if (hypotheses.empty()) throw ValueError("metrics: empty corpus");
    if (hypotheses.size() != references.size())
      throw ValueError("metrics: hypothesis/reference count mismatch");
  }
};

namespace detail {

inline std::map<TokenList, long> ngram_counts(const TokenList& toks, int n) {
  std::map<TokenList, long> counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (size_t i = 0; i + n <= toks.size(); ++i)
    counts[TokenList(toks.begin() + i, toks.begin() + i + n)]++;
  return counts;
}

inline long lcs_length(const TokenList& a, const TokenList& b) {
  std::vector<std::vector<long>> dp(a.size() + 1,
                                    std::vector<long>(b.size() + 1, 0));
  for (size_t i = 1; i <= a.size(); ++i)
    for (size_t j = 1; j <= b.size(); ++j)
      dp[i][j] = a[i - 1] == b[j - 1]
                     ? dp[i - 1][j - 1] + 1
                     : std::max(dp[i - 1][j], dp[i][j - 1]);
  return dp[a.size()][b.size()];
}

}  // namespace detail

// Corpus BLEU on [0,100]: clipped n-gram precisions aggregated over the
// corpus, geometric mean over orders 1..max_n, times the brevity penalty
// exp(min(0, 1 - ref_len/hyp_len)). A zero precision at any order yields 0
// unless `smooth` adds one to the clipped and total counts for n > 1.
inline double bleu(const CorpusPair& corpus, int max_n = 4,
                   bool smooth = false) {
  corpus.validate();
  if (max_n < 1 || max_n > 4) throw ValueError("bleu: max_n must be in [1,4]");
  long hyp_len = 0, ref_len = 0;
  std::vector<long> clipped(max_n, 0), total(max_n, 0);
  for (size_t s = 0; s < corpus.hypotheses.size(); ++s) {
    const TokenList& hyp = corpus.hypotheses[s];
    const TokenList& ref = corpus.references[s];
    hyp_len += static_cast<long>(hyp.size());
    ref_len += static_cast<long>(ref.size());
    for (int n = 1; n <= max_n; ++n) {
      auto hc = detail::ngram_counts(hyp, n);
      auto rc = detail::ngram_counts(ref, n);
      for (const auto& [gram, c] : hc) {
        auto it = rc.find(gram);
        clipped[n - 1] += std::min(c, it == rc.end() ? 0L : it->second);
        total[n - 1] += c;
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_prec = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    double num = clipped[n - 1], den = total[n - 1];
    if (smooth && n > 1) {
      num += 1.0;
      den += 1.0;
    }
    if (num <= 0.0 || den <= 0.0) return 0.0;
    log_prec += std::log(num / den);
  }
  double bp = std::exp(std::min(
      0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
  return 100.0 * bp * std::exp(log_prec / max_n);
}

// Mean per-pair LCS F1 on [0,100].
inline double rouge_l(const CorpusPair& corpus) {
  corpus.validate();
  double acc = 0.0;
  for (size_t s = 0; s < corpus.hypotheses.size(); ++s) {
    const TokenList& hyp = corpus.hypotheses[s];
    const TokenList& ref = corpus.references[s];
    long l = detail::lcs_length(hyp, ref);
    if (l == 0 || hyp.empty() || ref.empty()) continue;
    double p = static_cast<double>(l) / hyp.size();
    double r = static_cast<double>(l) / ref.size();
    acc += 2.0 * p * r / (p + r);
  }
  return 100.0 * acc / corpus.hypotheses.size();
}

struct AnnotatedToken {
  std::string token;
  bool matched = false;  // part of a run shared contiguously with the ref
};

// Marks maximal hypothesis token runs that occur as contiguous runs in the
// reference.
inline std::vector<AnnotatedToken> highlight_diff(const TokenList& hypothesis,
                                                  const TokenList& reference) {
  auto occurs = [&](size_t start, size_t len) {
    if (len == 0 || reference.size() < len) return false;
    for (size_t r = 0; r + len <= reference.size(); ++r) {
      bool ok = true;
      for (size_t k = 0; k < len && ok; ++k)
        ok = reference[r + k] == hypothesis[start + k];
      if (ok) return true;
    }
    return false;
  };
  std::vector<AnnotatedToken> out;
  size_t i = 0;
  while (i < hypothesis.size()) {
    size_t best = 0;
    while (i + best < hypothesis.size() && occurs(i, best + 1)) best++;
    if (best == 0) {
      out.push_back({hypothesis[i], false});
      i += 1;
    } else {
      for (size_t k = 0; k < best; ++k) out.push_back({hypothesis[i + k], true});
      i += best;
    }
  }
  return out;
}

// Matched runs wrapped in [[...]].
inline std::string render_diff_text(const std::vector<AnnotatedToken>& toks) {
  std::string out;
  bool in_run = false;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (!out.empty()) out += ' ';
    if (toks[i].matched && !in_run) {
      out += "[[";
      in_run = true;
    }
    out += toks[i].token;
    if (in_run && (i + 1 == toks.size() || !toks[i + 1].matched)) {
      out += "]]";
      in_run = false;
    }
  }
  return out;
}

inline std::string render_diff_html(const std::vector<AnnotatedToken>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (!out.empty()) out += ' ';
    if (toks[i].matched)
      out += "<span class=\"match\">" + toks[i].token + "</span>";
    else
      out += toks[i].token;
  }
  return out;
}

}  // namespace gfslt
