#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "gfslt/metrics.hpp"

using namespace gfslt;

namespace {

// Independent re-implementation used as an oracle: string-keyed n-gram
// histograms and a recursive (memo-free, small) LCS, structured
// differently from the library code on purpose.
std::unordered_map<std::string, long> oracle_ngrams(const TokenList& toks,
                                                    int n) {
  std::unordered_map<std::string, long> h;
  for (int i = 0; i + n <= static_cast<int>(toks.size()); ++i) {
    std::string key;
    for (int k = 0; k < n; ++k) key += toks[i + k] + "\x1f";
    h[key]++;
  }
  return h;
}

double oracle_bleu(const CorpusPair& c, int max_n, bool smooth) {
  double hyp_len = 0, ref_len = 0;
  std::vector<double> num(max_n, 0), den(max_n, 0);
  for (size_t s = 0; s < c.hypotheses.size(); ++s) {
    hyp_len += c.hypotheses[s].size();
    ref_len += c.references[s].size();
    for (int n = 1; n <= max_n; ++n) {
      auto h = oracle_ngrams(c.hypotheses[s], n);
      auto r = oracle_ngrams(c.references[s], n);
      for (auto& [k, v] : h) {
        den[n - 1] += v;
        auto it = r.find(k);
        if (it != r.end()) num[n - 1] += std::min(v, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double s = 0;
  for (int n = 1; n <= max_n; ++n) {
    double a = num[n - 1], b = den[n - 1];
    if (smooth && n > 1) {
      a += 1;
      b += 1;
    }
    if (a <= 0 || b <= 0) return 0.0;
    s += std::log(a / b);
  }
  double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(s / max_n);
}

long oracle_lcs(const TokenList& a, const TokenList& b) {
  // two-row dynamic program (the library uses a full table)
  std::vector<long> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double oracle_rouge(const CorpusPair& c) {
  double acc = 0;
  for (size_t s = 0; s < c.hypotheses.size(); ++s) {
    long l = oracle_lcs(c.hypotheses[s], c.references[s]);
    if (l == 0) continue;
    double p = double(l) / c.hypotheses[s].size();
    double r = double(l) / c.references[s].size();
    acc += 2 * p * r / (p + r);
  }
  return 100.0 * acc / c.hypotheses.size();
}

CorpusPair random_corpus(std::mt19937_64& rng) {
  static const std::vector<std::string> words{
      "the", "hand", "moves", "left", "right", "up", "down", "circle",
      "fast", "slow", "open", "closed", "sign", "stop", "go"};
  std::uniform_int_distribution<int> nsent(1, 8), len(0, 12),
      wi(0, static_cast<int>(words.size()) - 1);
  CorpusPair c;
  int n = nsent(rng);
  for (int s = 0; s < n; ++s) {
    TokenList hyp, ref;
    for (int i = 0, L = len(rng); i < L; ++i) hyp.push_back(words[wi(rng)]);
    for (int i = 0, L = std::max(1, len(rng)); i < L; ++i)
      ref.push_back(words[wi(rng)]);
    // half the time make the pair partially overlapping for realism
    if (rng() % 2 && !ref.empty()) {
      hyp = ref;
      if (rng() % 2 && !hyp.empty()) hyp[rng() % hyp.size()] = words[wi(rng)];
    }
    if (hyp.empty()) hyp.push_back(words[wi(rng)]);
    c.hypotheses.push_back(hyp);
    c.references.push_back(ref);
  }
  return c;
}

}  // namespace

TEST_CASE("bleu and rouge match the oracle on 200 random corpora") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    CorpusPair c = random_corpus(rng);
    for (int n = 1; n <= 4; ++n) {
      CHECK(std::abs(bleu(c, n, false) - oracle_bleu(c, n, false)) < 1e-9);
      CHECK(std::abs(bleu(c, n, true) - oracle_bleu(c, n, true)) < 1e-9);
    }
    CHECK(std::abs(rouge_l(c) - oracle_rouge(c)) < 1e-9);
  }
}

TEST_CASE("known-value sanity checks") {
  CorpusPair perfect;
  perfect.hypotheses = {{"the", "hand", "moves", "left", "slowly"}};
  perfect.references = perfect.hypotheses;
  for (int n = 1; n <= 4; ++n)
    CHECK(bleu(perfect, n) == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(rouge_l(perfect) == doctest::Approx(100.0).epsilon(1e-12));

  CorpusPair disjoint;
  disjoint.hypotheses = {{"a", "b", "c"}};
  disjoint.references = {{"x", "y", "z"}};
  CHECK(bleu(disjoint, 1) == 0.0);
  CHECK(rouge_l(disjoint) == 0.0);

  // brevity penalty: unigram-perfect prefix of half the reference length
  CorpusPair shorty;
  shorty.hypotheses = {{"a", "b"}};
  shorty.references = {{"a", "b", "c", "d"}};
  CHECK(bleu(shorty, 1) == doctest::Approx(100.0 * std::exp(1.0 - 2.0))
                               .epsilon(1e-12));

  CHECK_THROWS_AS(bleu(CorpusPair{}, 4), ValueError);
  CHECK_THROWS_AS(bleu(perfect, 5), ValueError);
  CorpusPair mismatched;
  mismatched.hypotheses = {{"a"}};
  CHECK_THROWS_AS(bleu(mismatched, 1), ValueError);
}

TEST_CASE("diff highlighting marks shared contiguous runs") {
  TokenList hyp{"the", "hand", "moves", "quickly", "left"};
  TokenList ref{"the", "hand", "moves", "slowly", "left"};
  auto ann = highlight_diff(hyp, ref);
  REQUIRE(ann.size() == 5);
  CHECK(ann[0].matched);
  CHECK(ann[1].matched);
  CHECK(ann[2].matched);
  CHECK(!ann[3].matched);
  CHECK(ann[4].matched);
  CHECK(render_diff_text(ann) ==
        "[[the hand moves]] quickly [[left]]");
  CHECK(render_diff_html(ann) ==
        "<span class=\"match\">the</span> <span class=\"match\">hand</span> "
        "<span class=\"match\">moves</span> quickly "
        "<span class=\"match\">left</span>");

  auto none = highlight_diff({"x", "y"}, {"a", "b"});
  for (auto& t : none) CHECK(!t.matched);
  CHECK(highlight_diff({}, ref).empty());
}
