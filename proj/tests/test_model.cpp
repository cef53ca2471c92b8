#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "debias/model.hpp"
#include "debias/sample.hpp"
#include "debias/checkpoint.hpp"
#include "debias/train.hpp"

using namespace debias;

namespace {

Vocabulary tiny_vocab() {
  return Vocabulary::build({"men are strong", "women are strong too", "zzz filler words"});
}

ModelConfig tiny_config(const Vocabulary& v, int layers = 2, int d_model = 16, int heads = 2,
                        int d_ff = 32) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d_model;
  c.n_heads = heads;
  c.d_ff = d_ff;
  c.vocab_size = v.size();
  c.max_seq_len = 24;
  return c;
}

}  // namespace

TEST_CASE("tokenize prepends BOS and maps known words") {
  auto v = tiny_vocab();
  auto seq = tokenize("men are strong", v);
  REQUIRE(seq.length() == 4);
  CHECK(seq.ids[0] == v.bos);
  CHECK(seq.ids[1] == v.lookup("men"));
  CHECK(seq.ids[2] == v.lookup("are"));
  CHECK(seq.ids[3] == v.lookup("strong"));
}

TEST_CASE("tokenize maps out-of-vocabulary words to UNK") {
  auto v = tiny_vocab();
  auto seq = tokenize("qqqq", v);
  REQUIRE(seq.length() == 2);
  CHECK(seq.ids[1] == v.unk);
}

TEST_CASE("tokenize rejects empty input") {
  auto v = tiny_vocab();
  CHECK_THROWS_AS(tokenize("", v), EmptyInput);
  CHECK_THROWS_AS(tokenize("   \t ", v), EmptyInput);
}

TEST_CASE("vocabulary forces distinct specials including the none token") {
  auto v = Vocabulary::build({"none of these words", "none again"});
  std::map<int, int> seen;
  for (int id : {v.bos, v.eos, v.unk, v.none}) seen[id] += 1;
  CHECK(seen.size() == 4);
  CHECK(v.token(v.none) == "none");
  CHECK(v.lookup("none") == v.none);
}

TEST_CASE("forward rows exponentiate to probability one") {
  auto v = tiny_vocab();
  Rng rng(7);
  auto params = ModelParams::init(tiny_config(v), rng);
  auto seq = tokenize("men are strong", v);
  Mat lp = forward_log_probs(params, seq);
  REQUIRE(lp.cols() == seq.length());
  REQUIRE(lp.rows() == v.size());
  for (int t = 0; t < seq.length(); ++t) {
    CHECK(std::abs(lp.col(t).array().exp().sum() - 1.0) < 1e-6);
  }
}

TEST_CASE("zero-weight model is uniform at every position") {
  auto v = tiny_vocab();
  ModelConfig c = tiny_config(v, 1);
  auto params = ModelParams::zeros(c);
  auto seq = tokenize("men are strong", v);
  Mat lp = forward_log_probs(params, seq);
  const double expect = -std::log(static_cast<double>(v.size()));
  for (int t = 0; t < seq.length(); ++t) {
    for (int i = 0; i < v.size(); ++i) {
      CHECK(std::abs(lp(i, t) - expect) < 1e-9);
    }
  }
}

TEST_CASE("forward matches incremental single-token re-evaluation") {
  auto v = tiny_vocab();
  Rng rng(11);
  auto params = ModelParams::init(tiny_config(v), rng);
  auto seq = tokenize("women are strong too", v);
  Mat full = forward_log_probs(params, seq);
  // causal property: predictions at position t only depend on the prefix
  for (int t = 0; t < seq.length(); ++t) {
    TokenSequence prefix;
    prefix.ids.assign(seq.ids.begin(), seq.ids.begin() + t + 1);
    Mat part = forward_log_probs(params, prefix);
    for (int i = 0; i < v.size(); ++i) {
      CHECK(std::abs(full(i, t) - part(i, t)) < 1e-6);
    }
  }
}

TEST_CASE("forward rejects overlong sequences") {
  auto v = tiny_vocab();
  ModelConfig c = tiny_config(v);
  c.max_seq_len = 3;
  auto params = ModelParams::zeros(c);
  auto seq = tokenize("men are strong", v);
  CHECK_THROWS_AS(forward_log_probs(params, seq), SequenceTooLong);
}

TEST_CASE("sequence log likelihood equals prefix enumeration and uniform closed form") {
  auto v = tiny_vocab();

  SECTION("uniform zero model closed form") {
    auto params = ModelParams::zeros(tiny_config(v, 1));
    auto seq = tokenize("men are strong", v);  // 3 predicted tokens
    const double got = sequence_log_likelihood(params, seq);
    CHECK(std::abs(got - 3.0 * (-std::log(static_cast<double>(v.size())))) < 1e-9);
    CHECK(got <= 0.0);
  }

  SECTION("prefix enumeration oracle") {
    Rng rng(13);
    auto params = ModelParams::init(tiny_config(v), rng);
    auto seq = tokenize("women are strong too", v);
    double oracle = 0.0;
    for (int t = 1; t < seq.length(); ++t) {
      TokenSequence prefix;
      prefix.ids.assign(seq.ids.begin(), seq.ids.begin() + t);
      Mat lp = forward_log_probs(params, prefix);
      oracle += lp(seq.ids[static_cast<std::size_t>(t)], t - 1);
    }
    CHECK(std::abs(sequence_log_likelihood(params, seq) - oracle) < 1e-6);
  }

  SECTION("BOS-only sequence is degenerate") {
    auto params = ModelParams::zeros(tiny_config(v, 1));
    TokenSequence seq;
    seq.ids = {v.bos};
    CHECK_THROWS_AS(sequence_log_likelihood(params, seq), DegenerateLength);
  }
}

namespace {

// Flat views over every tensor in for_each_tensor order; Mat and Vec are both
// contiguous so a raw pointer + size suffices.
struct TensorView {
  std::string name;
  double* data;
  std::size_t size;
};

template <typename P>
std::vector<TensorView> tensor_views(P& params) {
  std::vector<TensorView> views;
  for_each_tensor(params, [&views](int, const char* name, auto& tensor) {
    views.push_back({name, tensor.data(), static_cast<std::size_t>(tensor.size())});
  });
  return views;
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
  auto v = tiny_vocab();
  Rng rng(23);
  auto params = ModelParams::init(tiny_config(v, 2, 16, 2, 32), rng);
  std::vector<TokenSequence> corpus = {tokenize("men are strong", v),
                                       tokenize("women are strong too", v)};

  std::vector<const TokenSequence*> batch;
  for (auto& s : corpus) batch.push_back(&s);
  ModelParams grads = ModelParams::zeros(params.config);
  batch_gradients(params, batch, grads);

  auto loss_at = [&]() {
    long long tokens = 0;
    double nll = 0.0;
    for (const auto& s : corpus) {
      nll -= sequence_log_likelihood(params, s);
      tokens += s.length() - 1;
    }
    return nll / static_cast<double>(tokens);
  };

  auto pviews = tensor_views(params);
  auto gviews = tensor_views(grads);
  REQUIRE(pviews.size() == gviews.size());

  const double h = 1e-4;
  Rng pick(99);
  int checked = 0;
  for (std::size_t ti = 0; ti < pviews.size(); ++ti) {
    for (int probe = 0; probe < 3; ++probe) {
      const std::size_t at = pick.uniform_index(pviews[ti].size);
      double* cell = pviews[ti].data + at;
      const double saved = *cell;
      *cell = saved + h;
      const double up = loss_at();
      *cell = saved - h;
      const double down = loss_at();
      *cell = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = gviews[ti].data[at];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      INFO(pviews[ti].name << "[" << at << "] analytic=" << analytic
                           << " numeric=" << numeric);
      CHECK(std::abs(analytic - numeric) / denom < 1e-2);
      ++checked;
    }
  }
  CHECK(checked >= 3 * static_cast<int>(pviews.size()));
}

TEST_CASE("nucleus sampling") {
  auto v = tiny_vocab();
  Rng rng(31);
  auto params = ModelParams::init(tiny_config(v), rng);
  auto prompt = tokenize("men are", v);

  SECTION("fixed seed reproduces outputs") {
    SampleOptions opts;
    Rng a(5), b(5);
    auto s1 = sample(params, prompt, opts, a, v.eos);
    auto s2 = sample(params, prompt, opts, b, v.eos);
    CHECK(s1.ids == s2.ids);
  }

  SECTION("top_p near zero is greedy") {
    Mat lp = forward_log_probs(params, prompt);
    Eigen::Index argmax;
    lp.col(prompt.length() - 1).maxCoeff(&argmax);
    Rng r(17);
    for (int i = 0; i < 50; ++i) {
      CHECK(nucleus_pick(lp.col(prompt.length() - 1), 1.0, 1e-12, r) ==
            static_cast<int>(argmax));
    }
  }

  SECTION("draws never leave the nucleus") {
    Mat lp = forward_log_probs(params, prompt);
    const Vec col = lp.col(prompt.length() - 1);
    const double top_p = 0.7;
    // independent oracle: recompute the nucleus set by sorting probabilities
    std::vector<int> order(static_cast<std::size_t>(col.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&col](int a, int b) { return col(a) > col(b); });
    std::vector<bool> in_nucleus(order.size(), false);
    double cum = 0.0;
    for (int id : order) {
      in_nucleus[static_cast<std::size_t>(id)] = true;
      cum += std::exp(col(id));
      if (cum >= top_p) break;
    }
    Rng r(77);
    for (int i = 0; i < 20000; ++i) {
      const int pick = nucleus_pick(col, 1.0, top_p, r);
      REQUIRE(in_nucleus[static_cast<std::size_t>(pick)]);
    }
  }

  SECTION("frequencies match the model distribution at top_p one") {
    // chi-squared goodness of fit against the forward row
    Mat lp = forward_log_probs(params, prompt);
    const Vec col = lp.col(prompt.length() - 1);
    const int draws = 10000;
    std::vector<int> counts(static_cast<std::size_t>(col.size()), 0);
    Rng r(123);
    for (int i = 0; i < draws; ++i) counts[static_cast<std::size_t>(nucleus_pick(col, 1.0, 1.0, r))]++;
    // merge tiny-expectation bins to keep the statistic valid
    double stat = 0.0;
    double rest_expected = 0.0;
    int rest_count = 0;
    int df = 0;
    for (Eigen::Index i = 0; i < col.size(); ++i) {
      const double expected = std::exp(col(i)) * draws;
      if (expected < 5.0) {
        rest_expected += expected;
        rest_count += counts[static_cast<std::size_t>(i)];
        continue;
      }
      const double diff = counts[static_cast<std::size_t>(i)] - expected;
      stat += diff * diff / expected;
      ++df;
    }
    if (rest_expected > 0.0) {
      const double diff = rest_count - rest_expected;
      stat += diff * diff / rest_expected;
      ++df;
    }
    df -= 1;
    REQUIRE(df >= 1);
    // p > 0.01 <=> stat below the 0.99 quantile; use the Wilson-Hilferty
    // approximation for the quantile, accurate to well under 1% here
    const double z = 2.3263478740408408;  // Phi^{-1}(0.99)
    const double dfd = static_cast<double>(df);
    const double q99 = dfd * std::pow(1.0 - 2.0 / (9.0 * dfd) + z * std::sqrt(2.0 / (9.0 * dfd)), 3.0);
    INFO("chi2 stat=" << stat << " df=" << df << " q99=" << q99);
    CHECK(stat < q99);
  }
}

TEST_CASE("embed returns deterministic mean-pooled states of width d_model") {
  auto v = tiny_vocab();
  Rng rng(41);
  auto params = ModelParams::init(tiny_config(v), rng);
  auto seq = tokenize("men are strong", v);
  Vec e1 = embed(params, seq, 1);
  Vec e2 = embed(params, seq, 1);
  CHECK(e1.size() == params.config.d_model);
  CHECK((e1 - e2).norm() == 0.0);
  CHECK_THROWS_AS(embed(params, seq, 2), LayerOutOfRange);
  CHECK_THROWS_AS(embed(params, seq, -1), LayerOutOfRange);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  auto v = tiny_vocab();
  Rng rng(53);
  auto params = ModelParams::init(tiny_config(v), rng);
  const std::string path = "test_artifacts/ckpt_roundtrip.bin";
  save_checkpoint(path, params, v, {"probe provenance line"});
  auto loaded = load_checkpoint(path);

  CHECK(loaded.params.config == params.config);
  CHECK(loaded.vocab.tokens == v.tokens);
  CHECK(loaded.vocab.none == v.none);
  REQUIRE(loaded.provenance.size() == 1);

  auto a = tensor_views(params);
  auto b = tensor_views(loaded.params);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].size == b[i].size);
    CHECK(std::memcmp(a[i].data, b[i].data, a[i].size * sizeof(double)) == 0);
  }
}
