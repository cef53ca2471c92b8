#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "debias/persona.hpp"
#include "debias/selector.hpp"
#include "debias/stats.hpp"
#include "debias/train.hpp"

using namespace debias;

namespace {

std::vector<DBScore> make_scores(const std::vector<double>& dbs) {
  std::vector<DBScore> out;
  for (std::size_t i = 0; i < dbs.size(); ++i) {
    out.push_back({static_cast<long long>(i), dbs[i], 0.0, dbs[i]});
  }
  return out;
}

}  // namespace

TEST_CASE("identical models give zero db everywhere") {
  auto vocab = Vocabulary::build({"crows like seeds", "newts like reeds"});
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 8;
  Rng rng(3);
  auto params = ModelParams::init(cfg, rng);
  std::vector<TokenSequence> pool = {tokenize("crows like seeds", vocab),
                                     tokenize("newts like reeds", vocab)};
  auto scores = score_db(params, params, pool);
  REQUIRE(scores.size() == 2);
  for (const auto& s : scores) {
    CHECK(s.db == 0.0);
    CHECK(s.db == s.ll_persona - s.ll_base);
  }
}

TEST_CASE("db is antisymmetric under swapping the two models") {
  auto vocab = Vocabulary::build({"crows like seeds", "newts like reeds"});
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 8;
  Rng r1(5), r2(6);
  auto a = ModelParams::init(cfg, r1);
  auto b = ModelParams::init(cfg, r2);
  std::vector<TokenSequence> pool = {tokenize("crows like seeds", vocab),
                                     tokenize("newts like reeds", vocab)};
  auto fwd = score_db(a, b, pool);
  auto rev = score_db(b, a, pool);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CHECK(fwd[i].db == -rev[i].db);
  }
}

TEST_CASE("score_db rejects mismatched configs and empty pools") {
  auto vocab = Vocabulary::build({"crows like seeds"});
  ModelConfig small;
  small.n_layers = 1;
  small.d_model = 16;
  small.n_heads = 2;
  small.d_ff = 32;
  small.vocab_size = vocab.size();
  small.max_seq_len = 8;
  ModelConfig big = small;
  big.d_model = 32;
  big.n_heads = 4;
  Rng rng(1);
  auto a = ModelParams::init(small, rng);
  auto b = ModelParams::init(big, rng);
  std::vector<TokenSequence> pool = {tokenize("crows like seeds", vocab)};
  CHECK_THROWS_AS(score_db(a, b, pool), ConfigMismatch);
  std::vector<TokenSequence> empty;
  CHECK_THROWS_AS(score_db(a, a, empty), EmptyPool);
}

TEST_CASE("rank_and_select orders by db with id tie-break") {
  SECTION("plain ordering") {
    auto r = rank_and_select(make_scores({3.0, 1.0, 2.0}), 2);
    CHECK(r.selected_ids == std::vector<long long>{0, 2});
    CHECK(r.ranked.size() == 3);
  }

  SECTION("ties go to the lowest example id") {
    auto r = rank_and_select(make_scores({1.0, 1.0, 1.0}), 2);
    CHECK(r.selected_ids == std::vector<long long>{0, 1});
  }

  SECTION("selecting everything is fully determined") {
    auto r = rank_and_select(make_scores({1.0, 4.0, 2.0}), 3);
    CHECK(r.selected_ids == std::vector<long long>{1, 2, 0});
  }

  SECTION("k bounds") {
    CHECK_THROWS_AS(rank_and_select(make_scores({1.0}), 0), KOutOfRange);
    CHECK_THROWS_AS(rank_and_select(make_scores({1.0}), 2), KOutOfRange);
  }

  SECTION("ranking is invariant under constant shifts") {
    auto base = rank_and_select(make_scores({3.0, 1.0, 2.0, 5.0}), 4);
    std::vector<double> shifted = {3.0 + 17.5, 1.0 + 17.5, 2.0 + 17.5, 5.0 + 17.5};
    auto moved = rank_and_select(make_scores(shifted), 4);
    CHECK(base.selected_ids == moved.selected_ids);
  }
}

TEST_CASE("knee detection") {
  SECTION("planted exponential decay with a noisy plateau") {
    // mirrors the published score curve shape: sharp drop, then flat noise
    std::vector<double> curve;
    Rng rng(12);
    for (int i = 1; i <= 200; ++i) {
      if (i <= 40) {
        curve.push_back(5.0 * std::exp(-static_cast<double>(i) / 8.0));
      } else {
        curve.push_back((rng.uniform01() - 0.5) * 0.1);
      }
    }
    std::sort(curve.begin(), curve.end(), std::greater<double>());
    const std::size_t k = detect_knee(curve);
    CHECK(k >= 25);
    CHECK(k <= 45);
  }

  SECTION("two-segment piecewise line has its knee at the joint exactly") {
    std::vector<double> curve;
    for (int i = 1; i <= 10; ++i) curve.push_back(100.0 - 10.0 * i);  // steep
    for (int i = 1; i <= 30; ++i) curve.push_back(-0.5 * i);          // shallow
    CHECK(detect_knee(curve) == 10);
  }

  SECTION("straight and flat curves have no knee") {
    std::vector<double> ramp;
    for (int i = 0; i < 50; ++i) ramp.push_back(10.0 - 0.2 * i);
    CHECK_THROWS_AS(detect_knee(ramp), FlatCurve);
    std::vector<double> flat(20, 3.0);
    CHECK_THROWS_AS(detect_knee(flat), FlatCurve);
  }

  SECTION("short input") {
    CHECK_THROWS_AS(detect_knee({1.0, 0.0}), TooShort);
  }
}

TEST_CASE("entanglement score") {
  auto v1 = [](double x) {
    Vec v(1);
    v << x;
    return v;
  };

  SECTION("hand-computed scalar example") {
    std::vector<Vec> fair = {v1(0.0), v1(2.0)};
    std::vector<Vec> biased = {v1(10.0), v1(12.0)};
    // within: 1 + 1 = 2; mean 6; denominator (25 + 25)/2 = 25
    CHECK(std::abs(entanglement_score(fair, biased) - 0.08) < 1e-12);
  }

  SECTION("singletons have zero within-set variance") {
    CHECK(entanglement_score({v1(1.0)}, {v1(5.0)}) == 0.0);
  }

  SECTION("coincident means are degenerate") {
    std::vector<Vec> same = {v1(1.0), v1(3.0)};
    CHECK_THROWS_AS(entanglement_score(same, same), DegenerateClusterMeans);
  }

  SECTION("dimension mismatch") {
    Vec a(2);
    a << 1.0, 2.0;
    CHECK_THROWS_AS(entanglement_score({a}, {v1(1.0)}), DimensionMismatch);
  }

  SECTION("translation and scale invariance") {
    Rng rng(9);
    std::vector<Vec> fair, biased;
    for (int i = 0; i < 6; ++i) {
      Vec f(3), b(3);
      for (int d = 0; d < 3; ++d) {
        f(d) = rng.normal();
        b(d) = rng.normal() + 2.0;
      }
      fair.push_back(f);
      biased.push_back(b);
    }
    const double base = entanglement_score(fair, biased);

    Vec shift(3);
    shift << 13.0, -4.0, 0.5;
    std::vector<Vec> fair_t, biased_t, fair_s, biased_s;
    for (const auto& v : fair) {
      fair_t.push_back(v + shift);
      fair_s.push_back(v * 3.7);
    }
    for (const auto& v : biased) {
      biased_t.push_back(v + shift);
      biased_s.push_back(v * 3.7);
    }
    CHECK(std::abs(entanglement_score(fair_t, biased_t) - base) < 1e-9);
    CHECK(std::abs(entanglement_score(fair_s, biased_s) - base) < 1e-9);
  }

  SECTION("pulling the sets apart strictly lowers the score") {
    Rng rng(14);
    std::vector<Vec> fair, biased_near, biased_far;
    for (int i = 0; i < 8; ++i) {
      Vec f(2), b(2);
      f << rng.normal(), rng.normal();
      b << rng.normal() + 3.0, rng.normal();
      fair.push_back(f);
      biased_near.push_back(b);
      Vec far = b;
      far(0) += 5.0;  // move along the separation axis, within-set spread fixed
      biased_far.push_back(far);
    }
    CHECK(entanglement_score(fair, biased_far) < entanglement_score(fair, biased_near));
  }
}

TEST_CASE("model-estimated db approaches the analytic ratio in a memorizable world") {
  // Four sentence types; the probe sentence has probability 0.5 under the
  // tilted persona and 0.05 under the pool mixture, so the analytic score is
  // ln 10. The base model trains on the mixture, the other model fine-tunes
  // on tilted-only text; both can nearly memorize their distributions.
  PersonaSpec plain;
  plain.name = "plain";
  plain.templates = {SentenceTemplate::parse(0.5, "gliders like seeds"),
                     SentenceTemplate::parse(0.5, "finches build nests")};
  PersonaSpec tilted;
  tilted.name = "tilted";
  tilted.is_stereotypical = true;
  tilted.templates = {SentenceTemplate::parse(0.5, "newts are weaker than crows"),
                      SentenceTemplate::parse(0.5, "moles cannot gather maps")};

  MixtureSpec mix;
  mix.components = {{0.9, plain}, {0.1, tilted}};
  mix.validate();

  const std::string probe = "newts are weaker than crows";
  CHECK(std::abs(analytic_likelihood(tilted, probe) - 0.5) < 1e-15);
  CHECK(std::abs(mixture_likelihood(mix, probe) - 0.05) < 1e-15);
  const double analytic_db = oracle_log_ratio(mix, probe);
  CHECK(std::abs(analytic_db - std::log(10.0)) < 1e-12);

  std::vector<std::string> all_text = {"gliders like seeds", "finches build nests",
                                       "newts are weaker than crows",
                                       "moles cannot gather maps"};
  auto vocab = Vocabulary::build(all_text);

  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 10;
  cfg.seed = 7;

  auto to_seq = [&vocab](const std::string& text) {
    TokenSequence s = tokenize(text, vocab);
    s.ids.push_back(vocab.eos);
    return s;
  };

  Rng data_rng(100);
  std::vector<TokenSequence> base_corpus;
  for (const auto& ex : generate_corpus(mix, 400, data_rng)) {
    base_corpus.push_back(to_seq(ex.text));
  }
  MixtureSpec tilted_only;
  tilted_only.components = {{1.0, tilted}};
  std::vector<TokenSequence> tilted_pool;
  for (const auto& ex : generate_corpus(tilted_only, 400, data_rng)) {
    tilted_pool.push_back(to_seq(ex.text));
  }

  Rng init_rng(cfg.seed);
  auto start = ModelParams::init(cfg, init_rng);
  TrainOptions topts;
  topts.epochs = 40;
  topts.adam.lr = 3e-3;
  topts.seed = 17;
  auto base = train(start, base_corpus, topts);

  FinetuneOptions fopts;
  fopts.lr = 5e-3;
  fopts.epochs = 40;
  fopts.block_switch_every = 10;
  fopts.seed = 23;
  auto finetuned = finetune_blockwise(base, tilted_pool, fopts);

  std::vector<TokenSequence> pool = {to_seq(probe)};
  auto scores = score_db(base, finetuned, pool);
  INFO("model db=" << scores[0].db << " analytic=" << analytic_db);
  CHECK(std::abs(scores[0].db - analytic_db) < 0.7);
}
