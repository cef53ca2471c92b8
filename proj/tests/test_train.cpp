#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "debias/persona.hpp"
#include "debias/train.hpp"
#include "debias/world.hpp"

using namespace debias;

namespace {

struct TinyWorld {
  Vocabulary vocab;
  ModelConfig cfg;
  std::vector<TokenSequence> corpus;
};

TinyWorld make_tiny_world(int n_sentences, std::uint64_t seed) {
  auto world = build_world(WorldConfig{.seed = seed, .n_docs = 10, .pool_size = n_sentences});
  TinyWorld out;
  out.vocab = world_vocabulary();
  out.cfg.n_layers = 2;
  out.cfg.d_model = 16;
  out.cfg.n_heads = 2;
  out.cfg.d_ff = 32;
  out.cfg.vocab_size = out.vocab.size();
  out.cfg.max_seq_len = 16;
  out.cfg.seed = seed;
  for (const auto& ex : world.pool) {
    TokenSequence s = tokenize(ex.text, out.vocab);
    s.ids.push_back(out.vocab.eos);
    out.corpus.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("training lowers the loss and mostly monotonically") {
  auto w = make_tiny_world(200, 31);
  Rng rng(w.cfg.seed);
  auto start = ModelParams::init(w.cfg, rng);

  const double initial = corpus_cross_entropy(start, w.corpus);
  TrainOptions opts;
  opts.epochs = 30;
  opts.adam.lr = 3e-3;
  opts.seed = 5;
  TrainReport report;
  auto trained = train(start, w.corpus, opts, &report);
  REQUIRE(report.epoch_loss.size() == 30);
  CHECK(report.epoch_loss.back() < initial);

  // non-increasing across at least 90% of consecutive epoch pairs
  int non_increasing = 0;
  for (std::size_t i = 1; i < report.epoch_loss.size(); ++i) {
    if (report.epoch_loss[i] <= report.epoch_loss[i - 1] + 1e-12) ++non_increasing;
  }
  INFO("non-increasing pairs: " << non_increasing << "/29");
  CHECK(non_increasing >= 27);  // 90% of 29 pairs, rounded up

  // training must not mutate its input
  CHECK(corpus_cross_entropy(start, w.corpus) == initial);
}

TEST_CASE("a single sentence can be memorized") {
  auto vocab = Vocabulary::build({"newts are weaker than crows"});
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 8;
  Rng rng(2);
  auto start = ModelParams::init(cfg, rng);

  TokenSequence s = tokenize("newts are weaker than crows", vocab);
  s.ids.push_back(vocab.eos);
  std::vector<TokenSequence> corpus = {s};

  TrainOptions opts;
  opts.epochs = 300;
  opts.adam.lr = 1e-2;
  opts.seed = 3;
  auto trained = train(start, corpus, opts);
  CHECK(corpus_cross_entropy(trained, corpus) < 0.1);
}

TEST_CASE("empty corpus is rejected") {
  auto w = make_tiny_world(10, 7);
  Rng rng(1);
  auto params = ModelParams::init(w.cfg, rng);
  std::vector<TokenSequence> empty;
  CHECK_THROWS_AS(train(params, empty, TrainOptions{}), EmptyCorpus);
  CHECK_THROWS_AS(finetune_blockwise(params, empty, FinetuneOptions{}), EmptyCorpus);
}

TEST_CASE("blockwise fine-tuning touches exactly one layer per window") {
  auto w = make_tiny_world(160, 13);
  Rng rng(w.cfg.seed);
  auto start = ModelParams::init(w.cfg, rng);
  TrainOptions topts;
  topts.epochs = 3;
  topts.seed = 2;
  auto base = train(start, w.corpus, topts);

  // 160 examples / batch 16 = 10 steps per epoch; switching every 10 steps
  // means epoch one updates layer 0 only, epoch two layer 1 only
  FinetuneOptions f1;
  f1.lr = 1e-3;
  f1.epochs = 1;
  f1.block_switch_every = 10;
  f1.batch_size = 16;
  f1.train_embeddings = false;
  f1.seed = 77;
  auto after1 = finetune_blockwise(base, w.corpus, f1);

  FinetuneOptions f2 = f1;
  f2.epochs = 2;
  auto after2 = finetune_blockwise(base, w.corpus, f2);

  auto layer_equal = [](const LayerParams& a, const LayerParams& b) {
    return a.attn_q == b.attn_q && a.attn_k == b.attn_k && a.attn_v == b.attn_v &&
           a.attn_out == b.attn_out && a.mlp_in == b.mlp_in && a.mlp_out == b.mlp_out &&
           a.ln1_gain == b.ln1_gain && a.ln1_bias == b.ln1_bias && a.ln2_gain == b.ln2_gain &&
           a.ln2_bias == b.ln2_bias && a.mlp_in_bias == b.mlp_in_bias;
  };

  // window one: only layer 0 moved
  CHECK_FALSE(layer_equal(after1.layers[0], base.layers[0]));
  CHECK(layer_equal(after1.layers[1], base.layers[1]));
  CHECK(after1.token_embedding == base.token_embedding);
  CHECK(after1.head == base.head);
  CHECK(after1.position_embedding == base.position_embedding);

  // window two: layer 0 froze at its window-one state, layer 1 moved
  CHECK(layer_equal(after2.layers[0], after1.layers[0]));
  CHECK_FALSE(layer_equal(after2.layers[1], after1.layers[1]));
  CHECK(after2.token_embedding == base.token_embedding);

  // with embedding co-training on (the default), layer windows stay exclusive
  FinetuneOptions f3 = f1;
  f3.train_embeddings = true;
  auto after3 = finetune_blockwise(base, w.corpus, f3);
  CHECK_FALSE(layer_equal(after3.layers[0], base.layers[0]));
  CHECK(layer_equal(after3.layers[1], base.layers[1]));
  CHECK_FALSE(after3.token_embedding == base.token_embedding);
}

TEST_CASE("fine-tuning on a tilted pool raises its likelihood") {
  WorldConfig wc;
  wc.seed = 41;
  wc.n_docs = 150;
  wc.pool_size = 120;
  wc.base_bias_weight = 0.0;
  auto world = build_world(wc);
  auto vocab = world_vocabulary();
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 40;
  cfg.seed = 9;

  std::vector<TokenSequence> corpus;
  for (const auto& d : world.base_docs) {
    TokenSequence s = tokenize(d.text, vocab);
    s.ids.push_back(vocab.eos);
    corpus.push_back(s);
  }
  Rng rng(cfg.seed);
  auto base = train(ModelParams::init(cfg, rng), corpus, TrainOptions{.epochs = 12, .seed = 4});

  // pool drawn from the tilted persona only
  MixtureSpec tilted_only;
  tilted_only.components = {
      {1.0, world.pool_mixture.components.back().second}};
  Rng pool_rng(55);
  std::vector<TokenSequence> pool;
  for (const auto& ex : generate_corpus(tilted_only, 120, pool_rng)) {
    TokenSequence s = tokenize(ex.text, vocab);
    s.ids.push_back(vocab.eos);
    pool.push_back(s);
  }

  auto mean_ll = [&](const ModelParams& p) {
    double total = 0.0;
    for (const auto& s : pool) total += sequence_log_likelihood(p, s);
    return total / static_cast<double>(pool.size());
  };

  const double before = mean_ll(base);
  FinetuneOptions fopts;
  fopts.lr = 1e-3;
  fopts.epochs = 3;
  fopts.block_switch_every = 4;
  fopts.seed = 12;
  auto tuned = finetune_blockwise(base, pool, fopts);
  CHECK(mean_ll(tuned) > before);
}
