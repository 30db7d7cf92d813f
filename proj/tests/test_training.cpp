#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "fewner/inference.hpp"
#include "fewner/training.hpp"

using namespace fewner;

namespace {

NerModel tiny_model(std::uint64_t seed = 1, bool two_encoders = true) {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden = 8;
  cfg.vocab_size = 128;
  cfg.dropout = 0.0;
  cfg.two_encoders = two_encoders;
  return NerModel::make(cfg, seed);
}

Episode toy_episode() {
  Episode ep;
  ep.support = {
      {{"anna", "works", "at", "acme"}, {"person", "O", "O", "company"}},
      {{"boris", "joined", "globex", "inc"}, {"person", "O", "company", "company"}},
  };
  ep.query = {
      {{"clara", "left", "initech"}, {"person", "O", "company"}},
  };
  ep.type_set = make_type_set({"person", "company"});
  ep.n_way = 2;
  ep.k_shot = 2;
  return ep;
}

TrainConfig fast_config() {
  TrainConfig cfg;
  cfg.encoder_lr = 5e-3;
  cfg.decoder_lr = 5e-3;
  cfg.max_steps = 200;
  cfg.warmup_fraction = 0.1;
  return cfg;
}

}  // namespace

TEST_CASE("warmup schedule matches the closed form pointwise") {
  TrainConfig cfg;
  cfg.max_steps = 100;
  cfg.warmup_fraction = 0.1;
  CHECK(schedule_multiplier(0, cfg) == doctest::Approx(0.1));  // 1/warmup_steps
  CHECK(schedule_multiplier(9, cfg) == doctest::Approx(1.0));  // warmup end peak
  CHECK(schedule_multiplier(10, cfg) == doctest::Approx(90.0 / 90.0));
  CHECK(schedule_multiplier(55, cfg) == doctest::Approx(45.0 / 90.0));
  CHECK(schedule_multiplier(99, cfg) == doctest::Approx(1.0 / 90.0));
  CHECK(schedule_multiplier(100, cfg) == doctest::Approx(0.0));
  CHECK(schedule_multiplier(500, cfg) == doctest::Approx(0.0));

  // peak is at warmup end and the curve is non-increasing afterwards
  double prev = schedule_multiplier(9, cfg);
  for (int s = 10; s <= 100; ++s) {
    const double cur = schedule_multiplier(s, cfg);
    CHECK(cur <= prev + 1e-12);
    prev = cur;
  }
}

TEST_CASE("contrastive loss closed forms and oracle") {
  SUBCASE("symmetric positive/negative distances cancel to zero per anchor") {
    ContrastiveBatch batch;
    // dim 4, scale 1/2: dot(u0,u1)=2 -> d=1; orthogonal third span
    batch.embeddings.push_back({{1.0, 1.0, 0.0, 0.0}, {0, 0}});
    batch.embeddings.push_back({{1.0, 1.0, 0.0, 0.0}, {1, 1}});
    batch.embeddings.push_back({{0.0, 0.0, 1.0, 0.0}, {2, 2}});
    batch.labels = {"a", "a", "b"};

    // anchor 0 and anchor 1 each see positive d=1 and negative d=0; the
    // lone "b" anchor has no positive and is skipped
    std::int64_t skipped = 0;
    const double loss = contrastive_loss(batch, 0.0, &skipped);
    CHECK(skipped == 1);
    CHECK(loss == doctest::Approx(2.0 * -std::log(std::exp(1.0) / 1.0)).epsilon(1e-12));
    CHECK(loss < 0.0);  // the ratio form can go negative
  }

  SUBCASE("single-anchor closed forms via the tape op") {
    Matrix sims(3, 3, 0.0);
    sims(0, 1) = 1.0;  // positive
    sims(0, 2) = 0.0;  // negative
    ad::Tape tape;
    const auto node = tape.contrastive_nll(tape.leaf(sims), {{0, {1}, {2}}});
    CHECK(tape.scalar(node) == doctest::Approx(-1.0).epsilon(1e-12));

    Matrix tie(3, 3, 0.7);
    ad::Tape t2;
    CHECK(t2.scalar(t2.contrastive_nll(t2.leaf(tie), {{0, {1}, {2}}})) ==
          doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("random batches match the direct double-loop evaluation") {
    std::mt19937_64 rng(61);
    for (int trial = 0; trial < 30; ++trial) {
      ContrastiveBatch batch;
      const std::size_t dim = 5;
      for (int i = 0; i < 6; ++i) {
        SpanEmbedding se;
        se.u.resize(dim);
        for (auto& x : se.u) x = std::normal_distribution<double>()(rng);
        se.span = {i, i};
        batch.embeddings.push_back(se);
        batch.labels.push_back(i % 2 == 0 ? "a" : "b");
      }
      const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
      double direct = 0.0;
      for (std::size_t i = 0; i < 6; ++i) {
        double pos = 0.0, neg = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
          if (j == i) continue;
          double d = 0.0;
          for (std::size_t k = 0; k < dim; ++k)
            d += batch.embeddings[i].u[k] * batch.embeddings[j].u[k];
          d *= scale;
          if (batch.labels[j] == batch.labels[i])
            pos += std::exp(d);
          else
            neg += std::exp(d);
        }
        direct += -std::log(pos / neg);
      }
      CHECK(contrastive_loss(batch) == doctest::Approx(direct).epsilon(1e-7));
    }
  }

  SUBCASE("no qualifying anchors returns zero") {
    ContrastiveBatch batch;
    batch.embeddings.push_back({{1.0, 0.0}, {0, 0}});
    batch.embeddings.push_back({{0.0, 1.0}, {1, 1}});
    batch.labels = {"a", "b"};  // each anchor lacks a positive
    std::int64_t skipped = 0;
    CHECK(contrastive_loss(batch, 0.0, &skipped) == 0.0);
    CHECK(skipped == 2);
  }
}

TEST_CASE("contrastive gradients match finite differences") {
  std::mt19937_64 rng(67);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix u0(5, 4);
    u0.fill_normal(rng, 1.0);
    const std::vector<std::string> labels = {"a", "b", "a", "b", "a"};
    const double scale = 0.5;

    auto loss_of = [&](const Matrix& u) {
      ContrastiveBatch b;
      for (std::size_t i = 0; i < u.rows(); ++i) {
        SpanEmbedding se;
        se.u.assign(u.row(i), u.row(i) + u.cols());
        b.embeddings.push_back(se);
        b.labels.push_back(labels[i]);
      }
      return contrastive_loss(b, scale);
    };

    ad::Tape tape;
    const auto leaf = tape.leaf(u0);
    const auto sims = tape.scale(tape.matmul_nt(leaf, leaf), scale);
    const auto loss = tape.contrastive_nll(sims, detail::anchor_sets(labels, nullptr));
    tape.backward(loss);

    const double eps = 1e-4;
    for (std::size_t k = 0; k < u0.size(); ++k) {
      Matrix up = u0, dn = u0;
      up.data()[k] += eps;
      dn.data()[k] -= eps;
      const double fd = (loss_of(up) - loss_of(dn)) / (2 * eps);
      const double ad_g = tape.grad(leaf).data()[k];
      const double denom = std::max({std::abs(fd), std::abs(ad_g), 1e-8});
      CHECK(std::abs(fd - ad_g) / denom < 1e-4);
    }
  }
}

TEST_CASE("train_step reduces the loss on a fixed episode") {
  auto model = tiny_model(5);
  const auto ep = toy_episode();
  const auto cfg = fast_config();
  TrainerState state(cfg.seed);

  std::vector<double> losses;
  for (int step = 0; step < 200; ++step)
    losses.push_back(train_step(model, ep, cfg, step, state));

  // trend check over 50-step windows
  auto window_mean = [&](int begin) {
    double s = 0.0;
    for (int i = begin; i < begin + 50; ++i) s += losses[static_cast<std::size_t>(i)];
    return s / 50.0;
  };
  CHECK(window_mean(150) < window_mean(0));
  CHECK(window_mean(150) < window_mean(50));
  CHECK(losses.back() < 0.25 * losses.front());
}

TEST_CASE("training is bitwise deterministic for a fixed seed") {
  auto run = [&] {
    auto model = tiny_model(7);
    const auto ep = toy_episode();
    TrainConfig cfg = fast_config();
    cfg.seed = 9;
    TrainerState state(cfg.seed);
    std::vector<double> losses;
    for (int step = 0; step < 40; ++step)
      losses.push_back(train_step(model, ep, cfg, step, state));
    return losses;
  };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);
}

TEST_CASE("degenerate episodes keep the span loss and skip the classifier") {
  auto model = tiny_model(11);
  Episode ep;
  ep.support = {{{"just", "plain", "words"}, {"O", "O", "O"}}};
  ep.type_set = make_type_set({"person"});
  ep.n_way = 1;
  ep.k_shot = 1;
  std::mt19937_64 rng(0);
  const auto breakdown = episode_loss(model, ep, fast_config(), false, rng);
  CHECK(breakdown.span > 0.0);
  CHECK(breakdown.cls == 0.0);
  CHECK(breakdown.contrastive == 0.0);
}

TEST_CASE("total loss equals the sum of its components with contrastive on") {
  auto model = tiny_model(13);
  auto ep = toy_episode();
  TrainConfig cfg = fast_config();
  cfg.use_contrastive = true;
  std::mt19937_64 rng(1);
  const auto breakdown = episode_loss(model, ep, cfg, false, rng);
  CHECK(breakdown.contrastive != 0.0);
  CHECK(breakdown.total() ==
        doctest::Approx(breakdown.span + breakdown.cls + breakdown.contrastive)
            .epsilon(1e-12));

  // 1-shot dual encoding requires dropout, so run one training step too
  ep.k_shot = 1;
  TrainerState state(3);
  auto model2 = tiny_model(13);
  const double loss = train_step(model2, ep, cfg, 0, state);
  CHECK(std::isfinite(loss));
}

TEST_CASE("fine-tuning stops on threshold or cap, never later") {
  const auto ep = toy_episode();
  TrainConfig cfg = fast_config();
  FinetuneConfig ft;

  SUBCASE("a huge threshold fires on the very first step") {
    auto model = tiny_model(17);
    FinetuneConfig easy;
    easy.loss_threshold = 1e9;
    const auto res = finetune_on_support(model, ep.support, ep.type_set, ep.k_shot,
                                         cfg, easy, 1);
    CHECK(res.steps_taken == 1);
    CHECK(res.reason == StopReason::threshold);
  }

  SUBCASE("an unreachable threshold runs exactly to the cap") {
    auto model = tiny_model(17);
    FinetuneConfig hard;
    hard.loss_threshold = 1e-12;
    hard.max_finetune_steps = 7;
    const auto res = finetune_on_support(model, ep.support, ep.type_set, ep.k_shot,
                                         cfg, hard, 1);
    CHECK(res.steps_taken == 7);
    CHECK(res.reason == StopReason::cap);
  }

  SUBCASE("empty support raises") {
    auto model = tiny_model(17);
    CHECK_THROWS_AS(
        finetune_on_support(model, {}, ep.type_set, ep.k_shot, cfg, ft, 1),
        ContractError);
  }
}

TEST_CASE("checkpoint round trip restores parameters bitwise") {
  const std::string path = "/tmp/fewner_ckpt_test.bin";
  auto model = tiny_model(19);
  CheckpointMeta meta;
  meta.step = 42;
  meta.seed = 19;
  save_checkpoint(model, path, meta);

  CheckpointMeta restored_meta;
  const auto restored = load_checkpoint(path, &restored_meta);
  CHECK(restored_meta.step == 42);
  CHECK(restored_meta.seed == 19);
  REQUIRE(restored.params().size() == model.params().size());
  for (const auto& [name, tensor] : model.params())
    CHECK(tensor == restored.params().get(name));

  // identical behavior on a probe input
  const auto ts = make_type_set({"person", "company"});
  const auto pi = model.prompt({"anna", "visited", "acme"}, ts);
  const auto a = encode(model.classifier_encoder(), pi);
  const auto b = encode(restored.classifier_encoder(), pi);
  CHECK(a.h_n == b.h_n);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint corruption and version mismatch are loud") {
  const std::string path = "/tmp/fewner_ckpt_bad.bin";
  auto model = tiny_model(23);
  save_checkpoint(model, path);

  // truncate the file
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::remove(path.c_str());
}

TEST_CASE("checkpoints change on disk as training progresses") {
  const std::string p0 = "/tmp/fewner_ckpt_step0.bin";
  const std::string p1 = "/tmp/fewner_ckpt_step100.bin";
  auto model = tiny_model(29);
  save_checkpoint(model, p0);

  const auto ep = toy_episode();
  const auto cfg = fast_config();
  TrainerState state(cfg.seed);
  for (int step = 0; step < 100; ++step) train_step(model, ep, cfg, step, state);
  save_checkpoint(model, p1);

  std::ifstream a(p0, std::ios::binary), b(p1, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)),
                            std::istreambuf_iterator<char>());
  const std::string bytes_b((std::istreambuf_iterator<char>(b)),
                            std::istreambuf_iterator<char>());
  CHECK(bytes_a != bytes_b);
  std::remove(p0.c_str());
  std::remove(p1.c_str());
}

TEST_CASE("warm starts load an on-disk checkpoint as the pretrained backend") {
  const std::string path = "/tmp/fewner_warm_start.bin";
  auto donor = tiny_model(37);
  save_checkpoint(donor, path);

  ModelConfig cfg = donor.config();
  cfg.pretrained_path = path;
  const auto warmed = make_model(cfg, /*seed=*/999);  // seed ignored on warm start
  CHECK(warmed.classifier_encoder().kind == EncoderHandle::Kind::pretrained);
  for (const auto& [name, tensor] : donor.params())
    CHECK(tensor == warmed.params().get(name));

  ModelConfig fresh = donor.config();
  const auto cold = make_model(fresh, 999);
  CHECK(cold.classifier_encoder().kind == EncoderHandle::Kind::tiny_trainable);
  CHECK_FALSE(cold.params().get("cls.tok_emb") == donor.params().get("cls.tok_emb"));
  std::remove(path.c_str());
}

TEST_CASE("single-encoder mode shares one backbone between the two stages") {
  auto model = tiny_model(41, /*two_encoders=*/false);
  CHECK(model.detector_prefix() == model.classifier_prefix());
  CHECK_FALSE(model.params().has("det.tok_emb"));

  const auto ep = toy_episode();
  TrainerState state(1);
  const double loss = train_step(model, ep, fast_config(), 0, state);
  CHECK(std::isfinite(loss));

  auto two = tiny_model(41, /*two_encoders=*/true);
  CHECK(two.params().has("det.tok_emb"));
  CHECK(two.detector_prefix() != two.classifier_prefix());
}

TEST_CASE("non-finite losses abort with a diagnostic") {
  auto model = tiny_model(43);
  model.params().get("bi.U")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto ep = toy_episode();
  TrainerState state(1);
  CHECK_THROWS_WITH_AS(train_step(model, ep, fast_config(), 3, state),
                       doctest::Contains("step 3"), ContractError);
}

TEST_CASE("fine-tuning improves query F1 over the raw model") {
  // a lightly-trained base model, then per-episode adaptation
  auto model = tiny_model(31);
  const auto ep = toy_episode();
  TrainConfig cfg = fast_config();
  cfg.max_steps = 60;
  TrainerState state(cfg.seed);
  for (int step = 0; step < 60; ++step) train_step(model, ep, cfg, step, state);

  auto count_hits = [&](const NerModel& m) {
    const auto bank = build_bank(m, ep.support, ep.type_set);
    PredictOptions opts;
    opts.k_shot = ep.k_shot;
    opts.weights = make_rerank_weights(0.5);
    int hits = 0;
    for (const auto& q : ep.query) {
      const auto preds = predict_sentence(m, q.words, ep.type_set, bank, opts);
      for (const auto& g : tags_to_spans(q))
        for (const auto& p : preds)
          if (p.span.start == g.start && p.span.end == g.end && p.label == g.label)
            ++hits;
    }
    return hits;
  };

  const int before = count_hits(model);
  auto adapted = model.clone();
  FinetuneConfig ft;
  finetune_on_support(adapted, ep.support, ep.type_set, ep.k_shot, cfg, ft, 2);
  const int after = count_hits(adapted);
  CHECK(after >= before);
}
