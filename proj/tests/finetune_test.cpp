#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "listen/finetune.hpp"

namespace listenkit {
namespace {

const ModelConfig kSmall = ModelConfig::make("small", 16, 1, 1, Activation::relu);

// ---------------------------------------------------------------- confusion and F1

TEST(Confusion, CountsPairs) {
  const std::vector<int> labels{0, 1, 2, 2, 1};
  const auto perfect = confusion(labels, labels, 3);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(perfect.at(t, p), t == p ? perfect.row_sum(t) : 0u);
  EXPECT_EQ(perfect.row_sum(2), 2u);
  EXPECT_EQ(confusion({}, {}, 4).total(), 0u);
  const std::vector<int> short_preds{0};
  EXPECT_THROW(confusion(short_preds, labels, 3), InputError);
}

TEST(MacroF1, HandComputedTwoClass) {
  ConfusionMatrix cm(2);
  for (int i = 0; i < 8; ++i) cm.add(0, 0);
  for (int i = 0; i < 2; ++i) cm.add(0, 1);
  for (int i = 0; i < 3; ++i) cm.add(1, 0);
  for (int i = 0; i < 7; ++i) cm.add(1, 1);
  const auto f = per_class_f1(cm);
  EXPECT_DOUBLE_EQ(*f[0], 16.0 / 21.0);
  EXPECT_DOUBLE_EQ(*f[1], 14.0 / 19.0);
  EXPECT_DOUBLE_EQ(macro_f1(cm), (16.0 / 21.0 + 14.0 / 19.0) / 2.0);
  EXPECT_NEAR(macro_f1(cm), 0.7494, 5e-5);
}

TEST(MacroF1, EdgeCases) {
  const std::vector<int> same{0, 1, 2};
  EXPECT_EQ(macro_f1(confusion(same, same, 3)), 1.0);
  const std::vector<int> single{4, 4};
  EXPECT_EQ(macro_f1(confusion(single, single, 10)), 1.0);
  EXPECT_THROW(macro_f1(ConfusionMatrix(3)), DomainError);
  // class 2 never appears in the labels but is predicted once: it is
  // excluded from the mean, though it still lowers class 0's recall
  const std::vector<int> labels{0, 0, 1}, preds{0, 2, 1};
  EXPECT_DOUBLE_EQ(macro_f1(confusion(preds, labels, 3)), (2.0 * 1.0 * 0.5 / 1.5 + 1.0) / 2.0);
}

TEST(MacroF1, MatchesBruteForceFromPairs) {
  Prng prng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t classes = 2 + prng.index(6), n = 1 + prng.index(40);
    std::vector<int> preds(n), labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      preds[i] = static_cast<int>(prng.index(classes));
      labels[i] = static_cast<int>(prng.index(classes));
    }
    double sum = 0;
    int present = 0;
    for (int c = 0; c < static_cast<int>(classes); ++c) {
      int tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        tp += preds[i] == c && labels[i] == c;
        fp += preds[i] == c && labels[i] != c;
        fn += preds[i] != c && labels[i] == c;
      }
      if (tp + fn == 0) continue;
      ++present;
      sum += tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    }
    EXPECT_NEAR(macro_f1(confusion(preds, labels, classes)), sum / present, 1e-12);
  }
}

// ---------------------------------------------------------------- prediction

TEST(Predict, TiesGoToLowestId) {
  const std::vector<float> equal(5, 0.3f);
  const auto p = predict_from_logits<float>(equal);
  EXPECT_EQ(p.mode, 0);
  EXPECT_DOUBLE_EQ(p.confidence, 0.2);
  const std::vector<float> tie{1.0f, 3.0f, 3.0f};
  EXPECT_EQ(predict_from_logits<float>(tie).mode, 1);
}

TEST(Predict, ConfidenceRangeAndAffineInvariance) {
  Prng prng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(7), moved(7);
    for (auto& v : logits) v = prng.normal() * 5;
    const double shift = prng.normal() * 10, scale = prng.uniform(0.1, 10.0);
    for (std::size_t i = 0; i < 7; ++i) moved[i] = logits[i] * scale + shift;
    const auto a = predict_from_logits<double>(logits), b = predict_from_logits<double>(moved);
    EXPECT_GT(a.confidence, 0.0);
    EXPECT_LE(a.confidence, 1.0);
    EXPECT_EQ(a.mode, b.mode);
  }
  const std::vector<double> huge{1000.0, 0.0};
  EXPECT_EQ(predict_from_logits<double>(huge).confidence, 1.0);
}

// ---------------------------------------------------------------- fine-tuning

// Class c lights up frequency band c.
Dataset<float> separable_set(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  Prng prng(seed);
  Dataset<float> out;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      Tensor<float> im({128, 128});
      for (std::size_t r = 0; r < 128; ++r)
        for (std::size_t k = 0; k < 128; ++k)
          im(r, k) = static_cast<float>((r / 32 == c ? 2.0 : -0.5) + 0.05 * prng.normal());
      out.push_back({std::move(im), static_cast<int>(c), {}});
    }
  }
  return out;
}

TEST(Finetune, HeadDrivesSeparableEmbeddingLossToZero) {
  Prng prng(3);
  const std::size_t classes = 4, per_class = 10, d = 16;
  Tensor<float> emb({classes * per_class, d});
  std::vector<int> labels;
  for (std::size_t i = 0; i < classes * per_class; ++i) {
    const std::size_t c = i / per_class;
    for (std::size_t k = 0; k < d; ++k) emb(i, k) = static_cast<float>((k % classes == c ? 1.0 : 0.0) + 0.1 * prng.normal());
    labels.push_back(static_cast<int>(c));
  }
  auto head = build_head<float>(d, classes, 4);
  const auto curve = finetune_head(head, emb, std::span<const int>(labels), FinetuneConfig{}, prng);
  ASSERT_EQ(curve.size(), 200u);
  EXPECT_LT(curve.back(), 0.01);
  EXPECT_THROW(finetune_head(head, Tensor<float>({3, d}), std::span<const int>(labels), FinetuneConfig{}, prng), ShapeError);
}

TEST(Finetune, FrozenBackboneStaysBitwise) {
  const auto data = separable_set(4, 2, 3);
  auto model = build_classifier<float>(kSmall, 4, 4);
  const auto backbone_bytes = serialize_params(model.backbone), head_bytes = serialize_params(model.head);
  FinetuneConfig cfg;
  cfg.freeze_backbone = true;
  cfg.epochs = 5;
  Prng prng(5);
  EXPECT_EQ(finetune(model, data, cfg, prng).size(), 5u);
  EXPECT_EQ(serialize_params(model.backbone), backbone_bytes);
  EXPECT_NE(serialize_params(model.head), head_bytes);
}

TEST(Finetune, ZeroLearningRateChangesNothing) {
  const auto data = separable_set(3, 2, 6);
  auto model = build_classifier<float>(kSmall, 3, 7);
  const auto bytes = serialize_params(model);
  FinetuneConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 0.0;
  Prng prng(8);
  finetune(model, data, cfg, prng);
  EXPECT_EQ(serialize_params(model), bytes);
}

TEST(Finetune, FullFinetuneIsDeterministic) {
  const auto data = separable_set(3, 3, 9);
  FinetuneConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 3;
  auto run = [&] {
    auto model = build_classifier<float>(kSmall, 3, 10);
    Prng prng(11);
    const auto curve = finetune(model, data, cfg, prng);
    return std::make_pair(curve, serialize_params(model));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_LT(a.first.back(), a.first.front());
}

TEST(Finetune, RejectsBadInputs) {
  auto model = build_classifier<float>(kSmall, 3, 12);
  Prng prng(1);
  EXPECT_THROW(finetune(model, Dataset<float>{}, FinetuneConfig{}, prng), InputError);
  auto data = separable_set(1, 1, 1);
  data[0].label = 3;
  EXPECT_THROW(finetune(model, data, FinetuneConfig{}, prng), DomainError);
  FinetuneConfig bad;
  bad.epochs = 0;
  EXPECT_THROW(finetune(model, separable_set(1, 1, 1), bad, prng), ConfigError);
}

TEST(Evaluate, ReportBoundsAndJson) {
  const auto data = separable_set(4, 3, 13);
  auto model = build_classifier<float>(kSmall, 4, 14);
  const auto r = evaluate(model, data);
  double lo = 1, hi = 0;
  for (const auto& f : r.per_class) {
    if (!f) continue;
    lo = std::min(lo, *f);
    hi = std::max(hi, *f);
  }
  EXPECT_LE(lo, r.macro);
  EXPECT_LE(r.macro, hi);
  EXPECT_EQ(r.confusion.total(), 12u);
  const auto j = r.to_json(cnc_taxonomy());
  EXPECT_EQ(j.at("average"), "macro");
  EXPECT_EQ(j.at("per_class").size(), 4u);
  EXPECT_EQ(j.at("per_class")[1].at("label"), "Mode 1");
  EXPECT_EQ(nlohmann::json::parse(j.dump()), j);
  EXPECT_EQ(evaluate(model, data).to_json(), r.to_json());
}

// ---------------------------------------------------------------- data plumbing

TEST(Split, SeededPartition) {
  Prng a(15), b(15);
  const auto s = split_indices(37, 0.7, a);
  EXPECT_EQ(s.train.size(), 26u);
  std::set<std::size_t> seen(s.train.begin(), s.train.end());
  for (auto i : s.test) EXPECT_TRUE(seen.insert(i).second);
  EXPECT_EQ(seen.size(), 37u);
  EXPECT_EQ(*seen.rbegin(), 36u);
  const auto t = split_indices(37, 0.7, b);
  EXPECT_EQ(s.train, t.train);
  EXPECT_THROW(split_indices(3, 1.5, a), DomainError);
}

TEST(Manifest, LoadsLabeledSeconds) {
  const auto dir = std::filesystem::temp_directory_path() / "listen_manifest_test";
  std::filesystem::create_directories(dir);
  std::vector<float> samples(3 * 16000);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = static_cast<float>(i / 16000) * 0.25f;
  save_wav(dir / "a.wav", AudioBuffer{samples, 16000});
  {
    std::ofstream m(dir / "m.jsonl");
    m << R"({"path": "a.wav", "offset_s": 2, "mode": 7})" << "\n\n";
    m << R"({"path": "a.wav", "offset_s": 0, "mode": 1})" << "\n";
  }
  const auto entries = read_manifest(dir / "m.jsonl");
  ASSERT_EQ(entries.size(), 2u);
  const auto clips = load_manifest_clips(entries);
  ASSERT_EQ(clips.size(), 2u);
  EXPECT_EQ(clips[0].mode, 7);
  EXPECT_EQ(clips[0].clip.sample_rate, 48000);
  EXPECT_EQ(clips[0].clip.samples.size(), 48000u);
  EXPECT_NEAR(clips[0].clip.samples[100], 0.5f, 1e-4);
  EXPECT_NEAR(clips[1].clip.samples[100], 0.0f, 1e-4);

  {
    std::ofstream m(dir / "bad.jsonl");
    m << R"({"path": "a.wav", "offset_s": 3, "mode": 0})" << "\n";
  }
  EXPECT_THROW(load_manifest_clips(read_manifest(dir / "bad.jsonl")), InputError);
  {
    std::ofstream m(dir / "broken.jsonl");
    m << "{not json\n";
  }
  EXPECT_THROW(read_manifest(dir / "broken.jsonl"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Bundle, ClassifierRoundTripsThroughCheckpoint) {
  const auto model = build_classifier<float>(kSmall, 10, 16);
  const auto bundle = bundle_from_classifier(model, PreprocessingSettings{}, cnc_taxonomy());
  const auto bytes = serialize_checkpoint(bundle);
  const auto back = classifier_from_bundle(parse_checkpoint({bytes.begin(), bytes.end()}));
  const auto data = separable_set(2, 1, 17);
  EXPECT_EQ(classifier_logits(back, data[1].image), classifier_logits(model, data[1].image));
  ModelBundle headless;
  EXPECT_THROW(classifier_from_bundle(headless), ConfigError);
}

}  // namespace
}  // namespace listenkit
