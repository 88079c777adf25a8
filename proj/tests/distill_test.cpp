#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "listen/dataset.hpp"
#include "listen/distill.hpp"

namespace listenkit {
namespace {

using testing::max_gradient_error;
using testing::random_tensor;

const ModelConfig kParentConfig = ModelConfig::make("parent", 64, 4, 2, Activation::gelu);
const ModelConfig kL19 = ModelConfig::make("L19", 64, 2, 1, Activation::relu);

std::vector<Tensor<float>> synth_images(std::size_t per_mode, std::uint64_t seed) {
  Prng prng(seed);
  SpectrogramFrontend frontend;
  std::vector<Tensor<float>> out;
  for (auto& ex : make_dataset<float>(synth_corpus(cnc_mode_specs(), per_mode, prng), frontend)) out.push_back(std::move(ex.image));
  return out;
}

TEST(DistillLoss, MatchesBruteForceSquaredDistance) {
  Prng prng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + prng.index(6), d = 1 + prng.index(9);
    const auto p = random_tensor({b, d}, prng), t = random_tensor({b, d}, prng);
    double brute = 0;
    for (std::size_t i = 0; i < b; ++i) {
      double dist = 0;
      for (std::size_t c = 0; c < d; ++c) dist += (p(i, c) - t(i, c)) * (p(i, c) - t(i, c));
      brute += dist;
    }
    EXPECT_NEAR(distill_loss(p, t).value, brute / static_cast<double>(b), 1e-12);
  }
  EXPECT_THROW(distill_loss(Tensor<double>({2, 3}), Tensor<double>({3, 2})), ShapeError);
  EXPECT_THROW(distill_loss(Tensor<double>({0, 3}), Tensor<double>({0, 3})), InputError);
}

TEST(DistillLoss, GradientCheck) {
  Prng prng(2);
  auto p = random_tensor({3, 5}, prng);
  const auto t = random_tensor({3, 5}, prng);
  const auto g = distill_loss(p, t).grad;
  EXPECT_LT(max_gradient_error(p, g, [&] { return distill_loss(p, t).value; }), 1e-6);
}

TEST(DistillStep, GradientsMatchFiniteDifferences) {
  Prng prng(3);
  const auto cfg = ModelConfig::make("s", 8, 1, 2, Activation::relu);
  DistillState<double> s(build_backbone<double>(cfg, 4), build_projection<double>(8, 12, 5), 0.0);
  std::vector<Tensor<double>> images{random_tensor({128, 128}, prng), random_tensor({128, 128}, prng)};
  const auto ptrs = pointers(images);
  const auto targets = random_tensor({2, 12}, prng);
  const auto before = serialize_params(s.student);
  distill_step(s, ptrs, targets);
  EXPECT_EQ(serialize_params(s.student), before);  // lr = 0

  auto loss = [&] { return distill_loss(project(s.proj, cls_batch(s.student, ptrs)), targets).value; };
  auto check = [&](auto& model, auto& grads) {
    for (auto& q : collect_parameters(model, grads)) {
      if (q.name.find("blocks.0.attn") != std::string::npos) continue;  // covered by the model suite
      EXPECT_LT(max_gradient_error(*q.value, *q.grad, loss), 1e-5) << q.name;
    }
  };
  check(s.student, s.student_grads);
  check(s.proj, s.proj_grads);
}

TEST(DistillStep, IdentityProjectionOfIdenticalModelsGivesZero) {
  const auto images = synth_images(1, 6);
  const auto parent = build_backbone<float>(kL19, 7);
  ProjectionHead<float> id{Linear<float>{Tensor<float>({64, 64}), Tensor<float>({64})}};
  for (std::size_t i = 0; i < 64; ++i) id.proj.weight(i, i) = 1.0f;
  DistillState<float> s(parent, id, 1e-3);
  EXPECT_EQ(distill_step(s, parent, pointers(images)), 0.0);
}

TEST(DistillStep, RejectsEmptyBatch) {
  DistillState<float> s(build_backbone<float>(kL19, 1), build_projection<float>(64, 64, 2), 1e-3);
  EXPECT_THROW(distill_step(s, std::vector<const Tensor<float>*>{}, Tensor<float>({0, 64})), InputError);
}

TEST(DistillStep, FixedBatchConvergesAndParentStaysFrozen) {
  const auto all = synth_images(1, 8);
  const std::vector<Tensor<float>> batch(all.begin(), all.begin() + 8);
  const auto parent = build_backbone<float>(kParentConfig, 9);
  const auto parent_bytes = serialize_params(parent);
  DistillState<float> s(build_backbone<float>(kL19, 10), build_projection<float>(64, 64, 11), 1e-3);
  const auto ptrs = pointers(batch);
  const auto targets = cls_batch(parent, ptrs);
  const double initial = distill_loss(project(s.proj, cls_batch(s.student, ptrs)), targets).value;
  for (int i = 0; i < 500; ++i) distill_step(s, ptrs, targets);
  const double final_loss = distill_loss(project(s.proj, cls_batch(s.student, ptrs)), targets).value;
  EXPECT_LT(final_loss, 0.1 * initial) << "initial " << initial;
  EXPECT_EQ(serialize_params(parent), parent_bytes);
}

class DistillRunTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_ = new std::vector<Tensor<float>>(synth_images(4, 12));
    heldout_ = new std::vector<Tensor<float>>(synth_images(1, 13));
  }
  static void TearDownTestSuite() {
    delete train_;
    delete heldout_;
  }

  struct Outcome {
    std::vector<DistillEpoch> curve;
    std::string student_bytes;
    std::string parent_bytes_before, parent_bytes_after;
  };

  static Outcome run(std::uint64_t seed) {
    FrozenParent<float> parent{build_backbone<float>(kParentConfig, 14), {}};
    Outcome o;
    o.parent_bytes_before = serialize_params(parent.backbone);
    DistillConfig cfg;
    DistillState<float> s(build_backbone<float>(kL19, seed), build_projection<float>(64, 64, seed + 1), cfg.lr);
    cfg.epochs = 6;
    Prng prng(seed);
    o.curve = distill_run(parent, PreprocessingSettings{}, s, *train_, *heldout_, cfg, prng);
    o.student_bytes = serialize_params(s.student);
    o.parent_bytes_after = serialize_params(parent.backbone);
    return o;
  }

  static std::vector<Tensor<float>>* train_;
  static std::vector<Tensor<float>>* heldout_;
};

std::vector<Tensor<float>>* DistillRunTest::train_ = nullptr;
std::vector<Tensor<float>>* DistillRunTest::heldout_ = nullptr;

TEST_F(DistillRunTest, HeldoutImprovesAndRunIsDeterministic) {
  const auto a = run(21);
  ASSERT_EQ(a.curve.size(), 7u);
  EXPECT_EQ(a.curve.back().steps, 6u * 5u);
  for (std::size_t i = 1; i < a.curve.size(); ++i) {
    EXPECT_LE(a.curve[i].heldout_mse, a.curve[i - 1].heldout_mse * 1.05) << "epoch " << i;
  }
  EXPECT_GT(a.curve.back().heldout_cosine, a.curve[1].heldout_cosine);
  EXPECT_EQ(a.parent_bytes_before, a.parent_bytes_after);

  const auto b = run(21);
  EXPECT_EQ(a.student_bytes, b.student_bytes);
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].heldout_mse, b.curve[i].heldout_mse);
}

TEST_F(DistillRunTest, RejectsMismatchedPreprocessingAndEmptyCorpus) {
  FrozenParent<float> parent{build_backbone<float>(kL19, 1), {}};
  DistillState<float> s(build_backbone<float>(kL19, 2), build_projection<float>(64, 64, 3), 1e-3);
  PreprocessingSettings other;
  other.top_db = 60.0;
  Prng prng(1);
  EXPECT_THROW(distill_run(parent, other, s, *train_, *heldout_, DistillConfig{}, prng), ConfigError);
  EXPECT_THROW(distill_run(parent, PreprocessingSettings{}, s, {}, *heldout_, DistillConfig{}, prng), InputError);
  DistillState<float> wrong(build_backbone<float>(kL19, 2), build_projection<float>(64, 32, 3), 1e-3);
  EXPECT_THROW(distill_run(parent, PreprocessingSettings{}, wrong, *train_, *heldout_, DistillConfig{}, prng), ConfigError);
}

TEST(Export, DropsProjectionAndRoundTrips) {
  const auto student = build_backbone<float>(kL19, 30);
  const auto bundle = export_student(student, PreprocessingSettings{}, {{"source", "test"}});
  const auto bytes = serialize_checkpoint(bundle);
  EXPECT_EQ(bytes.find("proj."), std::string::npos);
  EXPECT_LT(bytes.size(), 400u * 1024u);
  const auto back = parse_checkpoint({bytes.begin(), bytes.end()});
  const auto images = synth_images(1, 31);
  EXPECT_EQ(cls_embedding(back.backbone, images[0]), cls_embedding(student, images[0]));
}

TEST(Export, DoubleStudentCastsToFloat) {
  const auto student = build_backbone<double>(kL19, 32);
  const auto bundle = export_student(student, PreprocessingSettings{});
  EXPECT_EQ(bundle.backbone.cls_token[3], static_cast<float>(student.cls_token[3]));
  EXPECT_EQ(bundle.backbone.positional, sinusoidal_table<float>(65, 64));
}

}  // namespace
}  // namespace listenkit
