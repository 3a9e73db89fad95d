#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "dtm/gradcheck.hpp"
#include "dtm/model.hpp"
#include "dtm/rng.hpp"
#include "dtm/supervision.hpp"

namespace fs = std::filesystem;

using dtm::AttributeSchema;
using dtm::BackboneConfig;
using dtm::BnMode;
using dtm::HeadMode;
using dtm::LabelMatrix;
using dtm::Model;
using dtm::Rng;
using dtm::TensorPtr;
using dtm::TensorT;

using Tensor = TensorT<double>;
using Ptr = TensorPtr<double>;

namespace {

AttributeSchema interleaved_schema() {
  // Globals and locals alternate, so reassembly must actually permute.
  AttributeSchema s;
  s.attributes = {
      {"g0", true, {}},
      {"l0", false, {0}},
      {"g1", true, {}},
      {"l1", false, {9, 10}},
      {"l2", false, {15, 16}},
  };
  s.validate();
  return s;
}

BackboneConfig tiny_backbone() {
  BackboneConfig cfg;
  cfg.widths = {4, 6};
  cfg.strides = {2, 2};
  return cfg;
}

Ptr random_images(int n, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  auto t = Tensor::create({n, 3, h, w});
  for (auto& v : t->data) v = rng.uniform(0.0, 1.0);
  return t;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dtm_model_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

// ---- backbone ----

TEST(Backbone, DefaultShapes) {
  BackboneConfig cfg;
  auto bb = dtm::make_backbone<double>(cfg, 7);
  EXPECT_EQ(bb.down_stride(), 8);
  EXPECT_EQ(bb.out_channels(), 64);
  auto features = dtm::backbone_forward(bb, random_images(2, 128, 96, 1));
  EXPECT_EQ(features->shape, (std::vector<int>{2, 64, 16, 12}));
}

TEST(Backbone, RejectsNonDivisibleInput) {
  BackboneConfig cfg;
  auto bb = dtm::make_backbone<double>(cfg, 7);
  try {
    dtm::backbone_forward(bb, random_images(1, 100, 96, 2));
    FAIL() << "expected ShapeError";
  } catch (const dtm::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("100x96"), std::string::npos) << msg;
    EXPECT_NE(msg.find("8"), std::string::npos) << msg;
  }
  EXPECT_THROW(dtm::backbone_forward(bb, Tensor::create({2, 3, 4})), dtm::ShapeError);
}

TEST(Backbone, WidthStrideMismatchRejected) {
  BackboneConfig cfg;
  cfg.widths = {8, 16};
  cfg.strides = {2};
  EXPECT_THROW(dtm::make_backbone<double>(cfg, 1), dtm::ConfigError);
}

TEST(Backbone, InitializationIsSeedDeterministic) {
  auto a = dtm::make_backbone<double>(tiny_backbone(), 11);
  auto b = dtm::make_backbone<double>(tiny_backbone(), 11);
  auto c = dtm::make_backbone<double>(tiny_backbone(), 12);
  EXPECT_EQ(a.stages[0].weight->data, b.stages[0].weight->data);
  EXPECT_EQ(a.stages[1].weight->data, b.stages[1].weight->data);
  EXPECT_NE(a.stages[0].weight->data, c.stages[0].weight->data);
  // Stages draw from distinct streams.
  EXPECT_NE(a.stages[0].weight->data[0], a.stages[1].weight->data[0]);
}

TEST(Backbone, GradientReachesFirstStage) {
  auto bb = dtm::make_backbone<double>(tiny_backbone(), 13);
  auto features = dtm::backbone_forward(bb, random_images(2, 8, 8, 3));
  dtm::sum(dtm::mul(features, features))->backward();
  double norm = 0.0;
  for (double g : bb.stages[0].weight->grad) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

// ---- DTM head ----

TEST(DtmHead, MixedSplitsBranchesBySchema) {
  auto schema = interleaved_schema();
  auto head = dtm::make_dtm_head<double>(schema, HeadMode::DtmMixed, 6, 5);
  EXPECT_EQ(head.gap_attrs, (std::vector<int>{0, 2}));
  EXPECT_EQ(head.gmp_attrs, (std::vector<int>{1, 3, 4}));
  EXPECT_EQ(head.templates_gap->shape, (std::vector<int>{2, 6, 1, 1}));
  EXPECT_EQ(head.templates_gmp->shape, (std::vector<int>{3, 6, 1, 1}));
  // perm maps schema position -> concat position
  EXPECT_EQ(head.reassembly_perm(), (std::vector<int>{0, 2, 1, 3, 4}));
}

TEST(DtmHead, PureBranchModes) {
  auto schema = interleaved_schema();
  auto gap_head = dtm::make_dtm_head<double>(schema, HeadMode::DtmGap, 6, 5);
  EXPECT_EQ(gap_head.gap_attrs.size(), 5u);
  EXPECT_TRUE(gap_head.gmp_attrs.empty());
  EXPECT_EQ(gap_head.templates_gmp, nullptr);
  auto gmp_head = dtm::make_dtm_head<double>(schema, HeadMode::DtmGmp, 6, 5);
  EXPECT_TRUE(gmp_head.gap_attrs.empty());
  EXPECT_EQ(gmp_head.gmp_attrs.size(), 5u);
}

TEST(DtmHead, FcBaselineIsNotADtmHead) {
  EXPECT_THROW(dtm::make_dtm_head<double>(interleaved_schema(), HeadMode::FcBaseline, 6, 5), dtm::ConfigError);
}

TEST(DtmHead, LogitsFollowSchemaOrder) {
  auto schema = interleaved_schema();
  auto model = dtm::make_model<double>(schema, HeadMode::DtmMixed, tiny_backbone(), 17, /*head_bn=*/false);
  auto images = random_images(3, 8, 8, 4);
  auto fwd = dtm::forward_model(model, images);
  ASSERT_EQ(fwd.logits->shape, (std::vector<int>{3, 5}));
  const int H = fwd.heatmaps_gmp->dim(2), W = fwd.heatmaps_gmp->dim(3), S = H * W;
  for (int j = 0; j < schema.total(); ++j) {
    const auto [branch, channel] = dtm::heatmap_location(model, j);
    for (int n = 0; n < 3; ++n) {
      const double logit = fwd.logits->data[static_cast<std::size_t>(n) * 5 + j];
      if (branch == 'a') {
        double mean = 0.0;
        for (int s = 0; s < S; ++s)
          mean += fwd.heatmaps_gap->data[(static_cast<std::size_t>(n) * fwd.heatmaps_gap->dim(1) + channel) * S + s];
        mean /= S;
        EXPECT_NEAR(logit, mean, 1e-12);
      } else {
        double mx = -1e300;
        for (int s = 0; s < S; ++s)
          mx = std::max(mx, fwd.heatmaps_gmp->data[(static_cast<std::size_t>(n) * fwd.heatmaps_gmp->dim(1) + channel) * S + s]);
        EXPECT_NEAR(logit, mx, 1e-12);
      }
    }
  }
}

TEST(DtmHead, HeatmapLocationCoversAllAttributes) {
  auto schema = interleaved_schema();
  auto model = dtm::make_model<double>(schema, HeadMode::DtmMixed, tiny_backbone(), 17);
  EXPECT_EQ(dtm::heatmap_location(model, 0), (std::pair<char, int>{'a', 0}));
  EXPECT_EQ(dtm::heatmap_location(model, 1), (std::pair<char, int>{'m', 0}));
  EXPECT_EQ(dtm::heatmap_location(model, 2), (std::pair<char, int>{'a', 1}));
  EXPECT_EQ(dtm::heatmap_location(model, 3), (std::pair<char, int>{'m', 1}));
  EXPECT_EQ(dtm::heatmap_location(model, 4), (std::pair<char, int>{'m', 2}));
  EXPECT_THROW(dtm::heatmap_location(model, 5), dtm::ConfigError);
  auto fc = dtm::make_model<double>(schema, HeadMode::FcBaseline, tiny_backbone(), 17);
  EXPECT_THROW(dtm::heatmap_location(fc, 0), dtm::ConfigError);
}

TEST(DtmHead, HeatmapShapeMatchesStride) {
  auto schema = interleaved_schema();
  auto model = dtm::make_model<double>(schema, HeadMode::DtmMixed, BackboneConfig{}, 19);
  auto fwd = dtm::forward_model(model, random_images(2, 128, 96, 5));
  EXPECT_EQ(fwd.heatmaps_gap->shape, (std::vector<int>{2, 2, 16, 12}));
  EXPECT_EQ(fwd.heatmaps_gmp->shape, (std::vector<int>{2, 3, 16, 12}));
  EXPECT_EQ(fwd.gmp_argmax.size(), 2u * 3u);
}

TEST(DtmHead, TemplatesAreLocal) {
  // 1x1 templates: perturbing the features at one spatial site moves only
  // that site in every heatmap.
  auto schema = interleaved_schema();
  auto head = dtm::make_dtm_head<double>(schema, HeadMode::DtmMixed, 6, 23, /*use_bn=*/false);
  Rng rng(31);
  auto features = Tensor::create({1, 6, 4, 4});
  for (auto& v : features->data) v = rng.uniform(-1.0, 1.0);
  auto base = dtm::forward_dtm(head, features);

  auto bumped = Tensor::create({1, 6, 4, 4});
  bumped->data = features->data;
  const int site = 2 * 4 + 3;  // (h=2, w=3)
  for (int c = 0; c < 6; ++c) bumped->data[static_cast<std::size_t>(c) * 16 + site] += 0.5;
  auto moved = dtm::forward_dtm(head, bumped);

  for (int ch = 0; ch < 3; ++ch)
    for (int s = 0; s < 16; ++s) {
      const double a = base.heatmaps_gmp->data[static_cast<std::size_t>(ch) * 16 + s];
      const double b = moved.heatmaps_gmp->data[static_cast<std::size_t>(ch) * 16 + s];
      if (s == site)
        EXPECT_GT(std::fabs(a - b), 1e-9);
      else
        EXPECT_DOUBLE_EQ(a, b);
    }
}

// ---- template matching vs fully-connected equivalence ----

TEST(Equivalence, GapTemplatesEqualFcWithoutBn) {
  // With BN off, GAP of a 1x1-convolved map equals an FC layer applied to the
  // GAP'd features when the FC weight is the reshaped template bank.
  auto schema = interleaved_schema();
  const std::uint64_t seed = 29;
  auto dtm_model = dtm::make_model<double>(schema, HeadMode::DtmGap, tiny_backbone(), seed, /*head_bn=*/false);
  auto fc_model = dtm::make_model<double>(schema, HeadMode::FcBaseline, tiny_backbone(), seed, /*head_bn=*/false);
  ASSERT_EQ(dtm_model.dtm.templates_gap->numel(), fc_model.fc.weight->numel());
  fc_model.fc.weight->data = dtm_model.dtm.templates_gap->data;  // (J,C,1,1) flattens to (J,C)

  double max_diff = 0.0;
  for (int batch = 0; batch < 10; ++batch) {
    auto images = random_images(4, 8, 8, 100 + static_cast<std::uint64_t>(batch));
    auto a = dtm::forward_model(dtm_model, images);
    auto b = dtm::forward_model(fc_model, images);
    for (std::size_t i = 0; i < a.logits->data.size(); ++i)
      max_diff = std::max(max_diff, std::fabs(a.logits->data[i] - b.logits->data[i]));
  }
  EXPECT_LT(max_diff, 1e-9);
}

TEST(Equivalence, BnBreaksTheIdentity) {
  // Spatial BN over heatmaps and vector BN over pooled logits normalize over
  // different supports, so the two heads disagree once BN is on.
  auto schema = interleaved_schema();
  const std::uint64_t seed = 29;
  auto dtm_model = dtm::make_model<double>(schema, HeadMode::DtmGap, tiny_backbone(), seed, /*head_bn=*/true);
  auto fc_model = dtm::make_model<double>(schema, HeadMode::FcBaseline, tiny_backbone(), seed, /*head_bn=*/true);
  fc_model.fc.weight->data = dtm_model.dtm.templates_gap->data;
  auto images = random_images(4, 8, 8, 900);
  auto a = dtm::forward_model(dtm_model, images);
  auto b = dtm::forward_model(fc_model, images);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < a.logits->data.size(); ++i)
    max_diff = std::max(max_diff, std::fabs(a.logits->data[i] - b.logits->data[i]));
  EXPECT_GT(max_diff, 1e-3);
}

// ---- parameter and FLOP accounting ----

TEST(ModelStats, OneByOneConvExample) {
  EXPECT_EQ(dtm::conv_param_count(1, 64, 10), 640);
  EXPECT_EQ(dtm::conv_flops(1, 64, 10, 16, 12), 245760);
}

TEST(ModelStats, EmptyModelIsZero) {
  Model<double> empty;
  const auto st = dtm::model_stats(empty, 128, 96);
  EXPECT_EQ(st.params, 0);
  EXPECT_EQ(st.flops, 0);
}

TEST(ModelStats, ParamsIndependentOfInputSizeFlopsScaleWithArea) {
  auto schema = interleaved_schema();
  auto model = dtm::make_model<double>(schema, HeadMode::DtmMixed, BackboneConfig{}, 3);
  const auto small = dtm::model_stats(model, 128, 96);
  const auto large = dtm::model_stats(model, 256, 192);
  EXPECT_EQ(small.params, large.params);
  EXPECT_EQ(large.flops, 4 * small.flops);
  EXPECT_GT(small.params, 0);
}

TEST(ModelStats, HandCountedTinyModel) {
  // One 3x3 stage 3->4 stride 2 with affine BN on 8x8 input, DtmGmp head with
  // five 1x1 templates over 4 channels on the 4x4 feature map.
  BackboneConfig cfg;
  cfg.widths = {4};
  cfg.strides = {2};
  auto model = dtm::make_model<double>(interleaved_schema(), HeadMode::DtmGmp, cfg, 3);
  const auto st = dtm::model_stats(model, 8, 8);
  const long long conv_p = 9LL * 3 * 4, bn_p = 2LL * 4, head_p = 5LL * 4, head_bn_p = 2LL * 5;
  EXPECT_EQ(st.params, conv_p + bn_p + head_p + head_bn_p);
  const long long conv_f = 2LL * 9 * 3 * 4 * 16, bn_f = 2LL * 4 * 16, relu_f = 16LL * 4;
  const long long head_conv_f = 2LL * 4 * 5 * 16, head_bn_f = 2LL * 5 * 16, pool_f = 5LL * 16;
  EXPECT_EQ(st.flops, conv_f + bn_f + relu_f + head_conv_f + head_bn_f + pool_f);
}

TEST(ModelStats, FcBaselineCounts) {
  BackboneConfig cfg;
  cfg.widths = {4};
  cfg.strides = {2};
  auto model = dtm::make_model<double>(interleaved_schema(), HeadMode::FcBaseline, cfg, 3);
  const auto st = dtm::model_stats(model, 8, 8);
  const long long conv_p = 9LL * 3 * 4 + 2LL * 4, fc_p = 5LL * 4 + 2LL * 5;
  EXPECT_EQ(st.params, conv_p + fc_p);
}

// ---- whole-model gradient check ----

TEST(ModelGrad, FullModelAgainstFiniteDifferences) {
  auto schema = interleaved_schema();
  auto model = dtm::make_model<double>(schema, HeadMode::DtmMixed, tiny_backbone(), 37);
  auto images = random_images(2, 8, 8, 41);

  LabelMatrix labels = LabelMatrix::make(2, 5);
  labels.at(0, 0) = 1;
  labels.at(0, 3) = 1;
  labels.at(1, 1) = 1;
  labels.at(1, 2) = 1;
  LabelMatrix local_labels = LabelMatrix::make(2, 3);
  local_labels.at(0, 1) = 1;  // l1
  local_labels.at(1, 0) = 1;  // l0
  // 2x2 heatmaps: flat cells in [0, 4)
  std::vector<std::vector<std::vector<int>>> targets = {{{}, {1, 2}, {}}, {{0}, {}, {}}};
  dtm::LossWeights<double> w;
  w.positive_ratios = {0.4, 0.5, 0.6, 0.3, 0.7};

  auto named = model.params();
  std::vector<Ptr> inputs;
  for (auto& [name, p] : named) inputs.push_back(p);

  auto fn = [&](const std::vector<Ptr>&) {
    auto fwd = dtm::forward_model(model, images);
    auto l_wce = dtm::wce_loss(fwd.logits, labels, w);
    auto l_awk = dtm::awk_loss(fwd.heatmaps_gmp, local_labels, targets);
    return dtm::total_loss(l_awk, l_wce, 1.0, 1.0);
  };
  auto report = dtm::grad_check<double>(fn, inputs, 1e-5, 1e-4);
  EXPECT_TRUE(report.ok) << "max rel error " << report.max_rel_error << " " << report.message;
}

// ---- checkpointing ----

TEST(Checkpoint, SaveLoadRoundTripIsExact) {
  auto schema = interleaved_schema();
  auto model = dtm::make_model<double>(schema, HeadMode::DtmMixed, tiny_backbone(), 43);
  // Move the BN running stats off their defaults so they must round-trip.
  dtm::forward_model(model, random_images(4, 8, 8, 44));

  auto ckpt = dtm::model_to_checkpoint(model);
  ckpt.set_meta("note", "round-trip");
  const fs::path dir = fresh_dir("roundtrip");
  const std::string path = (dir / "model.ckpt").string();
  dtm::save_checkpoint(ckpt, path);
  const auto loaded = dtm::load_checkpoint(path);
  EXPECT_EQ(loaded.version, 1u);
  EXPECT_TRUE(loaded.schema == schema);
  EXPECT_EQ(loaded.meta, ckpt.meta);
  ASSERT_EQ(loaded.tensors.size(), ckpt.tensors.size());
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    EXPECT_EQ(loaded.tensors[i].name, ckpt.tensors[i].name);
    EXPECT_EQ(loaded.tensors[i].shape, ckpt.tensors[i].shape);
    EXPECT_EQ(loaded.tensors[i].values, ckpt.tensors[i].values);
  }

  // Re-saving the loaded checkpoint yields identical bytes.
  const std::string path2 = (dir / "model2.ckpt").string();
  dtm::save_checkpoint(loaded, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(b1, b2);
}

TEST(Checkpoint, ModelRebuildMatchesBitwise) {
  auto schema = interleaved_schema();
  auto model = dtm::make_model<double>(schema, HeadMode::DtmMixed, tiny_backbone(), 47);
  dtm::forward_model(model, random_images(4, 8, 8, 48));  // perturb running stats
  auto ckpt = dtm::model_to_checkpoint(model);
  auto rebuilt = dtm::model_from_checkpoint<double>(ckpt);

  auto pa = model.params();
  auto pb = rebuilt.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(pa[i].second->data, pb[i].second->data);
  }
  for (std::size_t i = 0; i < model.backbone.stages.size(); ++i) {
    EXPECT_EQ(model.backbone.stages[i].bn.running_mean, rebuilt.backbone.stages[i].bn.running_mean);
    EXPECT_EQ(model.backbone.stages[i].bn.running_var, rebuilt.backbone.stages[i].bn.running_var);
  }

  // Inference parity in eval mode.
  model.set_mode(BnMode::Eval);
  rebuilt.set_mode(BnMode::Eval);
  auto images = random_images(3, 8, 8, 49);
  auto a = dtm::forward_model(model, images);
  auto b = dtm::forward_model(rebuilt, images);
  EXPECT_EQ(a.logits->data, b.logits->data);
}

TEST(Checkpoint, FcBaselineRoundTrip) {
  auto schema = interleaved_schema();
  auto model = dtm::make_model<double>(schema, HeadMode::FcBaseline, tiny_backbone(), 53);
  dtm::forward_model(model, random_images(4, 8, 8, 54));
  auto rebuilt = dtm::model_from_checkpoint<double>(dtm::model_to_checkpoint(model));
  model.set_mode(BnMode::Eval);
  rebuilt.set_mode(BnMode::Eval);
  auto images = random_images(2, 8, 8, 55);
  EXPECT_EQ(dtm::forward_model(model, images).logits->data, dtm::forward_model(rebuilt, images).logits->data);
}

TEST(Checkpoint, CorruptFilesRejected) {
  const fs::path dir = fresh_dir("corrupt");
  const std::string not_ckpt = (dir / "junk.bin").string();
  {
    std::ofstream os(not_ckpt, std::ios::binary);
    os << "this is not a checkpoint";
  }
  EXPECT_THROW(dtm::load_checkpoint(not_ckpt), dtm::IoError);
  EXPECT_THROW(dtm::load_checkpoint((dir / "absent.ckpt").string()), dtm::IoError);

  // Truncate a real checkpoint.
  auto model = dtm::make_model<double>(interleaved_schema(), HeadMode::DtmGmp, tiny_backbone(), 59);
  auto ckpt = dtm::model_to_checkpoint(model);
  const std::string full = (dir / "full.ckpt").string();
  dtm::save_checkpoint(ckpt, full);
  std::ifstream in(full, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const std::string cut = (dir / "cut.ckpt").string();
  {
    std::ofstream os(cut, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(dtm::load_checkpoint(cut), dtm::IoError);
}

TEST(Checkpoint, MissingPiecesRejected) {
  auto model = dtm::make_model<double>(interleaved_schema(), HeadMode::DtmMixed, tiny_backbone(), 61);
  auto ckpt = dtm::model_to_checkpoint(model);
  auto no_meta = ckpt;
  no_meta.meta.clear();
  EXPECT_THROW(dtm::model_from_checkpoint<double>(no_meta), dtm::IoError);
  auto no_tensor = ckpt;
  no_tensor.tensors.erase(no_tensor.tensors.begin());
  EXPECT_THROW(dtm::model_from_checkpoint<double>(no_tensor), dtm::IoError);
  auto bad_shape = ckpt;
  bad_shape.tensors[0].values.push_back(0.0);
  bad_shape.tensors[0].shape = {static_cast<int>(bad_shape.tensors[0].values.size())};
  EXPECT_THROW(dtm::model_from_checkpoint<double>(bad_shape), dtm::IoError);
}

TEST(Checkpoint, HeadModeNamesRoundTrip) {
  for (HeadMode m : {HeadMode::FcBaseline, HeadMode::DtmGap, HeadMode::DtmGmp, HeadMode::DtmMixed})
    EXPECT_EQ(dtm::head_mode_from_name(dtm::head_mode_name(m)), m);
  EXPECT_THROW(dtm::head_mode_from_name("transformer"), dtm::ConfigError);
}
