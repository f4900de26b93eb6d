#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gseg/checkpoint.hpp"
#include "gseg/gradcheck.hpp"
#include "gseg/unet.hpp"

using gseg::BlockKind;
using gseg::Tape;
using gseg::UNetConfig;

namespace {

UNetConfig small_config(BlockKind kind = BlockKind::Basic) {
  UNetConfig c;
  c.block_kind = kind;
  c.depth = 3;
  c.base_filters = 8;
  c.num_classes = 2;
  c.input_side = 32;
  return c;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST(UNetConfig, DefaultChannelProgression) {
  UNetConfig c;  // defaults: depth 5, base 64
  c.validate();
  EXPECT_EQ(c.bottleneck_channels(), 1024);
  auto m = gseg::build_unet<float>(c, 1);
  std::vector<int> channels;
  for (auto& b : m.encoder) channels.push_back(b.f_out);
  EXPECT_EQ(channels, (std::vector<int>{64, 128, 256, 512, 1024}));
}

TEST(UNetConfig, InvalidConfigsNameViolation) {
  UNetConfig c = small_config();
  c.num_classes = 4;
  EXPECT_THROW(c.validate(), gseg::ConfigError);
  c = small_config();
  c.input_side = 30;  // not divisible by 4
  EXPECT_THROW(c.validate(), gseg::ConfigError);
  c = small_config();
  c.depth = 1;
  EXPECT_THROW(c.validate(), gseg::ConfigError);
  c = small_config(BlockKind::MultiRes);
  c.base_filters = 6;
  EXPECT_THROW(gseg::build_unet<float>(c, 1), gseg::ConfigError);
}

TEST(UNet, MultiResSmallBaseConstructs) {
  UNetConfig c = small_config(BlockKind::MultiRes);
  auto m = gseg::build_unet<float>(c, 3);
  for (auto& b : m.encoder) EXPECT_EQ(b.f_out % 4, 0);
  for (auto& b : m.decoder) EXPECT_EQ(b.f_out % 4, 0);
}

TEST(UNet, SameSeedGivesBitIdenticalParameters) {
  UNetConfig c = small_config(BlockKind::Residual);
  auto a = gseg::build_unet<float>(c, 42);
  auto b = gseg::build_unet<float>(c, 42);
  auto pa = a.named_params();
  auto pb = b.named_params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    ASSERT_EQ(pa[i].second->numel(), pb[i].second->numel());
    for (std::size_t j = 0; j < pa[i].second->numel(); ++j)
      EXPECT_EQ((*pa[i].second)[j], (*pb[i].second)[j]);
  }
  auto d = gseg::build_unet<float>(c, 43);
  bool any_diff = false;
  auto pd = d.named_params();
  for (std::size_t j = 0; j < pa[0].second->numel(); ++j)
    any_diff |= (*pa[0].second)[j] != (*pd[0].second)[j];
  EXPECT_TRUE(any_diff);
}

TEST(UNet, ForwardShapeAndSimplex) {
  for (auto kind :
       {BlockKind::Basic, BlockKind::Residual, BlockKind::MultiRes}) {
    UNetConfig c = small_config(kind);
    auto m = gseg::build_unet<float>(c, 5);
    gseg::Rng rng(6);
    auto x = gseg::rand_uniform<float>({2, 3, 32, 32}, 0.f, 1.f, rng);
    auto y = gseg::forward(m, x);
    ASSERT_EQ(y.shape, (gseg::Shape{2, 2, 32, 32}));
    for (int n = 0; n < 2; ++n)
      for (int p = 0; p < 32 * 32; ++p) {
        float s = y[(n * 2 + 0) * 1024 + p] + y[(n * 2 + 1) * 1024 + p];
        EXPECT_NEAR(s, 1.f, 1e-5);
      }
  }
}

TEST(UNet, WrongInputSpatialSizeRejected) {
  auto m = gseg::build_unet<float>(small_config(), 7);
  auto x = gseg::zeros<float>({1, 3, 64, 64});
  EXPECT_THROW(gseg::forward(m, x), gseg::ShapeError);
  auto x2 = gseg::zeros<float>({1, 1, 32, 32});
  EXPECT_THROW(gseg::forward(m, x2), gseg::ShapeError);
}

TEST(UNet, FreshModelOutputsNearUniform) {
  // over 10 seeds the mean |p - 1/C| stays inside 0.2
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto m = gseg::build_unet<float>(small_config(), seed);
    gseg::Rng rng(100 + seed);
    auto x = gseg::rand_uniform<float>({1, 3, 32, 32}, 0.f, 1.f, rng);
    auto y = gseg::forward(m, x);
    double dev = 0;
    for (std::size_t i = 0; i < y.numel(); ++i)
      dev += std::fabs(static_cast<double>(y[i]) - 0.5);
    dev /= static_cast<double>(y.numel());
    EXPECT_LT(dev, 0.2) << "seed " << seed;
  }
}

TEST(UNet, ParamCountMatchesEnumeration) {
  for (auto kind :
       {BlockKind::Basic, BlockKind::Residual, BlockKind::MultiRes}) {
    UNetConfig c = small_config(kind);
    auto m = gseg::build_unet<float>(c, 8);
    std::size_t n = 0;
    for (auto& [name, t] : m.named_params()) n += t->numel();
    EXPECT_EQ(n, gseg::param_count(c)) << gseg::block_kind_name(kind);
  }
}

TEST(UNet, HeadAloneCount) {
  // 1x1 conv head, 64 input channels, 2 classes: 64*2 + 2 = 130
  gseg::Rng rng(9);
  auto head = gseg::make_conv<float>(2, 64, 1, rng);
  EXPECT_EQ(head.w.numel() + head.b.numel(), 130u);
}

TEST(UNet, ResidualStrictlyLargerThanBasic) {
  UNetConfig cb = small_config(BlockKind::Basic);
  UNetConfig cr = small_config(BlockKind::Residual);
  EXPECT_GT(gseg::param_count(cr), gseg::param_count(cb));
}

TEST(UNet, FullSizeBasicParamCount) {
  UNetConfig c;  // depth 5, base 64, C=2
  EXPECT_EQ(gseg::param_count(c), 34513410u);
  auto m = gseg::build_unet<float>(c, 1);
  std::size_t n = 0;
  for (auto& [name, t] : m.named_params()) n += t->numel();
  EXPECT_EQ(n, 34513410u);
}

TEST(UNet, FullLossGradientMatchesFiniteDifferences) {
  UNetConfig c = small_config(BlockKind::Residual);
  c.input_side = 8;
  auto m = gseg::build_unet<double>(c, 11);
  gseg::Rng rng(12);
  // move off the degenerate zero-bias init point (exact ReLU kinks)
  for (auto& [name, t] : m.named_params()) {
    if (name.ends_with(".b"))
      for (auto& v : *t->data) v = rng.uniform(-0.3, 0.3);
  }
  auto x = gseg::rand_uniform<double>({1, 3, 8, 8}, 0.0, 1.0, rng);
  auto probe = gseg::rand_uniform<double>({1, 2, 8, 8}, -1.0, 1.0, rng);
  // sample a handful of weights from every parameter tensor
  std::vector<gseg::Tensor<double>*> inputs;
  for (auto& [name, t] : m.named_params()) inputs.push_back(t);
  gseg::GradCheckOptions opts;
  opts.max_coords_per_input = 2;
  double err = gseg::grad_check(
      [&](Tape<double>* t) {
        return gseg::sum_all(gseg::mul(gseg::forward(m, x, t), probe, t), t);
      },
      inputs, 1e-5, opts);
  EXPECT_LT(err, 1e-5);
}

TEST(Checkpoint, RoundTripBitExactForward) {
  UNetConfig c = small_config(BlockKind::MultiRes);
  auto m = gseg::build_unet<float>(c, 13);
  const auto path = temp_file("gseg_ckpt_roundtrip.gseg");
  gseg::save_checkpoint(m, path.string());
  auto loaded = gseg::load_checkpoint(path.string());
  auto pa = m.named_params();
  auto pb = loaded.named_params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].second->numel(); ++j)
      ASSERT_EQ((*pa[i].second)[j], (*pb[i].second)[j]) << pa[i].first;
  gseg::Rng rng(14);
  auto x = gseg::rand_uniform<float>({1, 3, 32, 32}, 0.f, 1.f, rng);
  auto ya = gseg::forward(m, x);
  auto yb = gseg::forward(loaded, x);
  for (std::size_t i = 0; i < ya.numel(); ++i) ASSERT_EQ(ya[i], yb[i]);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileRejected) {
  auto m = gseg::build_unet<float>(small_config(), 15);
  const auto path = temp_file("gseg_ckpt_trunc.gseg");
  gseg::save_checkpoint(m, path.string());
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  EXPECT_THROW(gseg::load_checkpoint(path.string()), gseg::CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, BadMagicAndVersionRejected) {
  auto m = gseg::build_unet<float>(small_config(), 16);
  const auto path = temp_file("gseg_ckpt_magic.gseg");
  gseg::save_checkpoint(m, path.string());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(gseg::load_checkpoint(path.string()), gseg::CheckpointError);
  gseg::save_checkpoint(m, path.string());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char v2[4] = {2, 0, 0, 0};
    f.write(v2, 4);
  }
  EXPECT_THROW(gseg::load_checkpoint(path.string()), gseg::CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(gseg::load_checkpoint("/nonexistent/path.gseg"), gseg::IoError);
}

TEST(Checkpoint, InconsistentConfigFieldRejected) {
  auto m = gseg::build_unet<float>(small_config(), 17);
  const auto path = temp_file("gseg_ckpt_cfg.gseg");
  gseg::save_checkpoint(m, path.string());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(12);  // depth field
    const char zero[4] = {0, 0, 0, 0};
    f.write(zero, 4);
  }
  EXPECT_THROW(gseg::load_checkpoint(path.string()), gseg::CheckpointError);
  std::filesystem::remove(path);
}
