#include <gtest/gtest.h>

#include "gseg/blocks.hpp"
#include "gseg/gradcheck.hpp"

using gseg::BlockKind;
using gseg::BlockParams;
using gseg::Tape;
using gseg::Tensor;

namespace {

template <typename T>
void fill_zero(BlockParams<T>& p, std::size_t from, std::size_t to) {
  for (std::size_t i = from; i < to; ++i) {
    std::fill(p.convs[i].w.data->begin(), p.convs[i].w.data->end(), T(0));
    std::fill(p.convs[i].b.data->begin(), p.convs[i].b.data->end(), T(0));
  }
}

std::size_t count_block(BlockParams<double>& p) {
  std::size_t n = 0;
  for (auto& c : p.convs) n += c.w.numel() + c.b.numel();
  return n;
}

}  // namespace

TEST(BasicBlock, PaperShape) {
  gseg::Rng rng(1);
  auto p = gseg::make_block_params<float>(BlockKind::Basic, 3, 64, rng);
  auto x = gseg::rand_uniform<float>({1, 3, 256, 256}, -1.f, 1.f, rng);
  auto y = gseg::block_forward(x, p);
  EXPECT_EQ(y.shape, (gseg::Shape{1, 64, 256, 256}));
}

TEST(BasicBlock, ZeroWeightsGiveZeroOutput) {
  gseg::Rng rng(2);
  auto p = gseg::make_block_params<double>(BlockKind::Basic, 2, 4, rng);
  fill_zero(p, 0, p.convs.size());
  auto x = gseg::rand_uniform<double>({1, 2, 6, 6}, -1, 1, rng);
  auto y = gseg::block_forward(x, p);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(ResidualBlock, ZeroStackReducesToNormalizer) {
  gseg::Rng rng(3);
  auto p = gseg::make_block_params<double>(BlockKind::Residual, 2, 4, rng);
  fill_zero(p, 1, 3);  // conv1, conv2 zeroed; norm kept
  auto x = gseg::rand_uniform<double>({1, 2, 6, 6}, -1, 1, rng);
  auto y = gseg::block_forward(x, p);
  auto a = gseg::relu(gseg::conv2d(x, p.convs[0].w, p.convs[0].b, 1, 1));
  ASSERT_EQ(y.shape, a.shape);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], a[i]);
}

TEST(ResidualBlock, ChannelDoublingShape) {
  gseg::Rng rng(4);
  auto p = gseg::make_block_params<float>(BlockKind::Residual, 64, 128, rng);
  auto x = gseg::rand_uniform<float>({1, 64, 128, 128}, -1.f, 1.f, rng);
  auto y = gseg::block_forward(x, p);
  EXPECT_EQ(y.shape, (gseg::Shape{1, 128, 128, 128}));
}

TEST(MultiResBlock, BranchChannelSplit) {
  gseg::Rng rng(5);
  auto p = gseg::make_block_params<float>(BlockKind::MultiRes, 3, 64, rng);
  EXPECT_EQ(p.convs[0].w.dim(0), 16);  // f_out/4
  EXPECT_EQ(p.convs[1].w.dim(0), 16);  // f_out/4
  EXPECT_EQ(p.convs[2].w.dim(0), 32);  // f_out/2
  EXPECT_EQ(p.convs[0].w.dim(0) + p.convs[1].w.dim(0) + p.convs[2].w.dim(0),
            64);
  EXPECT_EQ(p.convs[3].w.dim(2), 1);  // 1x1 residual conv
}

TEST(MultiResBlock, BranchSumsEqualFout) {
  gseg::Rng rng(6);
  for (int fout : {8, 64, 256, 1024}) {
    auto p = gseg::make_block_params<float>(BlockKind::MultiRes, 3, fout, rng);
    EXPECT_EQ(p.convs[0].w.dim(0) + p.convs[1].w.dim(0) + p.convs[2].w.dim(0),
              fout);
  }
}

TEST(MultiResBlock, IndivisibleFoutRejectedAtConstruction) {
  gseg::Rng rng(7);
  EXPECT_THROW(gseg::make_block_params<float>(BlockKind::MultiRes, 3, 6, rng),
               gseg::ConfigError);
}

TEST(MultiResBlock, ZeroResidualPathGivesPureConcat) {
  gseg::Rng rng(8);
  auto p = gseg::make_block_params<double>(BlockKind::MultiRes, 2, 8, rng);
  fill_zero(p, 3, 4);  // zero the 1x1 conv
  auto x = gseg::rand_uniform<double>({1, 2, 6, 6}, -1, 1, rng);
  auto y = gseg::block_forward(x, p);
  auto b1 = gseg::relu(gseg::conv2d(x, p.convs[0].w, p.convs[0].b, 1, 1));
  auto b2 = gseg::relu(gseg::conv2d(b1, p.convs[1].w, p.convs[1].b, 1, 1));
  auto b3 = gseg::relu(gseg::conv2d(b2, p.convs[2].w, p.convs[2].b, 1, 1));
  auto cat = gseg::concat_channels(gseg::concat_channels(b1, b2), b3);
  ASSERT_EQ(y.shape, cat.shape);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], cat[i]);
}

TEST(Blocks, InterchangeableShapeContract) {
  gseg::Rng rng(9);
  for (auto kind :
       {BlockKind::Basic, BlockKind::Residual, BlockKind::MultiRes}) {
    for (auto [h, w] : {std::pair{4, 6}, std::pair{8, 8}, std::pair{10, 4}}) {
      auto p = gseg::make_block_params<float>(kind, 3, 8, rng);
      auto x = gseg::rand_uniform<float>({2, 3, h, w}, -1.f, 1.f, rng);
      auto y = gseg::block_forward(x, p);
      EXPECT_EQ(y.shape, (gseg::Shape{2, 8, h, w}))
          << gseg::block_kind_name(kind);
    }
  }
}

TEST(Blocks, ChannelMismatchRejected) {
  gseg::Rng rng(10);
  auto p = gseg::make_block_params<float>(BlockKind::Basic, 4, 8, rng);
  auto x = gseg::zeros<float>({1, 3, 4, 4});
  EXPECT_THROW(gseg::block_forward(x, p), gseg::ShapeError);
}

TEST(Blocks, ParamCountClosedForm) {
  gseg::Rng rng(11);
  const std::pair<int, int> cases[] = {{3, 64}, {2, 8}, {64, 128}, {16, 16}};
  for (auto [fin, fout] : cases) {
    for (auto kind :
         {BlockKind::Basic, BlockKind::Residual, BlockKind::MultiRes}) {
      auto p = gseg::make_block_params<double>(kind, fin, fout, rng);
      EXPECT_EQ(count_block(p),
                gseg::block_param_count(kind, static_cast<std::size_t>(fin),
                                        static_cast<std::size_t>(fout)))
          << gseg::block_kind_name(kind) << " " << fin << "->" << fout;
    }
  }
  // spot-check the formulas themselves
  EXPECT_EQ(gseg::block_param_count(BlockKind::Basic, 3, 64),
            9u * 3 * 64 + 9u * 64 * 64 + 2u * 64);
  EXPECT_EQ(gseg::block_param_count(BlockKind::Residual, 3, 64),
            9u * 3 * 64 + 18u * 64 * 64 + 3u * 64);
  EXPECT_EQ(gseg::block_param_count(BlockKind::MultiRes, 3, 64),
            9u * 3 * 16 + 9u * 16 * 16 + 9u * 16 * 32 + 3u * 64 +
                (16u + 16 + 32 + 64));
}

TEST(Blocks, GradCheckAllKinds) {
  for (auto kind :
       {BlockKind::Basic, BlockKind::Residual, BlockKind::MultiRes}) {
    gseg::Rng rng(20 + static_cast<int>(kind));
    auto p = gseg::make_block_params<double>(kind, 2, 8, rng);
    // check at a generic point: the zero-bias init point puts exact ReLU
    // kinks wherever a window of the previous activation is all zero
    for (auto& c : p.convs)
      for (auto& b : *c.b.data) b = rng.uniform(-0.5, 0.5);
    auto x = gseg::rand_uniform<double>({1, 2, 8, 8}, -1, 1, rng);
    auto probe = gseg::rand_uniform<double>({1, 8, 8, 8}, -1, 1, rng);
    std::vector<gseg::Tensor<double>*> inputs{&x};
    for (auto& c : p.convs) {
      inputs.push_back(&c.w);
      inputs.push_back(&c.b);
    }
    gseg::GradCheckOptions opts;
    opts.max_coords_per_input = 24;
    double err = gseg::grad_check(
        [&](Tape<double>* t) {
          return gseg::sum_all(gseg::mul(gseg::block_forward(x, p, t), probe,
                                         t),
                               t);
        },
        inputs, 1e-5, opts);
    EXPECT_LT(err, 1e-6) << gseg::block_kind_name(kind);
  }
}
