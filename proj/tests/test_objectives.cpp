#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <vector>

#include "qsgld/objectives.hpp"

using namespace qsgld;

namespace {

ParamVector fd_gradient(AnalyticKind kind, const ParamVector& x, double h = 1e-6) {
  ParamVector g(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) {
    ParamVector up = x;
    ParamVector dn = x;
    up[i] += h;
    dn[i] -= h;
    g[i] = (eval_analytic(kind, up).value - eval_analytic(kind, dn).value) / (2 * h);
  }
  return g;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

struct IdxFiles {
  std::filesystem::path dir;
  std::string images;
  std::string labels;

  explicit IdxFiles(std::size_t count, std::uint32_t label_magic = 0x801) {
    dir = std::filesystem::temp_directory_path() /
          ("qsgld_idx_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
           ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(dir);
    images = (dir / "img.idx").string();
    labels = (dir / "lab.idx").string();
    std::ofstream im(images, std::ios::binary);
    put_be32(im, 0x803);
    put_be32(im, static_cast<std::uint32_t>(count));
    put_be32(im, 28);
    put_be32(im, 28);
    for (std::size_t i = 0; i < count * 784; ++i) {
      im.put(static_cast<char>(i % 256));
    }
    std::ofstream lb(labels, std::ios::binary);
    put_be32(lb, label_magic);
    put_be32(lb, static_cast<std::uint32_t>(count));
    for (std::size_t i = 0; i < count; ++i) {
      lb.put(static_cast<char>(i % 10));
    }
  }
  ~IdxFiles() { std::filesystem::remove_all(dir); }
};

} // namespace

TEST(EvalAnalytic, QuadraticExample) {
  const auto lg = eval_analytic(AnalyticKind::quadratic, ParamVector{3, 4});
  EXPECT_DOUBLE_EQ(lg.value, 12.5);
  EXPECT_EQ(lg.grad, (ParamVector{3, 4}));
}

TEST(EvalAnalytic, RosenbrockMinimum) {
  const auto lg = eval_analytic(AnalyticKind::rosenbrock, ParamVector{1, 1});
  EXPECT_EQ(lg.value, 0.0);
  EXPECT_EQ(lg.grad, (ParamVector{0, 0}));
}

TEST(EvalAnalytic, RastriginMinimum) {
  const auto lg = eval_analytic(AnalyticKind::rastrigin, ParamVector{0, 0});
  EXPECT_NEAR(lg.value, 0.0, 1e-12);
  EXPECT_NEAR(lg.grad[0], 0.0, 1e-12);
  EXPECT_NEAR(lg.grad[1], 0.0, 1e-12);
}

TEST(EvalAnalytic, RosenbrockArity) {
  EXPECT_THROW(eval_analytic(AnalyticKind::rosenbrock, ParamVector{1}), UsageError);
}

TEST(EvalAnalytic, GradientsMatchFiniteDifferences) {
  RngStream rng(7);
  for (auto kind : {AnalyticKind::quadratic, AnalyticKind::rosenbrock, AnalyticKind::rastrigin}) {
    for (int t = 0; t < 100; ++t) {
      ParamVector x(3);
      for (double& v : x) {
        v = rng.uniform(-2, 2);
      }
      const auto g = eval_analytic(kind, x).grad;
      const auto fd = fd_gradient(kind, x);
      for (std::size_t i = 0; i < x.dim(); ++i) {
        ASSERT_NEAR(g[i], fd[i], 1e-5 * std::max(1.0, std::abs(fd[i]))) << to_string(kind);
      }
    }
  }
}

TEST(EvalAnalytic, ValuesAreNonNegative) {
  RngStream rng(8);
  for (auto kind : {AnalyticKind::quadratic, AnalyticKind::rosenbrock, AnalyticKind::rastrigin}) {
    for (int t = 0; t < 200; ++t) {
      ParamVector x{rng.uniform(-5, 5), rng.uniform(-5, 5)};
      EXPECT_GE(eval_analytic(kind, x).value, 0.0);
    }
  }
}

TEST(AnalyticKind, NamesRoundTrip) {
  for (auto kind : {AnalyticKind::quadratic, AnalyticKind::rosenbrock, AnalyticKind::rastrigin}) {
    EXPECT_EQ(analytic_kind_from_string(to_string(kind)), kind);
  }
  EXPECT_THROW(analytic_kind_from_string("ackley"), UsageError);
}

TEST(MlpLossGrad, ZeroWeightsGiveLogClasses) {
  MlpSpec spec{{4, 10}, Activation::relu};
  Dataset ds;
  ds.n = 1;
  ds.p = 4;
  ds.classes = 10;
  ds.features = {0.1, 0.2, 0.3, 0.4};
  ds.labels = {3};
  const std::vector<std::size_t> batch{0};
  const auto lg = mlp_loss_grad(spec, ParamVector(spec.param_count()), ds, batch);
  EXPECT_NEAR(lg.value, std::log(10.0), 1e-12);
}

TEST(MlpLossGrad, BackpropMatchesFiniteDifferences) {
  for (auto act : {Activation::tanh, Activation::relu}) {
    MlpSpec spec{{2, 8, 2}, act};
    RngStream rng(9);
    const auto ds = make_blobs(20, rng);
    const auto params = mlp_init(spec, rng);
    const auto batch = iota(ds.n);
    const auto lg = mlp_loss_grad(spec, params, ds, batch);
    for (std::size_t i = 0; i < params.dim(); ++i) {
      ParamVector up = params;
      ParamVector dn = params;
      up[i] += 1e-6;
      dn[i] -= 1e-6;
      const double fd =
          (mlp_loss_grad(spec, up, ds, batch).value - mlp_loss_grad(spec, dn, ds, batch).value) / 2e-6;
      ASSERT_NEAR(lg.grad[i], fd, 1e-6) << "param " << i;
    }
  }
}

TEST(MlpLossGrad, DuplicatedBatchHasSameMeanLoss) {
  MlpSpec spec{{2, 8, 2}, Activation::tanh};
  RngStream rng(10);
  const auto ds = make_blobs(10, rng);
  const auto params = mlp_init(spec, rng);
  auto once = iota(ds.n);
  auto twice = once;
  twice.insert(twice.end(), once.begin(), once.end());
  const auto a = mlp_loss_grad(spec, params, ds, once);
  const auto b = mlp_loss_grad(spec, params, ds, twice);
  EXPECT_NEAR(a.value, b.value, 1e-12);
  for (std::size_t i = 0; i < params.dim(); ++i) {
    EXPECT_NEAR(a.grad[i], b.grad[i], 1e-12);
  }
}

TEST(MlpLossGrad, GradientDescentReducesLoss) {
  MlpSpec spec{{2, 8, 2}, Activation::tanh};
  RngStream rng(11);
  const auto ds = make_blobs(64, rng);
  auto params = mlp_init(spec, rng);
  const auto batch = iota(ds.n);
  const double start = mlp_loss_grad(spec, params, ds, batch).value;
  for (int k = 0; k < 100; ++k) {
    const auto lg = mlp_loss_grad(spec, params, ds, batch);
    params = axpy(-0.1, lg.grad, params);
  }
  const double end = mlp_loss_grad(spec, params, ds, batch).value;
  EXPECT_LT(end, start);
  EXPECT_GE(end, 0.0);
}

TEST(MlpLossGrad, LabelOutOfRangeIsDataError) {
  MlpSpec spec{{2, 2}, Activation::relu};
  Dataset ds;
  ds.n = 1;
  ds.p = 2;
  ds.classes = 2;
  ds.features = {0, 0};
  ds.labels = {5};
  const std::vector<std::size_t> batch{0};
  EXPECT_THROW(mlp_loss_grad(spec, ParamVector(spec.param_count()), ds, batch), DataError);
}

TEST(MlpLossGrad, WrongParamCountIsRejected) {
  MlpSpec spec{{2, 2}, Activation::relu};
  RngStream rng(1);
  const auto ds = make_blobs(4, rng);
  const auto batch = iota(ds.n);
  EXPECT_ANY_THROW(mlp_loss_grad(spec, ParamVector(3), ds, batch));
}

TEST(MlpSpec, ParamCount) {
  EXPECT_EQ((MlpSpec{{784, 64, 10}}).param_count(), 784u * 64 + 64 + 64 * 10 + 10);
  EXPECT_EQ((MlpSpec{{2, 16, 2}}).param_count(), 2u * 16 + 16 + 16 * 2 + 2);
}

TEST(LoadIdx, LimitCapsSamples) {
  IdxFiles files(10);
  const auto ds = load_idx(files.images, files.labels, 4);
  EXPECT_EQ(ds.n, 4u);
  EXPECT_EQ(ds.p, 784u);
  EXPECT_EQ(ds.labels[3], 3);
  EXPECT_DOUBLE_EQ(ds.features[255], 1.0);
  for (double v : ds.features) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(LoadIdx, NoLimitReadsAll) {
  IdxFiles files(10);
  EXPECT_EQ(load_idx(files.images, files.labels).n, 10u);
}

TEST(LoadIdx, WrongLabelMagicIsFormatError) {
  IdxFiles files(10, 0x803);
  EXPECT_THROW(load_idx(files.images, files.labels), FormatError);
}

TEST(LoadIdx, SwappedFilesIsFormatError) {
  IdxFiles files(10);
  EXPECT_THROW(load_idx(files.labels, files.images), FormatError);
}

TEST(LoadIdx, ZeroLimitGivesEmptyDataset) {
  IdxFiles files(10);
  const auto ds = load_idx(files.images, files.labels, 0);
  EXPECT_EQ(ds.n, 0u);
  EXPECT_TRUE(ds.features.empty());
}

TEST(LoadIdx, TruncatedFileReportsOffset) {
  IdxFiles files(10);
  std::filesystem::resize_file(files.images, 16 + 784 * 3);
  try {
    load_idx(files.images, files.labels);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 16u + 784 * 3);
  }
}

TEST(LoadIdx, MissingFileIsFormatError) {
  EXPECT_THROW(load_idx("/nonexistent/a", "/nonexistent/b"), FormatError);
}

TEST(MakeBatches, SingleBatchIsIdentityPartition) {
  RngStream rng(1);
  const auto b = make_batches(100, 100, rng);
  ASSERT_EQ(b.size(), 1u);
  std::set<std::size_t> seen(b[0].begin(), b[0].end());
  EXPECT_EQ(seen.size(), 100u);
}

TEST(MakeBatches, CeilingPartitionSizes) {
  RngStream rng(2);
  const auto b = make_batches(100, 30, rng);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].size(), 30u);
  EXPECT_EQ(b[1].size(), 30u);
  EXPECT_EQ(b[2].size(), 30u);
  EXPECT_EQ(b[3].size(), 10u);
}

TEST(MakeBatches, EverySampleExactlyOnceProperty) {
  RngStream rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.index(500);
    const std::size_t bs = 1 + rng.index(n);
    const auto b = make_batches(n, bs, rng);
    EXPECT_EQ(b.size(), (n + bs - 1) / bs);
    std::vector<int> count(n, 0);
    for (const auto& batch : b) {
      for (auto i : batch) {
        ++count[i];
      }
    }
    for (int c : count) {
      ASSERT_EQ(c, 1);
    }
  }
}

TEST(MakeBatches, SameSeedSameSchedule) {
  RngStream a(4);
  RngStream b(4);
  EXPECT_EQ(make_batches(100, 30, a), make_batches(100, 30, b));
}

TEST(MakeBatches, InvalidBatchSize) {
  RngStream rng(5);
  EXPECT_THROW(make_batches(10, 0, rng), UsageError);
  EXPECT_THROW(make_batches(10, 11, rng), UsageError);
}

TEST(MlpObjective, AccuracyAndLossAreReported) {
  RngStream rng(6);
  auto train = std::make_shared<const Dataset>(make_blobs(50, rng));
  auto test = std::make_shared<const Dataset>(make_blobs(20, rng));
  MlpObjective obj(MlpSpec{{2, 4, 2}}, train, test, 10);
  EXPECT_EQ(obj.batch_count(), 5u);
  const auto x = mlp_init(obj.spec(), rng);
  ASSERT_TRUE(obj.accuracy(x).has_value());
  EXPECT_GE(*obj.accuracy(x), 0.0);
  EXPECT_LE(*obj.accuracy(x), 1.0);
  EXPECT_TRUE(obj.eval_loss(x).has_value());
  RngStream batch_rng(1);
  EXPECT_THROW(obj.batch_loss_grad(0, x, batch_rng), UsageError);
  obj.begin_epoch(batch_rng);
  EXPECT_NO_THROW(obj.batch_loss_grad(4, x, batch_rng));
}

TEST(MlpObjective, ShapeMismatchRejected) {
  RngStream rng(6);
  auto train = std::make_shared<const Dataset>(make_blobs(50, rng));
  EXPECT_THROW(MlpObjective(MlpSpec{{3, 2}}, train, nullptr, 10), UsageError);
}
