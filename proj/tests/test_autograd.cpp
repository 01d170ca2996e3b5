#include "gradcheck.hpp"
#include "oracles.hpp"
#include "recon3d/checkpoint.hpp"
#include "recon3d/conv.hpp"
#include "recon3d/optim.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace recon3d;
using gradcheck::random_param;

namespace {

// Reduces a matrix to a scalar with fixed random weights so every output
// entry contributes a distinct gradient.
Var<double> probe(Tape<double>& tape, Var<double> y, unsigned seed = 99) {
  std::mt19937_64 rng(seed);
  Mat<double> w = randn<double>(y.rows(), y.cols(), 1.0, rng);
  return sum(mul(y, tape.constant(w)));
}

struct OpCase {
  const char* name;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)> build;
};

std::vector<OpCase> op_cases() {
  using V = std::vector<Var<double>>;
  auto flat = std::make_shared<std::vector<int>>(std::vector<int>{0, 5, -1, 3, 3, 7, 11, 2});
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](Tape<double>&, V& v) { return matmul(v[0], v[1]); }},
      {"matmul_nt", {{3, 4}, {5, 4}}, [](Tape<double>&, V& v) { return matmul_nt(v[0], v[1]); }},
      {"transpose", {{3, 4}}, [](Tape<double>&, V& v) { return transpose(v[0]); }},
      {"add", {{3, 4}, {3, 4}}, [](Tape<double>&, V& v) { return add(v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](Tape<double>&, V& v) { return sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](Tape<double>&, V& v) { return mul(v[0], v[1]); }},
      {"scale", {{3, 4}}, [](Tape<double>&, V& v) { return scale(v[0], -1.7); }},
      {"add_scalar", {{3, 4}}, [](Tape<double>&, V& v) { return add_scalar(v[0], 0.3); }},
      {"mul_scalar", {{3, 4}, {1, 1}}, [](Tape<double>&, V& v) { return mul_scalar(v[0], v[1]); }},
      {"add_row", {{3, 4}, {1, 4}}, [](Tape<double>&, V& v) { return add_row(v[0], v[1]); }},
      {"mul_row", {{3, 4}, {1, 4}}, [](Tape<double>&, V& v) { return mul_row(v[0], v[1]); }},
      {"broadcast_rows", {{1, 4}}, [](Tape<double>&, V& v) { return broadcast_rows(v[0], 3); }},
      {"silu", {{3, 4}}, [](Tape<double>&, V& v) { return silu(v[0]); }},
      {"sigmoid", {{3, 4}}, [](Tape<double>&, V& v) { return sigmoid(v[0]); }},
      {"tanh", {{3, 4}}, [](Tape<double>&, V& v) { return tanh(v[0]); }},
      {"gelu", {{3, 4}}, [](Tape<double>&, V& v) { return gelu(v[0]); }},
      {"exp", {{3, 4}}, [](Tape<double>&, V& v) { return exp(v[0]); }},
      {"softmax_rows", {{3, 5}}, [](Tape<double>&, V& v) { return softmax_rows(v[0]); }},
      {"softmax_causal", {{3, 5}}, [](Tape<double>&, V& v) { return softmax_rows(v[0], true, 2); }},
      {"log_softmax_rows", {{3, 5}}, [](Tape<double>&, V& v) { return log_softmax_rows(v[0]); }},
      {"layernorm_rows", {{3, 6}}, [](Tape<double>&, V& v) { return layernorm_rows(v[0]); }},
      {"l2_normalize_rows", {{3, 6}}, [](Tape<double>&, V& v) { return l2_normalize_rows(v[0]); }},
      {"slice_rows", {{5, 3}}, [](Tape<double>&, V& v) { return slice_rows(v[0], 1, 3); }},
      {"slice_cols", {{3, 5}}, [](Tape<double>&, V& v) { return slice_cols(v[0], 2, 2); }},
      {"concat_rows", {{2, 3}, {4, 3}}, [](Tape<double>&, V& v) { return concat_rows<double>({v[0], v[1], v[0]}); }},
      {"concat_cols", {{3, 2}, {3, 4}}, [](Tape<double>&, V& v) { return concat_cols<double>({v[1], v[0]}); }},
      {"gather_rows", {{4, 3}}, [](Tape<double>&, V& v) { return gather_rows(v[0], {0, 3, 3, 1, 0}); }},
      {"gather", {{4, 3}}, [flat](Tape<double>&, V& v) { return gather(v[0], 2, 4, flat); }},
      {"sum", {{3, 4}}, [](Tape<double>&, V& v) { return sum(v[0]); }},
      {"sum_rows", {{3, 4}}, [](Tape<double>&, V& v) { return sum_rows(v[0]); }},
      {"mean", {{3, 4}}, [](Tape<double>&, V& v) { return mean(v[0]); }},
      {"cross_entropy", {{4, 6}}, [](Tape<double>&, V& v) { return cross_entropy(v[0], {2, -1, 5, 0}); }},
      {"masked_mse_rows", {{4, 3}},
       [](Tape<double>& tp, V& v) {
         std::mt19937_64 rng(5);
         (void)tp;
         return masked_mse_rows(v[0], randn<double>(4, 3, 1.0, rng), {1, 0, 1, 1});
       }},
  };
}

}  // namespace

TEST(Autograd, EveryOpMatchesCentralDifferences) {
  std::mt19937_64 rng(1);
  for (const auto& c : op_cases()) {
    std::vector<Parameter<double>> params;
    for (std::size_t k = 0; k < c.shapes.size(); ++k) {
      params.push_back(random_param(std::string(c.name) + std::to_string(k), c.shapes[k].first, c.shapes[k].second, rng));
    }
    std::vector<Parameter<double>*> ptrs;
    for (auto& p : params) ptrs.push_back(&p);
    auto f = [&](Tape<double>& tape) {
      std::vector<Var<double>> vars;
      for (auto& p : params) vars.push_back(tape.param(p));
      return probe(tape, c.build(tape, vars));
    };
    const auto r = gradcheck::check(ptrs, f);
    EXPECT_LT(r.max_rel, 1e-6) << c.name << ": " << r.worst;
  }
}

TEST(Autograd, ReluAwayFromKink) {
  Parameter<double> p;
  p.name = "x";
  p.value.resize(2, 3);
  p.value << -1.0, 0.5, 2.0, -0.3, 0.7, -2.0;
  const auto r = gradcheck::check({&p}, [&](Tape<double>& t) { return probe(t, relu(t.param(p))); });
  EXPECT_LT(r.max_rel, 1e-8);
}

TEST(Autograd, SharedParameterAccumulates) {
  Parameter<double> p;
  p.name = "x";
  p.value = Mat<double>::Constant(1, 1, 3.0);
  p.zero_grad();
  Tape<double> tape;
  Var<double> x = tape.param(p);
  tape.backward(mul(x, tape.param(p)));  // x^2, both uses bind to one leaf
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 6.0);
}

TEST(Autograd, NoGradTapeLeavesGradientsUntouched) {
  Parameter<double> p;
  p.name = "x";
  p.value = Mat<double>::Ones(2, 2);
  p.zero_grad();
  Tape<double> tape(false);
  Var<double> y = sum(mul(tape.param(p), tape.param(p)));
  EXPECT_DOUBLE_EQ(y.item(), 4.0);
  EXPECT_EQ(p.grad.squaredNorm(), 0.0);
}

TEST(Autograd, ShapeErrorsThrow) {
  Tape<double> tape;
  Var<double> a = tape.constant(Mat<double>::Zero(2, 3));
  Var<double> b = tape.constant(Mat<double>::Zero(3, 3));
  EXPECT_THROW(add(a, b), std::invalid_argument);
  EXPECT_THROW(cross_entropy(a, {0}), std::invalid_argument);
  EXPECT_THROW(cross_entropy(a, {-1, -1}), std::invalid_argument);
  EXPECT_THROW(cross_entropy(a, {0, 3}), std::out_of_range);
  EXPECT_THROW(masked_mse_rows(a, Mat<double>(Mat<double>::Zero(2, 3)), {0, 0}), std::invalid_argument);
}

TEST(Autograd, CausalSoftmaxMasksFuture) {
  Tape<double> tape;
  Mat<double> x = Mat<double>::Zero(3, 5);
  Var<double> p = softmax_rows(tape.constant(x), true, 2);
  // Row r attends to columns <= r + offset.
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 5; ++c) {
      const double expect = c <= r + 2 ? 1.0 / (r + 3) : 0.0;
      EXPECT_NEAR(p.value()(r, c), expect, 1e-12);
    }
  }
}

TEST(Autograd, CrossEntropyMatchesOracle) {
  std::mt19937_64 rng(3);
  Mat<double> x = randn<double>(5, 7, 2.0, rng);
  const std::vector<int> t{1, -1, 6, 0, 3};
  std::vector<std::vector<double>> rows(5);
  for (int r = 0; r < 5; ++r) rows[r].assign(x.row(r).data(), x.row(r).data() + 7);
  Tape<double> tape;
  const double got = cross_entropy(tape.constant(x), t).item();
  EXPECT_NEAR(got, oracle::softmax_ce(rows, t), 1e-12);
}

TEST(Conv, MatchesDirectConvolution) {
  std::mt19937_64 rng(4);
  ParamSet<double> ps;
  for (int stride : {1, 2}) {
    Conv2d<double> conv(ps, "c" + std::to_string(stride), 2, 3, 3, stride, rng);
    const ImageShape in{5, 6, 2};
    Mat<double> x = randn<double>(in.height * in.width, in.channels, 1.0, rng);
    Tape<double> tape(false);
    const Mat<double> y = conv(tape, tape.constant(x), in).value();
    const ImageShape out = conv.output_shape(in);
    ASSERT_EQ(y.rows(), out.height * out.width);
    const Mat<double>& w = conv.proj.weight->value;
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        for (int co = 0; co < 3; ++co) {
          double acc = conv.proj.bias->value(0, co);
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
              if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) continue;
              for (int ci = 0; ci < 2; ++ci) acc += x(iy * in.width + ix, ci) * w((ky * 3 + kx) * 2 + ci, co);
            }
          }
          EXPECT_NEAR(y(oy * out.width + ox, co), acc, 1e-12);
        }
      }
    }
  }
}

TEST(Conv, GradientsAndUpsample) {
  std::mt19937_64 rng(6);
  ParamSet<double> ps;
  Conv2d<double> conv(ps, "c", 2, 2, 3, 2, rng);
  const ImageShape in{4, 4, 2};
  Parameter<double> x = random_param("x", 16, 2, rng);
  std::vector<Parameter<double>*> ptrs{&x, conv.proj.weight, conv.proj.bias};
  const auto r = gradcheck::check(ptrs, [&](Tape<double>& t) {
    Var<double> y = conv(t, t.param(x), in);
    return probe(t, upsample2(y, conv.output_shape(in)));
  });
  EXPECT_LT(r.max_rel, 1e-6) << r.worst;

  Tape<double> tape(false);
  Mat<double> img(4, 1);
  img << 1, 2, 3, 4;
  const Mat<double> up = upsample2(tape.constant(img), ImageShape{2, 2, 1}).value();
  Mat<double> expect(16, 1);
  expect << 1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4;
  EXPECT_EQ(up, expect);
}

TEST(Nn, AttentionGradients) {
  std::mt19937_64 rng(8);
  ParamSet<double> ps;
  Attention<double> att(ps, "att", 6, 4, 6, 2, rng);
  LayerNorm<double> ln(ps, "ln", 6);
  Mlp<double> mlp(ps, "mlp", 6, 8, rng);
  Parameter<double> q = random_param("q", 3, 6, rng), kv = random_param("kv", 5, 4, rng);
  std::vector<Parameter<double>*> ptrs{&q, &kv};
  for (auto& p : ps.all()) ptrs.push_back(&p);
  for (bool causal : {false, true}) {
    const auto r = gradcheck::check(ptrs, [&](Tape<double>& t) {
      Var<double> h = att(t, ln(t, t.param(q)), t.param(kv), causal);
      return probe(t, mlp(t, h));
    }, 0, 1e-5, 1e-4);  // key biases have an exactly zero gradient
    EXPECT_LT(r.max_rel, 1e-5) << "causal=" << causal << " " << r.worst;
  }
}

TEST(Nn, TimestepEmbedding) {
  const Mat<double> e = timestep_embedding<double>(0.0, 8);
  for (int k = 0; k < 4; ++k) {
    EXPECT_DOUBLE_EQ(e(0, k), 0.0);
    EXPECT_DOUBLE_EQ(e(0, k + 4), 1.0);
  }
  const Mat<double> f = timestep_embedding<double>(3.0, 8);
  EXPECT_NEAR(f(0, 0), std::sin(3.0), 1e-12);
  EXPECT_NE(f, e);
}

TEST(Nn, AssignFromCastsAcrossPrecision) {
  std::mt19937_64 rng(2);
  ParamSet<float> a;
  ParamSet<double> b;
  a.normal("w", 3, 3, 1.0, rng);
  b.zeros("w", 3, 3);
  b.assign_from(a);
  EXPECT_EQ(b.find("w")->value.cast<float>(), a.find("w")->value);
  EXPECT_EQ(a.count(), 9u);
}

TEST(Optim, AdamWFirstStepMatchesHandComputation) {
  ParamSet<double> ps;
  auto& w = ps.add("w", Mat<double>::Constant(2, 2, 1.0));
  auto& b = ps.add("b", Mat<double>::Constant(1, 2, 1.0));
  w.grad = Mat<double>::Constant(2, 2, 0.1);
  b.grad = Mat<double>::Constant(1, 2, -0.1);
  AdamW<double> opt(AdamWOptions{0.9, 0.999, 1e-8, 0.5, 0});
  const double norm = opt.step(ps, 0.01);
  EXPECT_NEAR(norm, std::sqrt(6 * 0.01), 1e-12);
  // Bias-corrected first step is lr * sign(g); decay only hits matrices.
  EXPECT_NEAR(w.value(0, 0), 1.0 * (1 - 0.01 * 0.5) - 0.01, 1e-9);
  EXPECT_NEAR(b.value(0, 0), 1.0 + 0.01, 1e-9);
}

TEST(Optim, GradientClipping) {
  ParamSet<double> ps;
  auto& w = ps.add("w", Mat<double>::Zero(1, 1));
  w.grad = Mat<double>::Constant(1, 1, 10.0);
  AdamW<double> opt(AdamWOptions{0.9, 0.999, 1e-8, 0.0, 1.0});
  EXPECT_NEAR(opt.step(ps, 0.1), 10.0, 1e-12);  // reports pre-clip norm
  EXPECT_NEAR(w.value(0, 0), -0.1, 1e-6);
}

TEST(Optim, MinimizesQuadratic) {
  ParamSet<double> ps;
  auto& w = ps.add("w", Mat<double>::Constant(3, 1, 5.0));
  AdamW<double> opt(AdamWOptions{0.9, 0.999, 1e-8, 0.0, 0});
  for (int i = 0; i < 2000; ++i) {
    w.grad = 2 * w.value;
    opt.step(ps, 0.05);
  }
  EXPECT_LT(w.value.norm(), 1e-2);
}

TEST(Optim, WarmupCosineSchedule) {
  EXPECT_DOUBLE_EQ(warmup_cosine_lr(0, 100, 10, 1.0), 0.1);
  EXPECT_DOUBLE_EQ(warmup_cosine_lr(9, 100, 10, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(warmup_cosine_lr(10, 100, 10, 1.0), 1.0);
  EXPECT_NEAR(warmup_cosine_lr(55, 100, 10, 1.0), 0.1 + 0.9 * 0.5, 1e-12);
  EXPECT_NEAR(warmup_cosine_lr(100, 100, 10, 1.0), 0.1, 1e-12);
  double prev = 2;
  for (long s = 10; s < 100; ++s) {
    const double lr = warmup_cosine_lr(s, 100, 10, 1.0);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

class CheckpointIo : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / ("ckpt_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                                     "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointIo, RoundTripAndChecksum) {
  std::mt19937_64 rng(1);
  ParamSet<float> ps;
  ps.normal("a", 3, 4, 1.0, rng);
  ps.normal("b", 1, 7, 1.0, rng);
  Checkpoint ck = make_checkpoint("model-v1", {{"k", 3}}, ps);
  const std::string path = (dir_ / "m.ckpt").string();
  const auto sum1 = save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.checksum, sum1);
  EXPECT_EQ(back.tag, "model-v1");
  EXPECT_EQ(back.meta.at("k"), 3);
  ParamSet<float> other;
  other.zeros("a", 3, 4);
  other.zeros("b", 1, 7);
  load_params(back, other);
  EXPECT_EQ(other.find("a")->value, ps.find("a")->value);
  EXPECT_EQ(other.find("b")->value, ps.find("b")->value);
  Checkpoint again = make_checkpoint("model-v1", {{"k", 3}}, ps);
  EXPECT_EQ(save_checkpoint((dir_ / "m2.ckpt").string(), again), sum1);

  ParamSet<float> wrong;
  wrong.zeros("a", 4, 3);
  EXPECT_THROW(load_params(back, wrong), std::runtime_error);
  ParamSet<float> missing;
  missing.zeros("c", 1, 1);
  EXPECT_THROW(load_params(back, missing), std::runtime_error);
}

TEST_F(CheckpointIo, CorruptionIsDetected) {
  ParamSet<float> ps;
  ps.constant("a", 2, 2, 1.5f);
  Checkpoint ck = make_checkpoint("t", {}, ps);
  const std::string path = (dir_ / "m.ckpt").string();
  save_checkpoint(path, ck);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(20);
    f.put('\x7f');
  }
  try {
    load_checkpoint(path);
    FAIL() << "corruption not detected";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
  std::filesystem::resize_file(path, 4);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  EXPECT_THROW(load_checkpoint((dir_ / "absent.ckpt").string()), std::runtime_error);
}
