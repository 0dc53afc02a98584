#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "rng.hpp"
#include "tensor.hpp"

using namespace mmsim;
using namespace mmsim::ops;

namespace {

Tensor randt(Shape shape, Rng& rng, bool rg = false, double scl = 1.0) {
  Tensor t = Tensor::zeros(shape, rg);
  for (auto& v : t.data()) v = rng.normal(0.0, scl);
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("matmul: identity times A gives A") {
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(11);
  Tensor a = randt({3, 5}, rng);
  Tensor c = matmul(eye, a);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(c.at(i) == a.at(i));
}

TEST_CASE("matmul: batched matches per-slice 2-D") {
  Rng rng(12);
  Tensor a = randt({2, 3, 4}, rng);
  Tensor b = randt({2, 4, 5}, rng);
  Tensor c = matmul(a, b);
  for (std::size_t t = 0; t < 2; ++t) {
    Tensor a2 = slice(a, 0, t, 1);
    Tensor b2 = slice(b, 0, t, 1);
    Tensor c2 = matmul(reshape(a2, {3, 4}), reshape(b2, {4, 5}));
    for (std::size_t i = 0; i < 15; ++i) CHECK(c.at(t * 15 + i) == doctest::Approx(c2.at(i)).epsilon(1e-15));
  }
}

TEST_CASE("matmul: shape mismatch names the op and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.status() == Status::Shape);
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("[2 x 3]") != std::string::npos);
    CHECK(std::string(e.what()).find("[4 x 2]") != std::string::npos);
  }
}

TEST_CASE("softmax: uniform logits give uniform probabilities") {
  Tensor x = Tensor::from({1, 3}, {0, 0, 0});
  Tensor y = softmax(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax: rows sum to one within 1e-12") {
  Rng rng(13);
  Tensor x = randt({7, 11}, rng, false, 5.0);
  Tensor y = softmax(x);
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 11; ++c) s += y.at(r * 11 + c);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm: constant row maps to (near) zero through epsilon") {
  Tensor x = Tensor::full({2, 4}, 3.7);
  Tensor g = Tensor::full({4}, 1.0);
  Tensor b = Tensor::zeros({4});
  Tensor y = layer_norm(x, g, b);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.at(i)) < 1e-3);
}

TEST_CASE("non-finite forward output raises a numeric error") {
  Tensor a = Tensor::from({1, 2}, {1e308, 1e308});
  CHECK_THROWS_AS(add(a, a), Error);
  try {
    add(a, a);
  } catch (const Error& e) {
    CHECK(e.status() == Status::Numeric);
  }
}

TEST_CASE("backward: sum gives all-ones gradient") {
  Rng rng(14);
  Tensor x = randt({3, 4}, rng, true);
  Tape tape;
  Tensor loss = sum_all(x);
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward: half squared-norm gives x back") {
  Rng rng(15);
  Tensor x = randt({6}, rng, true);
  Tape tape;
  Tensor loss = scale(sum_all(mul(x, x)), 0.5);
  tape.backward(loss);
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(x.at(i)).epsilon(1e-15));
}

TEST_CASE("backward: rejects non-scalar loss") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), Error);
}

TEST_CASE("backward: rejects loss from another tape") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor loss;
  {
    Tape t1;
    loss = sum_all(x);
  }
  Tape t2;
  CHECK_THROWS_AS(t2.backward(loss), Error);
}

TEST_CASE("grad_check: sum of squares at [1,2,3]") {
  Tensor x = Tensor::from({3}, {1, 2, 3});
  double err = grad_check([](const Tensor& t) { return sum_all(mul(t, t)); }, x);
  CHECK(err < 1e-8);
}

TEST_CASE("grad_check: softmax + cross-entropy on random logits") {
  Rng rng(16);
  Tensor x = randt({4, 7}, rng);
  std::vector<std::size_t> labels = {1, 6, 0, 3};
  double err = grad_check([&](const Tensor& t) { return cross_entropy(t, labels); }, x);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check: detects a non-deterministic function") {
  Tensor x = Tensor::from({2}, {1, 2});
  int calls = 0;
  auto f = [&calls](const Tensor& t) {
    ++calls;
    return scale(sum_all(t), 1.0 + 0.5 * calls);
  };
  CHECK_THROWS_AS(grad_check(f, x), Error);
}

// Every op's backward against central finite differences at 1e-4.
TEST_CASE("grad_check: elementwise and reduction ops") {
  Rng rng(17);
  Tensor x = randt({3, 5}, rng);
  auto check = [&](const char* name, std::function<Tensor(const Tensor&)> f, double tol = 1e-6) {
    INFO(name);
    CHECK(grad_check(f, x) < tol);
  };
  Rng r2(18);
  Tensor other = randt({3, 5}, r2);
  Tensor bias = randt({5}, r2);
  Tensor gain = randt({5}, r2, false, 0.3);

  check("add", [&](const Tensor& t) { return sum_all(mul(add(t, other), other)); });
  check("sub", [&](const Tensor& t) { return sum_all(mul(sub(t, other), other)); });
  check("mul", [&](const Tensor& t) { return sum_all(mul(mul(t, other), other)); });
  check("div", [&](const Tensor& t) { return sum_all(div(t, add(mul(other, other), Tensor::full({3, 5}, 1.0)))); });
  check("scale", [&](const Tensor& t) { return sum_all(scale(t, -2.5)); });
  check("add_bias", [&](const Tensor& t) { return sum_all(mul(add_bias(t, bias), other)); });
  check("softmax", [&](const Tensor& t) { return sum_all(mul(softmax(t), other)); });
  check("layer_norm x", [&](const Tensor& t) { return sum_all(mul(layer_norm(t, gain, bias), other)); }, 1e-4);
  check("gelu", [&](const Tensor& t) { return sum_all(mul(gelu(t), other)); });
  check("tanh", [&](const Tensor& t) { return sum_all(mul(ops::tanh(t), other)); });
  check("sigmoid", [&](const Tensor& t) { return sum_all(mul(sigmoid(t), other)); });
  check("sum_axis0", [&](const Tensor& t) { return sum_all(mul(sum_axis(t, 0), Tensor::full({5}, 0.7))); });
  check("mean_axis1", [&](const Tensor& t) { return sum_all(mul(mean_axis(t, 1), Tensor::full({3}, 1.3))); });
  check("l2_norm_axis", [&](const Tensor& t) { return sum_all(l2_norm_axis(t, 1)); }, 1e-5);
  check("mean_all", [&](const Tensor& t) { return mean_all(mul(t, t)); });
  check("bce", [&](const Tensor& t) { return bce_with_logits(t, sigmoid(other)); });
}

TEST_CASE("grad_check: layer_norm gain and bias") {
  Rng rng(19);
  Tensor x = randt({4, 6}, rng);
  Tensor other = randt({4, 6}, rng);
  Tensor gain = randt({6}, rng, false, 0.5);
  Tensor bias = randt({6}, rng, false, 0.5);
  CHECK(grad_check([&](const Tensor& g) { return sum_all(mul(layer_norm(x, g, bias), other)); }, gain) < 1e-4);
  CHECK(grad_check([&](const Tensor& b) { return sum_all(mul(layer_norm(x, gain, b), other)); }, bias) < 1e-4);
}

TEST_CASE("grad_check: structural ops") {
  Rng rng(20);
  Tensor other23 = randt({2, 3}, rng);
  Tensor x = randt({4, 3}, rng);

  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(slice(t, 0, 1, 2), other23));
        }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(rows(t, {3, 0, 0}), Tensor::full({3, 3}, 0.9)));
        }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(scatter_rows(t, 7, {6, 2, 0, 4}), Tensor::full({7, 3}, 1.1)));
        }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(reshape(t, {2, 6}), Tensor::full({2, 6}, 0.4)));
        }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(transpose_last2(t), Tensor::full({3, 4}, 0.8)));
        }, x) < 1e-6);

  Tensor y = randt({2, 4, 6}, rng);
  Tensor w = Tensor::full({4, 4, 3}, 0.25);
  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(split_heads(t, 2), w));
        }, y) < 1e-6);
  Tensor z = randt({4, 4, 3}, rng);
  Tensor w2 = Tensor::full({2, 4, 6}, 0.25);
  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(merge_heads(t, 2), w2));
        }, z) < 1e-6);

  Tensor a = randt({3, 4}, rng);
  Tensor b = randt({4, 2}, rng);
  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(matmul(t, b), Tensor::full({3, 2}, 0.6)));
        }, a) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) {
          return sum_all(mul(matmul(a, t), Tensor::full({3, 2}, 0.6)));
        }, b) < 1e-6);

  Tensor c1 = randt({2, 3}, rng);
  Tensor c2 = randt({2, 2}, rng);
  CHECK(grad_check([&](const Tensor& t) {
          std::vector<Tensor> parts = {t, c2};
          return sum_all(mul(concat(parts, 1), Tensor::full({2, 5}, 0.3)));
        }, c1) < 1e-6);
}

TEST_CASE("forward results are bit-identical across runs") {
  auto run = []() {
    Rng rng(21);
    Tensor x = randt({5, 8}, rng);
    Tensor y = gelu(matmul(x, transpose_last2(x)));  // [5, 5]
    return layer_norm(y, Tensor::full({5}, 1.0), Tensor::zeros({5}));
  };
  CHECK(bitwise_equal(run(), run()));
}

TEST_CASE("merge_heads inverts split_heads") {
  Rng rng(22);
  Tensor x = randt({3, 5, 8}, rng);
  Tensor y = merge_heads(split_heads(x, 4), 4);
  CHECK(bitwise_equal(x, y));
}

TEST_CASE("nested tapes are rejected") {
  Tape outer;
  CHECK_THROWS_AS(Tape{}, Error);
}

TEST_CASE("dropout: rate zero is identity, scaling preserves expectation") {
  Rng rng(23);
  Tensor x = Tensor::full({100, 10}, 1.0);
  Tensor same = dropout(x, 0.0, rng);
  CHECK(bitwise_equal(x, same));

  Tensor y = dropout(x, 0.3, rng);
  double mean = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) mean += y.at(i);
  mean /= static_cast<double>(y.numel());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
  CHECK_THROWS_AS(dropout(x, 1.0, rng), Error);
}
