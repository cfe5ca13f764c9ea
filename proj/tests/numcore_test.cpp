#include <cmath>
#include <cstring>
#include <filesystem>
#include <memory>

#include "doctest.h"
#include "op_cases.hpp"
#include "sepvqa/num/adam.hpp"
#include "sepvqa/num/checkpoint.hpp"
#include "sepvqa/num/gradcheck.hpp"
#include "sepvqa/num/graph.hpp"
#include "sepvqa/num/random.hpp"

using namespace sepvqa::num;
using sepvqa::testing::op_cases;
using sepvqa::testing::random_tensor;

TEST_CASE("softmax of equal logits is uniform") {
  Graph g;
  Var x = g.input("x", {1, 4});
  Var y = softmax_rows(x);
  TensorMap b{{"x", Tensor::row({0.0, 0.0, 0.0, 0.0})}};
  const auto ev = evaluate(g, b);
  for (double p : ev[y].data()) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("matmul by identity returns the input") {
  Graph g;
  Var a = g.input("a", {2, 2});
  Var i = g.constant(Tensor::identity(2));
  Var y = matmul(a, i);
  TensorMap b{{"a", Tensor::matrix(2, 2, {1, 2, 3, 4})}};
  CHECK(evaluate(g, b)[y] == b.at("a"));
}

TEST_CASE("layernorm of 1,2,3 has zero mean and near-unit variance") {
  Graph g;
  Var x = g.input("x", {1, 3});
  Var y = layernorm_rows(x);
  TensorMap b{{"x", Tensor::row({1, 2, 3})}};
  const Tensor out = evaluate(g, b)[y];
  const double inv = 1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
  CHECK(out[0] == doctest::Approx(-inv).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(0.0));
  CHECK(out[2] == doctest::Approx(inv).epsilon(1e-12));
  double var = 0;
  for (double v : out.data()) var += v * v / 3.0;
  CHECK(var == doctest::Approx((2.0 / 3.0) / (2.0 / 3.0 + 1e-5)).epsilon(1e-12));
}

TEST_CASE("derivative of x*x at 3 is 6") {
  Graph g;
  Var x = g.parameter("x", {1});
  Var y = x * x;
  TensorMap b{{"x", Tensor::scalar(3.0)}};
  const auto ev = evaluate(g, b);
  CHECK(gradients(g, ev, y).at("x").item() == doctest::Approx(6.0));
}

TEST_CASE("mean pooling spreads gradient 1/n") {
  Graph g;
  Var x = g.parameter("x", {4, 3});
  Var y = sum_all(mean_rows(x));
  TensorMap b{{"x", Tensor::zeros({4, 3})}};
  const auto ev = evaluate(g, b);
  const TensorMap grads = gradients(g, ev, y);
  for (double v : grads.at("x").data()) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("MLP cross-entropy gradients match finite differences") {
  Rng rng(7);
  Graph g;
  TensorMap b;
  Var x = g.input("x", {3, 5});
  b["x"] = random_tensor(rng, {3, 5});
  Var w1 = sepvqa::testing::param(g, b, "w1", random_tensor(rng, {5, 6}, 0.5));
  Var b1 = sepvqa::testing::param(g, b, "b1", random_tensor(rng, {1, 6}, 0.1));
  Var w2 = sepvqa::testing::param(g, b, "w2", random_tensor(rng, {6, 4}, 0.5));
  Var h = tanh(add_row(matmul(x, w1), b1));
  Var logp = log_softmax_rows(matmul(h, w2));
  Var loss = scale(pick(logp, 0, 1) + pick(logp, 1, 3) + pick(logp, 2, 0), -1.0 / 3.0);
  const auto report = grad_check(g, b, loss);
  CHECK(report.passed);
  CHECK_FALSE(report.vacuous);
  CHECK(report.worst()->max_relative_error < 1e-4);
}

TEST_CASE("every op passes a finite-difference check over 100 seeds") {
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(derive_seed(seed, c.name));
      Graph g;
      TensorMap b;
      Var loss = c.build(g, b, rng);
      const auto report = grad_check(g, b, loss);
      INFO(c.name << " seed " << seed << " worst " << report.worst()->name << " err "
                  << report.worst()->max_relative_error);
      REQUIRE(report.passed);
    }
  }
}

TEST_CASE("grad check flags a wrong backward rule and names the parameter") {
  auto op = std::make_shared<CustomOp>();
  op->name = "square";
  op->forward = [](std::span<const Tensor* const> in) {
    Tensor out = *in[0];
    for (auto& v : out.data()) v *= v;
    return out;
  };
  // Deliberately wrong: drops the factor of two.
  op->backward = [](std::span<const Tensor* const> in, const Tensor&, const Tensor& go) {
    Tensor gx = go;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= (*in[0])[i];
    return std::vector<Tensor>{gx};
  };
  Graph g;
  Var good = g.parameter("good", {1, 3});
  Var bad = g.parameter("bad", {1, 3});
  Var loss = sum_all(good * good) + sum_all(g.custom(op, {bad}, {1, 3}));
  TensorMap b{{"good", Tensor::row({0.5, -1.0, 2.0})}, {"bad", Tensor::row({1.0, 1.5, -0.7})}};
  const auto report = grad_check(g, b, loss);
  CHECK_FALSE(report.passed);
  CHECK(report.worst()->name == "bad");
  CHECK(report.worst()->max_relative_error > 0.1);
}

TEST_CASE("grad check of a constant loss is a vacuous pass") {
  Graph g;
  Var p = g.parameter("p", {2, 2});
  Var loss = sum_all(scale(p, 0.0));
  TensorMap b{{"p", Tensor::matrix(2, 2, {1, 2, 3, 4})}};
  const auto report = grad_check(g, b, loss);
  CHECK(report.passed);
  CHECK(report.vacuous);
}

TEST_CASE("graph errors name the node") {
  SUBCASE("shape mismatch at construction") {
    Graph g;
    Var a = g.input("a", {2, 3});
    Var c = g.input("c", {2, 2});
    CHECK_THROWS_AS(matmul(a, c), GraphError);
  }
  SUBCASE("unbound leaf") {
    Graph g;
    Var a = g.input("a", {1, 2});
    sum_all(a);
    try {
      evaluate(g, {});
      FAIL("expected GraphError");
    } catch (const GraphError& e) {
      CHECK(e.node_label() == "input 'a'");
    }
  }
  SUBCASE("non-finite intermediate") {
    Graph g;
    Var a = g.input("a", {1, 1});
    Var big = scale(a, 1e300);
    g.set_label(big, "blowup");
    Var y = big * big;
    g.set_label(y, "overflow");
    TensorMap b{{"a", Tensor::matrix(1, 1, {10.0})}};
    try {
      evaluate(g, b);
      FAIL("expected GraphError");
    } catch (const GraphError& e) {
      CHECK(e.node_label() == "mul 'overflow'");
    }
  }
  SUBCASE("non-scalar output") {
    Graph g;
    Var a = g.parameter("a", {1, 2});
    TensorMap b{{"a", Tensor::row({1, 2})}};
    const auto ev = evaluate(g, b);
    CHECK_THROWS_AS(gradients(g, ev, a), GraphError);
  }
  SUBCASE("custom op without backward") {
    auto op = std::make_shared<CustomOp>();
    op->name = "opaque";
    op->forward = [](std::span<const Tensor* const> in) { return *in[0]; };
    Graph g;
    Var a = g.parameter("a", {1, 2});
    Var loss = sum_all(g.custom(op, {a}, {1, 2}));
    TensorMap b{{"a", Tensor::row({1, 2})}};
    const auto ev = evaluate(g, b);
    CHECK_THROWS_AS(gradients(g, ev, loss), GraphError);
  }
}

TEST_CASE("evaluation is pure and leaves bindings untouched") {
  Rng rng(3);
  for (const auto& c : op_cases()) {
    Graph g;
    TensorMap b;
    Var loss = c.build(g, b, rng);
    const TensorMap before = b;
    const double first = evaluate(g, b)[loss].item();
    const auto ev = evaluate(g, b);
    gradients(g, ev, loss);
    CHECK(evaluate(g, b)[loss].item() == first);
    CHECK(b == before);
  }
}

TEST_CASE("softmax rows are positive and sum to one") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    Graph g;
    const std::size_t m = 1 + rng.below(5), n = 1 + rng.below(8);
    Var x = g.input("x", {m, n});
    Var y = softmax_rows(x);
    TensorMap b{{"x", random_tensor(rng, {m, n}, 20.0)}};
    const Tensor p = evaluate(g, b)[y];
    for (std::size_t r = 0; r < m; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < n; ++c) {
        CHECK(p.at(r, c) >= 0.0);
        s += p.at(r, c);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("masked softmax gives masked entries zero probability") {
  Graph g;
  Var x = g.input("x", {2, 3});
  Var y = masked_softmax_rows(x, {1, 0, 1, 0, 0, 1});
  TensorMap b{{"x", Tensor::matrix(2, 3, {1, 50, 1, 3, 4, 5})}};
  const Tensor p = evaluate(g, b)[y];
  CHECK(p.at(0, 0) == doctest::Approx(0.5));
  CHECK(p.at(0, 1) == 0.0);
  CHECK(p.at(1, 2) == doctest::Approx(1.0));
}

TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
  AdamState st;
  TensorMap params{{"w", Tensor::row({1.0, -2.0, 3.0})}};
  const TensorMap before = params;
  for (int i = 0; i < 5; ++i) adam_step(st, params, {{"w", Tensor::zeros({1, 3})}});
  CHECK(params == before);
}

TEST_CASE("first Adam step moves by the learning rate against the gradient sign") {
  AdamState st;
  st.config.learning_rate = 0.1;
  TensorMap params{{"w", Tensor::scalar(1.0)}};
  adam_step(st, params, {{"w", Tensor::scalar(2.0)}});
  CHECK(params.at("w").item() == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("Adam updates are symmetric under gradient sign flip") {
  AdamState a, b;
  TensorMap pa{{"w", Tensor::row({0.0, 0.0})}}, pb = pa;
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    Tensor g = random_tensor(rng, {1, 2});
    Tensor ng = g;
    for (auto& v : ng.data()) v = -v;
    adam_step(a, pa, {{"w", g}});
    adam_step(b, pb, {{"w", ng}});
  }
  for (std::size_t i = 0; i < 2; ++i) CHECK(pa.at("w")[i] == -pb.at("w")[i]);
}

TEST_CASE("Adam rejects shape mismatch and unknown names") {
  AdamState st;
  TensorMap params{{"w", Tensor::row({1.0, 2.0})}};
  CHECK_THROWS_AS(adam_step(st, params, {{"w", Tensor::row({1.0})}}), OptimizerError);
  CHECK_THROWS_AS(adam_step(st, params, {{"v", Tensor::row({1.0, 2.0})}}), OptimizerError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(5);
  TensorMap t{{"a", random_tensor(rng, {3, 4})}, {"b.bias", random_tensor(rng, {1, 7})}, {"s", Tensor::scalar(-0.0)}};
  const auto path = std::filesystem::temp_directory_path() / "sepvqa_numcore_ckpt.bin";
  save_tensors(path, t);
  const TensorMap back = load_tensors(path);
  REQUIRE(back.size() == t.size());
  for (const auto& [name, v] : t) {
    REQUIRE(back.at(name).shape() == v.shape());
    CHECK(std::memcmp(back.at(name).data().data(), v.data().data(), v.size() * sizeof(double)) == 0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint layout starts with magic, version and count") {
  const std::string bytes = encode_tensors({{"x", Tensor::scalar(1.0)}});
  CHECK(bytes.substr(0, 8) == "SEPVQACK");
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);
  CHECK(static_cast<unsigned char>(bytes[12]) == 1);
  // header 20 + name len 4 + name 1 + rank 4 + dim 8 + payload 8
  CHECK(bytes.size() == 45);
}

TEST_CASE("corrupt checkpoints raise CheckpointError") {
  const std::string good = encode_tensors({{"x", Tensor::row({1.0, 2.0})}});
  CHECK_THROWS_AS(decode_tensors("NOTMAGIC" + good.substr(8)), CheckpointError);
  CHECK_THROWS_AS(decode_tensors(good.substr(0, good.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(decode_tensors(good + "x"), CheckpointError);
  CHECK_THROWS_AS(decode_tensors(""), CheckpointError);
}

TEST_CASE("rng streams are reproducible and restorable") {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  const auto words = a.state_words();
  const double next = a.normal();
  Rng c(0);
  c.set_state_words(words);
  CHECK(c.normal() == next);
  CHECK(derive_seed(1, "data") != derive_seed(1, "init"));
  CHECK(derive_seed(1, "data", 0) != derive_seed(1, "data", 1));
  CHECK(derive_seed(1, "data") == derive_seed(1, "data"));
}
