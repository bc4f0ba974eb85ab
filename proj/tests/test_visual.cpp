#include <numeric>

#include "doctest.h"
#include "ovseg/error.hpp"
#include "ovseg/visual_encoder.hpp"
#include "test_util.hpp"

using namespace ovseg;
using ag::Matrix;

namespace {

Image random_image(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(size, size);
  for (auto& v : img.rgb) v = u(rng);
  return img;
}

struct Fixture {
  nn::ParamStore store;
  nn::Initializer init;
  VisualEncoder enc;
  Fixture(VisualConfig cfg, std::uint64_t seed = 3) : init(seed, 0.3), enc(cfg, store, init) {}
};

VisualConfig small(int k = 4) {
  VisualConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_groups = k;
  c.layers_stage1 = 1;
  c.layers_stage2 = 1;
  c.heads = 2;
  return c;
}

Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (ag::Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff(), z = 0;
    for (ag::Index j = 0; j < x.cols(); ++j) z += std::exp(x(i, j) - m);
    for (ag::Index j = 0; j < x.cols(); ++j) out(i, j) = std::exp(x(i, j) - m) / z;
  }
  return out;
}

}  // namespace

TEST_CASE("patch grid size") {
  VisualConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  CHECK(c.num_patches() == 196);
  c.image_size = 64;
  CHECK(c.num_patches() == 16);
  c.image_size = 65;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = VisualConfig{};
  c.num_groups = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = VisualConfig{};
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("patchify") {
  Fixture f(small());
  std::mt19937_64 rng(1);
  const Image img = random_image(16, rng);
  CHECK(f.enc.patchify(img).rows() == 16);
  CHECK_THROWS_AS(f.enc.patchify(Image(8, 8)), UsageError);

  SUBCASE("constant zero image gives equal rows without positions or bias") {
    f.store.at("visual.patch_proj.bias").node()->value.setZero();
    f.store.at("visual.pos_embed").node()->value.setZero();
    ag::NoGradGuard g;
    const Matrix t = f.enc.patchify(Image(16, 16)).value();
    for (ag::Index i = 1; i < t.rows(); ++i) CHECK(t.row(i) == t.row(0));
  }
}

TEST_CASE("transformer stages") {
  std::mt19937_64 rng(2);
  const Matrix g = random_matrix(4, 8, rng), x = random_matrix(16, 8, rng);
  ag::NoGradGuard guard;

  SUBCASE("zero layers is the identity") {
    VisualConfig c = small();
    c.layers_stage1 = 0;
    c.layers_stage2 = 0;
    Fixture f(c);
    auto [g1, x1] = f.enc.encode_stage1(ag::constant(g), ag::constant(x));
    CHECK(g1.value() == g);
    CHECK(x1.value() == x);
    auto [g2, x2] = f.enc.encode_stage2(ag::constant(g), ag::constant(x));
    CHECK(g2.value() == g);
    CHECK(x2.value() == x);
  }
  SUBCASE("image tokens are permutation equivariant") {
    Fixture f(small());
    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix xp(16, 8);
    for (int i = 0; i < 16; ++i) xp.row(i) = x.row(perm[i]);
    for (int stage = 1; stage <= 2; ++stage) {
      auto run = [&](const Matrix& in) {
        return stage == 1 ? f.enc.encode_stage1(ag::constant(g), ag::constant(in))
                          : f.enc.encode_stage2(ag::constant(g), ag::constant(in));
      };
      auto [ga, xa] = run(x);
      auto [gb, xb] = run(xp);
      CHECK(max_relative_error(ga.value(), gb.value(), 1e-9) < 1e-9);
      for (int i = 0; i < 16; ++i) {
        CHECK((xb.value().row(i) - xa.value().row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
      }
      CHECK(xa.value().allFinite());
    }
  }
}

TEST_CASE("binding") {
  std::mt19937_64 rng(4);
  ag::NoGradGuard guard;

  SUBCASE("dense oracle") {
    VisualConfig c = small(4);
    Fixture f(c);
    const Matrix g = random_matrix(4, 8, rng), x = random_matrix(16, 8, rng);
    const BindResult r = f.enc.bind(ag::constant(g), ag::constant(x));
    const Matrix wq = f.store.at("visual.bind.q.weight").value();
    const Matrix wk = f.store.at("visual.bind.k.weight").value();
    const Matrix wv = f.store.at("visual.bind.v.weight").value();
    const Matrix wo = f.store.at("visual.bind.o.weight").value();
    const Matrix q = g * wq, k = x * wk, v = x * wv;
    const Matrix a = row_softmax(k * q.transpose());
    CHECK((r.affinity.value() - a).cwiseAbs().maxCoeff() < 1e-6);
    Matrix pooled(4, 8);
    for (int j = 0; j < 4; ++j) {
      double mass = 0;
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(8);
      for (int i = 0; i < 16; ++i) {
        mass += a(i, j);
        acc += a(i, j) * v.row(i);
      }
      pooled.row(j) = acc / (mass + kBindEpsilon);
    }
    CHECK((r.groups.value() - (g + pooled * wo)).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("single group pools the mean of values") {
    Fixture f(small(1));
    const Matrix g = random_matrix(1, 8, rng), x = random_matrix(16, 8, rng);
    const BindResult r = f.enc.bind(ag::constant(g), ag::constant(x));
    CHECK(r.affinity.value().isOnes());
    const Matrix v = x * f.store.at("visual.bind.v.weight").value();
    const Matrix mean = v.colwise().mean();
    const Matrix expected = g + mean * f.store.at("visual.bind.o.weight").value();
    CHECK((r.groups.value() - expected).cwiseAbs().maxCoeff() < 1e-6);
  }
  SUBCASE("identical queries give uniform rows") {
    Fixture f(small(4));
    Matrix g(4, 8);
    const Matrix row = random_matrix(1, 8, rng);
    for (int i = 0; i < 4; ++i) g.row(i) = row;
    const BindResult r = f.enc.bind(ag::constant(g), ag::constant(random_matrix(16, 8, rng)));
    CHECK((r.affinity.value().array() - 0.25).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("scaled logits") {
    VisualConfig c = small(3);
    c.scale_binding_logits = true;
    Fixture f(c);
    const Matrix g = random_matrix(3, 8, rng), x = random_matrix(16, 8, rng);
    const Matrix q = g * f.store.at("visual.bind.q.weight").value();
    const Matrix k = x * f.store.at("visual.bind.k.weight").value();
    const Matrix a = row_softmax(k * q.transpose() / std::sqrt(8.0));
    CHECK((f.enc.bind(ag::constant(g), ag::constant(x)).affinity.value() - a).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("binding gradient") {
  VisualConfig c = small(3);
  c.embed_dim = 8;
  Fixture f(c);
  std::mt19937_64 rng(5);
  ag::Var g = ag::parameter(random_matrix(3, 8, rng));
  ag::Var x = ag::parameter(random_matrix(6, 8, rng));
  const Matrix w = random_matrix(3, 8, rng), wa = random_matrix(6, 3, rng);
  auto loss = [&] {
    BindResult r = f.enc.bind(g, x);
    return ag::add(ag::sum(ag::mul(r.groups, ag::constant(w))), ag::sum(ag::mul(r.affinity, ag::constant(wa))));
  };
  auto value = [&] {
    ag::NoGradGuard guard;
    return loss().item();
  };
  ag::backward(loss());
  std::vector<ag::Var> wrt{g, x, f.store.at("visual.bind.q.weight"), f.store.at("visual.bind.k.weight"),
                           f.store.at("visual.bind.v.weight"), f.store.at("visual.bind.o.weight")};
  for (auto& p : wrt) {
    const Matrix analytic = p.grad();
    CHECK(max_relative_error(analytic, numeric_gradient(value, p)) < 1e-4);
  }
}

TEST_CASE("forward") {
  Fixture f(small(4));
  std::mt19937_64 rng(6);
  ag::NoGradGuard guard;
  for (int t = 0; t < 10; ++t) {
    const Image img = random_image(16, rng);
    const GroupState s = f.enc.forward(img);
    const Matrix& a = s.affinity.value();
    CHECK(a.rows() == 16);
    CHECK(a.cols() == 4);
    CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
    CHECK(a.minCoeff() >= 0.0);
    CHECK(s.groups.rows() == 4);
    CHECK(s.image_tokens.rows() == 16);
    const GroupState again = f.enc.forward(img);
    CHECK(again.groups.value() == s.groups.value());
    CHECK(again.affinity.value() == s.affinity.value());
  }
  std::vector<Image> batch{random_image(16, rng), random_image(16, rng), random_image(16, rng)};
  const auto states = f.enc.forward_batch(batch);
  for (size_t i = 0; i < batch.size(); ++i) {
    CHECK(states[i].groups.value() == f.enc.forward(batch[i]).groups.value());
    CHECK(states[i].image_tokens.value() == f.enc.forward(batch[i]).image_tokens.value());
  }
}
