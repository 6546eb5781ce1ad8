#ifndef TMKNET_GRAD_CASES_HPP
#define TMKNET_GRAD_CASES_HPP

#include <functional>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "tmknet/autodiff.hpp"

namespace tmknet::testing {

struct GradInstance {
  std::vector<GradInput> inputs;
  LossBuilder build;
};

struct GradCase {
  std::string name;
  double tolerance;
  std::function<GradInstance(Rng&)> make;
};

/// One case per differentiable op; each factory draws a fresh random instance.
inline std::vector<GradCase> op_grad_cases() {
  using ad::Tape;
  using ad::Var;
  using V = const std::vector<Var>&;
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, double tol, std::function<GradInstance(Rng&)> make) {
    cases.push_back({std::move(name), tol, std::move(make)});
  };
  auto normal = [](Rng& rng, Shape s) { return GradInput{rng.normal_tensor(std::move(s))}; };

  add_case("add", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({3, 4});
    return GradInstance{{normal(rng, {3, 4}), normal(rng, {3, 4})},
                        [r](Tape& t, V v) { return project(t, ad::add(v[0], v[1]), r); }};
  });
  add_case("sub", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({3, 4});
    return GradInstance{{normal(rng, {3, 4}), normal(rng, {3, 4})},
                        [r](Tape& t, V v) { return project(t, ad::sub(v[0], v[1]), r); }};
  });
  add_case("mul", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({5});
    return GradInstance{{normal(rng, {5}), normal(rng, {5})},
                        [r](Tape& t, V v) { return project(t, ad::mul(v[0], v[1]), r); }};
  });
  add_case("div", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({5});
    GradInput den{rng.uniform_tensor({5}, 0.5, 2.0)};
    return GradInstance{{normal(rng, {5}), den}, [r](Tape& t, V v) { return project(t, ad::div(v[0], v[1]), r); }};
  });
  add_case("scalar-mul", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 3});
    return GradInstance{{normal(rng, {2, 3}), GradInput{Tensor::scalar(rng.normal())}},
                        [r](Tape& t, V v) { return project(t, ad::mul_scalar(v[0], v[1]), r); }};
  });
  add_case("scale+add_const", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({4});
    const double c = rng.normal();
    return GradInstance{{normal(rng, {4})}, [r, c](Tape& t, V v) { return project(t, ad::add_const(ad::scale(v[0], c), 0.3), r); }};
  });
  add_case("exp", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({4});
    return GradInstance{{normal(rng, {4})}, [r](Tape& t, V v) { return project(t, ad::exp(v[0]), r); }};
  });
  add_case("log", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({4});
    return GradInstance{{GradInput{rng.uniform_tensor({4}, 0.5, 3.0)}}, [r](Tape& t, V v) { return project(t, ad::log(v[0]), r); }};
  });
  add_case("sqrt", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({4});
    return GradInstance{{GradInput{rng.uniform_tensor({4}, 0.5, 3.0)}}, [r](Tape& t, V v) { return project(t, ad::sqrt(v[0]), r); }};
  });
  add_case("square", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({4});
    return GradInstance{{normal(rng, {4})}, [r](Tape& t, V v) { return project(t, ad::square(v[0]), r); }};
  });
  add_case("leaky_relu", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({6});
    return GradInstance{{normal(rng, {6})}, [r](Tape& t, V v) { return project(t, ad::leaky_relu(v[0], 0.01), r); }};
  });
  add_case("mean+mean_axis0", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({3});
    return GradInstance{{normal(rng, {4, 3})}, [r](Tape& t, V v) {
                          return ad::add(project(t, ad::mean_axis0(v[0]), r), ad::mean(ad::square(v[0])));
                        }};
  });
  add_case("flatten+pick", 1e-4, [=](Rng& rng) {
    return GradInstance{{normal(rng, {2, 3, 2})}, [](Tape&, V v) {
                          const Var f = ad::reshape(v[0], {12});
                          return ad::mul(ad::pick(f, 7), ad::pick(f, 2));
                        }};
  });
  add_case("concat+index_select", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 3, 3});
    return GradInstance{{normal(rng, {2, 2, 3}), normal(rng, {2, 1, 3})}, [r](Tape& t, V v) {
                          const Var c = ad::concat({v[0], v[1]}, 1);
                          return project(t, ad::index_select(c, 1, {2, 0, 0}), r);
                        }};
  });
  add_case("matmul+transpose", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({4, 3});
    return GradInstance{{normal(rng, {2, 4}), normal(rng, {2, 3})},
                        [r](Tape& t, V v) { return project(t, ad::matmul(ad::transpose(v[0]), v[1]), r); }};
  });
  add_case("bmm", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({3, 2, 4});
    return GradInstance{{normal(rng, {3, 2, 5}), normal(rng, {3, 5, 4})},
                        [r](Tape& t, V v) { return project(t, ad::bmm(v[0], v[1]), r); }};
  });
  add_case("bimap", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 3, 3});
    return GradInstance{{normal(rng, {3, 5}), GradInput{spd_batch(2, 5, rng), true}},
                        [r](Tape& t, V v) { return project(t, ad::congruence(v[0], v[1]), r); }};
  });
  for (const auto& [label, fn] : std::vector<std::pair<std::string, SpectralFn>>{
           {"sym_fn log", SpectralFn::log()},
           {"sym_fn exp", SpectralFn::exp()},
           {"sym_fn pow(0.3)", SpectralFn::pow(0.3)},
           {"sym_fn sqrt", SpectralFn::sqrt()},
           {"sym_fn inv_sqrt", SpectralFn::inv_sqrt()},
           {"sym_fn clamp_min", SpectralFn::clamp_min(0.6)}}) {
    add_case(label, 1e-4, [fn](Rng& rng) {
      const Tensor r = rng.normal_tensor({2, 4, 4});
      std::vector<Tensor> items{random_spd_gapped(4, rng, 0.2, 2.0, 1e-3), random_spd_gapped(4, rng, 0.2, 2.0, 1e-3)};
      return GradInstance{{GradInput{stack(items), true}}, [r, fn](Tape& t, V v) { return project(t, ad::sym_fn(v[0], fn), r); }};
    });
  }
  add_case("sym_pow (matrix and exponent)", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 4, 4});
    return GradInstance{{GradInput{spd_batch(2, 4, rng, 0.3, 3.0), true}, GradInput{Tensor::scalar(rng.uniform(0.3, 1.5))}},
                        [r](Tape& t, V v) { return project(t, ad::sym_pow(v[0], v[1]), r); }};
  });
  add_case("weighted geometric mean", 1e-4, [=](Rng& rng) {
    // a^{1/2} (a^{-1/2} b a^{-1/2})^w a^{1/2} composed from sym_fn ops.
    const Tensor r = rng.normal_tensor({4, 4});
    const double w = rng.uniform(0.1, 0.9);
    return GradInstance{{GradInput{spd_batch(1, 4, rng), true}, GradInput{spd_batch(1, 4, rng), true}},
                        [r, w](Tape& t, V v) {
                          const Var isq = ad::reshape(ad::sym_fn(v[0], SpectralFn::inv_sqrt()), {4, 4});
                          const Var sq = ad::reshape(ad::sym_fn(v[0], SpectralFn::sqrt()), {4, 4});
                          const Var inner = ad::sym_fn(ad::congruence(isq, v[1]), SpectralFn::pow(w));
                          return project(t, ad::reshape(ad::congruence(sq, inner), {4, 4}), r);
                        }};
  });
  add_case("conv2d time kernel (1,k)", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 3, 2, 4});
    return GradInstance{{normal(rng, {2, 1, 2, 9}), normal(rng, {3, 1, 1, 3}), normal(rng, {3})}, [r](Tape& t, V v) {
                          ad::Conv2dParams cp;
                          cp.stride_w = 2;
                          return project(t, ad::conv2d(v[0], v[1], v[2], cp), r);
                        }};
  });
  add_case("conv2d sensor kernel (k,1) strided", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 2, 2, 3});
    return GradInstance{{normal(rng, {2, 3, 6, 3}), normal(rng, {2, 3, 3, 1}), normal(rng, {2})}, [r](Tape& t, V v) {
                          ad::Conv2dParams cp;
                          cp.stride_h = 3;
                          return project(t, ad::conv2d(v[0], v[1], v[2], cp), r);
                        }};
  });
  add_case("conv2d sensor kernel (2,1) dilated", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 2, 3, 3});
    return GradInstance{{normal(rng, {2, 3, 6, 3}), normal(rng, {2, 3, 2, 1}), normal(rng, {2})}, [r](Tape& t, V v) {
                          ad::Conv2dParams cp;
                          cp.dilation_h = 3;
                          return project(t, ad::conv2d(v[0], v[1], v[2], cp), r);
                        }};
  });
  add_case("max_pool", 1e-3, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 3, 3});
    return GradInstance{{normal(rng, {2, 3, 13})}, [r](Tape& t, V v) { return project(t, ad::max_pool_last(v[0], 4), r); }};
  });
  add_case("center_last", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({3, 5});
    return GradInstance{{normal(rng, {3, 5})}, [r](Tape& t, V v) { return project(t, ad::center_last(v[0]), r); }};
  });
  add_case("covariance", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({2, 3, 3});
    return GradInstance{{normal(rng, {2, 3, 7})}, [r](Tape& t, V v) { return project(t, ad::covariance(v[0], ad::CovRegularizer{}), r); }};
  });
  add_case("batch_norm train", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({3, 2, 4});
    GradInput gamma{rng.uniform_tensor({2}, 0.5, 1.5)};
    return GradInstance{{normal(rng, {3, 2, 4}), gamma, normal(rng, {2})},
                        [r](Tape& t, V v) { return project(t, ad::batch_norm_train(v[0], v[1], v[2], 1e-5), r); }};
  });
  add_case("batch_norm eval", 1e-4, [=](Rng& rng) {
    const Tensor r = rng.normal_tensor({3, 2, 4});
    const std::vector<double> mean{rng.normal(), rng.normal()}, var{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
    return GradInstance{{normal(rng, {3, 2, 4}), normal(rng, {2}), normal(rng, {2})}, [r, mean, var](Tape& t, V v) {
                          return project(t, ad::batch_norm_eval(v[0], v[1], v[2], mean, var, 1e-5), r);
                        }};
  });
  add_case("linear + log-softmax NLL", 1e-4, [=](Rng& rng) {
    std::vector<std::size_t> labels{0, 2, 1, 2};
    return GradInstance{{normal(rng, {4, 5}), normal(rng, {3, 5}), normal(rng, {3})},
                        [labels](Tape&, V v) { return ad::cross_entropy(ad::linear(v[0], v[1], v[2]), labels); }};
  });
  return cases;
}

}  // namespace tmknet::testing

#endif  // TMKNET_GRAD_CASES_HPP
