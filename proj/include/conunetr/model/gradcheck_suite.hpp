#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "conunetr/model/conunetr.hpp"
#include "conunetr/nn/attention.hpp"
#include "conunetr/nn/linear.hpp"
#include "conunetr/nn/transformer.hpp"
#include "conunetr/tensor/conv.hpp"
#include "conunetr/tensor/gradcheck.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/train/loss.hpp"

namespace conunetr {

struct GradCheckRow {
  std::string op;
  double max_rel_err = 0.0;
  double tol = 0.0;
  std::int64_t coords = 0;
  bool ok = false;
};

namespace detail {

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> param_pairs(const ParamList<S>& list) {
  std::vector<std::pair<std::string, Tensor<S>>> pairs;
  for (const auto& item : list.items) pairs.push_back({item.name, item.tensor});
  return pairs;
}

// Copies parameter values between scalar types (used to evaluate a 32-bit
// graph's loss through an exact float64 mirror).
template <typename A, typename B>
void copy_param_values(const ParamList<A>& src, const ParamList<B>& dst) {
  if (src.items.size() != dst.items.size()) {
    throw std::logic_error("copy_param_values: parameter count mismatch");
  }
  for (std::size_t i = 0; i < src.items.size(); ++i) {
    if (src.items[i].name != dst.items[i].name) {
      throw std::logic_error("copy_param_values: parameter order mismatch at " +
                             src.items[i].name);
    }
    const std::span<const A> from = src.items[i].tensor.values();
    const std::span<B> to = dst.items[i].tensor.mutable_values();
    if (from.size() != to.size()) {
      throw std::logic_error("copy_param_values: size mismatch at " + src.items[i].name);
    }
    for (std::size_t j = 0; j < from.size(); ++j) to[j] = static_cast<B>(from[j]);
  }
}

template <typename A, typename B>
void copy_pair_values(const std::vector<std::pair<std::string, Tensor<A>>>& src,
                      const std::vector<std::pair<std::string, Tensor<B>>>& dst) {
  if (src.size() != dst.size()) {
    throw std::logic_error("copy_pair_values: tensor count mismatch");
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first) {
      throw std::logic_error("copy_pair_values: order mismatch at " + src[i].first);
    }
    const std::span<const A> from = src[i].second.values();
    const std::span<B> to = dst[i].second.mutable_values();
    if (from.size() != to.size()) {
      throw std::logic_error("copy_pair_values: size mismatch at " + src[i].first);
    }
    for (std::size_t j = 0; j < from.size(); ++j) to[j] = static_cast<B>(from[j]);
  }
}

template <typename S>
Tensor<S> grad_param(Rng& rng, Shape shape) {
  Tensor<S> t = Tensor<S>::normal(shape, 0.0, 1.0, rng);
  t.set_requires_grad(true);
  return t;
}

// Random values bounded away from zero, for ops with a kink at the origin.
template <typename S>
Tensor<S> grad_param_offzero(Rng& rng, Shape shape) {
  Tensor<S> t = Tensor<S>::allocate(shape);
  for (auto& v : t.mutable_values()) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    v = static_cast<S>(sign * (0.2 + 0.8 * rng.uniform()));
  }
  t.set_requires_grad(true);
  return t;
}

// Fixed random cotangent so reductions exercise non-uniform upstream grads.
template <typename S>
Tensor<S> weights_like(Rng& rng, const Shape& shape) {
  return Tensor<S>::normal(shape, 0.0, 1.0, rng);
}

// One gradcheck scenario: differentiated tensors, fixed coefficient tensors,
// and a loss closure over both. Built from a seed, so the same scenario can
// be instantiated at two scalar types with matching random draws.
template <typename S>
struct GradCase {
  std::string name;
  std::vector<std::pair<std::string, Tensor<S>>> params;
  std::vector<std::pair<std::string, Tensor<S>>> consts;
  std::function<Tensor<S>()> loss;
};

template <typename S>
std::vector<GradCase<S>> build_gradcheck_cases(std::uint64_t seed) {
  std::vector<GradCase<S>> cases;
  std::uint64_t case_id = 0;
  const auto fresh = [&] { return Rng(derive_seed(seed, 0x6f7073, ++case_id)); };

  {
    Rng rng = fresh();
    Tensor<S> a = grad_param<S>(rng, Shape{2, 3});
    Tensor<S> b = grad_param<S>(rng, Shape{1, 3});
    Tensor<S> w = weights_like<S>(rng, Shape{2, 3});
    cases.push_back({"add_broadcast",
                     {{"a", a}, {"b", b}},
                     {{"w", w}},
                     [=] { return sum(mul(add(a, b), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> a = grad_param<S>(rng, Shape{2, 4});
    Tensor<S> b = grad_param<S>(rng, Shape{2, 4});
    Tensor<S> w = weights_like<S>(rng, Shape{2, 4});
    cases.push_back({"sub_mul",
                     {{"a", a}, {"b", b}},
                     {{"w", w}},
                     [=] { return sum(mul(mul(sub(a, b), a), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{3, 3});
    Tensor<S> w = weights_like<S>(rng, Shape{3, 3});
    cases.push_back({"scale_shift_neg",
                     {{"x", x}},
                     {{"w", w}},
                     [=] { return sum(mul(neg(add_scalar(scale(x, S(1.7)), S(0.3))), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> a = grad_param<S>(rng, Shape{3, 4});
    Tensor<S> b = grad_param<S>(rng, Shape{4, 5});
    Tensor<S> w = weights_like<S>(rng, Shape{3, 5});
    cases.push_back({"matmul",
                     {{"a", a}, {"b", b}},
                     {{"w", w}},
                     [=] { return sum(mul(matmul(a, b), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> a = grad_param<S>(rng, Shape{2, 3, 4});
    Tensor<S> b = grad_param<S>(rng, Shape{2, 4, 5});
    Tensor<S> w = weights_like<S>(rng, Shape{2, 3, 5});
    cases.push_back({"matmul_batched",
                     {{"a", a}, {"b", b}},
                     {{"w", w}},
                     [=] { return sum(mul(matmul(a, b), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param_offzero<S>(rng, Shape{4, 5});
    Tensor<S> w = weights_like<S>(rng, Shape{4, 5});
    cases.push_back({"relu", {{"x", x}}, {{"w", w}}, [=] { return sum(mul(relu(x), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{4, 5});
    Tensor<S> w = weights_like<S>(rng, Shape{4, 5});
    cases.push_back({"gelu", {{"x", x}}, {{"w", w}}, [=] { return sum(mul(gelu(x), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{3, 7});
    Tensor<S> w = weights_like<S>(rng, Shape{3, 7});
    cases.push_back(
        {"softmax", {{"x", x}}, {{"w", w}}, [=] { return sum(mul(softmax(x, -1), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{2, 5});
    Tensor<S> w = weights_like<S>(rng, Shape{2, 5});
    cases.push_back({"log_softmax",
                     {{"x", x}},
                     {{"w", w}},
                     [=] { return sum(mul(log_softmax(x, 1), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{2, 6});
    Tensor<S> y = grad_param<S>(rng, Shape{3, 3});
    cases.push_back(
        {"sum_mean", {{"x", x}, {"y", y}}, {}, [=] { return add(sum(x), mean(y)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{4, 6});
    Tensor<S> gain = grad_param<S>(rng, Shape{6});
    Tensor<S> shift = grad_param<S>(rng, Shape{6});
    Tensor<S> w = weights_like<S>(rng, Shape{4, 6});
    cases.push_back({"layer_norm",
                     {{"x", x}, {"gain", gain}, {"shift", shift}},
                     {{"w", w}},
                     [=] { return sum(mul(layer_norm(x, gain, shift), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{2, 16, 3, 3});
    Tensor<S> gain = grad_param<S>(rng, Shape{16});
    Tensor<S> shift = grad_param<S>(rng, Shape{16});
    Tensor<S> w = weights_like<S>(rng, Shape{2, 16, 3, 3});
    cases.push_back({"group_norm",
                     {{"x", x}, {"gain", gain}, {"shift", shift}},
                     {{"w", w}},
                     [=] { return sum(mul(group_norm(x, gain, shift, 8), w)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{1, 2, 5, 5});
    Tensor<S> w = grad_param<S>(rng, Shape{3, 2, 3, 3});
    Tensor<S> b = grad_param<S>(rng, Shape{3});
    Tensor<S> cot = weights_like<S>(rng, Shape{1, 3, 5, 5});
    cases.push_back({"conv2d_pad",
                     {{"x", x}, {"w", w}, {"b", b}},
                     {{"cot", cot}},
                     [=] { return sum(mul(conv2d(x, w, b, 1, 1), cot)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{1, 2, 6, 6});
    Tensor<S> w = grad_param<S>(rng, Shape{3, 2, 2, 2});
    Tensor<S> cot = weights_like<S>(rng, Shape{1, 3, 3, 3});
    cases.push_back({"conv2d_strided",
                     {{"x", x}, {"w", w}},
                     {{"cot", cot}},
                     [=] { return sum(mul(conv2d(x, w, 2, 0), cot)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{1, 3, 3, 3});
    Tensor<S> w = grad_param<S>(rng, Shape{3, 2, 2, 2});
    Tensor<S> b = grad_param<S>(rng, Shape{2});
    Tensor<S> cot = weights_like<S>(rng, Shape{1, 2, 6, 6});
    cases.push_back({"conv_transpose2d",
                     {{"x", x}, {"w", w}, {"b", b}},
                     {{"cot", cot}},
                     [=] { return sum(mul(conv_transpose2d(x, w, b, 2), cot)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{1, 2, 6, 6});
    Tensor<S> cot = weights_like<S>(rng, Shape{1, 4, 18});
    cases.push_back({"extract_patches",
                     {{"x", x}},
                     {{"cot", cot}},
                     [=] { return sum(mul(extract_patches(x, 3), cot)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{1, 2, 6, 6});
    Tensor<S> cot = weights_like<S>(rng, Shape{1, 2, 3, 3});
    cases.push_back(
        {"max_pool2d", {{"x", x}}, {{"cot", cot}}, [=] { return sum(mul(max_pool2d(x), cot)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> x = grad_param<S>(rng, Shape{2, 3, 4});
    Tensor<S> y = grad_param<S>(rng, Shape{4, 4});
    Tensor<S> cot = weights_like<S>(rng, Shape{8, 4});
    cases.push_back({"reshape_permute_slice_concat",
                     {{"x", x}, {"y", y}},
                     {{"cot", cot}},
                     [=] {
                       Tensor<S> p = permute(x, {1, 0, 2});    // [3,2,4]
                       Tensor<S> r = reshape(p, Shape{6, 4});  // [6,4]
                       Tensor<S> s = slice(r, 0, 1, 5);        // [4,4]
                       Tensor<S> c = concat(std::vector<Tensor<S>>{s, y}, 0);
                       return sum(mul(c, cot));
                     }});
  }
  {
    Rng rng = fresh();
    auto lin = std::make_shared<Linear<S>>(6, 4, rng);
    Tensor<S> x = grad_param<S>(rng, Shape{3, 6});
    Tensor<S> cot = weights_like<S>(rng, Shape{3, 4});
    ParamList<S> pl;
    lin->collect_params(pl, "linear");
    auto pairs = param_pairs(pl);
    pairs.push_back({"x", x});
    cases.push_back({"linear",
                     pairs,
                     {{"cot", cot}},
                     [lin, x, cot] { return sum(mul(lin->forward(x), cot)); }});
  }
  {
    Rng rng = fresh();
    auto attn = std::make_shared<MultiHeadSelfAttention<S>>(8, 2, rng);
    Tensor<S> x = grad_param<S>(rng, Shape{5, 8});
    Tensor<S> cot = weights_like<S>(rng, Shape{5, 8});
    ParamList<S> pl;
    attn->collect_params(pl, "attn");
    auto pairs = param_pairs(pl);
    pairs.push_back({"x", x});
    cases.push_back({"attention",
                     pairs,
                     {{"cot", cot}},
                     [attn, x, cot] { return sum(mul(attn->forward(x), cot)); }});
  }
  {
    Rng rng = fresh();
    auto block = std::make_shared<TransformerBlock<S>>(8, 2, 4, rng);
    Tensor<S> x = grad_param<S>(rng, Shape{5, 8});
    Tensor<S> cot = weights_like<S>(rng, Shape{5, 8});
    ParamList<S> pl;
    block->collect_params(pl, "block");
    auto pairs = param_pairs(pl);
    pairs.push_back({"x", x});
    cases.push_back({"transformer_block",
                     pairs,
                     {{"cot", cot}},
                     [block, x, cot] { return sum(mul(block->forward(x), cot)); }});
  }
  {
    Rng rng = fresh();
    Tensor<S> logits = grad_param<S>(rng, Shape{1, 2, 4, 4});
    Tensor<S> mask = Tensor<S>::allocate(Shape{1, 4, 4});
    for (auto& v : mask.mutable_values()) v = static_cast<S>(rng.below(2));
    cases.push_back({"cross_entropy",
                     {{"logits", logits}},
                     {{"mask", mask}},
                     [=] { return cross_entropy_loss(logits, mask); }});
  }
  return cases;
}

template <typename S>
GradCheckRow row_from(const std::string& name, double tol, const GradCheckReport& rep) {
  GradCheckRow row;
  row.op = name;
  row.max_rel_err = rep.max_rel_err;
  row.tol = tol;
  row.coords = rep.coords_checked;
  row.ok = rep.pass(tol);
  return row;
}

}  // namespace detail

// Finite-difference battery over every differentiable op, on small random
// tensors. The 64-bit run differentiates and re-evaluates in float64
// directly. The 32-bit run checks the single-precision analytic gradients,
// but evaluates the +/-h probes through an exact float64 twin of the same
// graph (perturbed parameter values copied across verbatim) so the reference
// is not drowned by single-precision forward rounding.
template <typename S>
std::vector<GradCheckRow> op_gradcheck_suite(double tol, std::uint64_t seed = 0) {
  std::vector<GradCheckRow> rows;
  std::vector<detail::GradCase<S>> cases = detail::build_gradcheck_cases<S>(seed);
  if constexpr (std::is_same_v<S, double>) {
    // h sits where truncation (~h^2) and rounding (~eps/h) error cross.
    for (const auto& c : cases) {
      rows.push_back(detail::row_from<S>(
          c.name, tol, finite_diff_gradcheck<double>(c.loss, c.params, 3e-5)));
    }
  } else {
    std::vector<detail::GradCase<double>> mirrors = detail::build_gradcheck_cases<double>(seed);
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const detail::GradCase<S>& c = cases[i];
      const detail::GradCase<double>& m = mirrors[i];
      detail::copy_pair_values(c.consts, m.consts);
      const std::function<double()> eval = [&c, &m] {
        detail::copy_pair_values(c.params, m.params);
        return m.loss().values()[0];
      };
      rows.push_back(detail::row_from<S>(
          c.name, tol, finite_diff_gradcheck<S>(c.loss, eval, c.params, S(1e-3))));
    }
  }
  return rows;
}

// End-to-end gradient check of the full conditional model, run in the 64-bit
// mode reserved for gradient checking. The step must sit well below the
// spacing of rectifier hinges along any one coordinate: a decoder bias shifts
// an entire full-resolution channel, so at desk widths pre-activations cross
// zero roughly every 1e-4 along the bias axis, and wider probes measure slope
// mixtures no correct gradient can match (32-bit steps cannot go this small,
// which is why the check is 64-bit). A few coordinates per parameter keep the
// runtime in seconds.
inline GradCheckRow conunetr_gradcheck(const ModelConfig& cfg, double tol, std::uint64_t seed,
                                       std::int64_t coords_per_param = 2) {
  ConUNETR<double> model(cfg, seed);
  const ParamList<double> params = model.params();

  Rng rng(derive_seed(seed, 0x6d636b));
  Tensor<double> image = Tensor<double>::normal(
      Shape{1, cfg.in_channels, cfg.img_size, cfg.img_size}, 0.0, 1.0, rng);
  Tensor<double> mask = Tensor<double>::allocate(Shape{1, cfg.img_size, cfg.img_size});
  for (auto& v : mask.mutable_values()) v = static_cast<double>(rng.below(2));
  const std::int64_t age_id = cfg.conditioning_mode == ConditioningMode::none ? 0 : 1;
  const int loc = 50;

  const auto loss_fn = [&]() {
    return cross_entropy_loss(model.forward_logits(image, age_id, loc), mask);
  };

  const GradCheckReport rep = finite_diff_gradcheck<double>(
      loss_fn, detail::param_pairs(params), 1e-6, coords_per_param,
      derive_seed(seed, 0x6d6373));
  return detail::row_from<double>("conunetr_full", tol, rep);
}

}  // namespace conunetr
