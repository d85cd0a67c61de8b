#pragma once

#include "pmt/decoder.hpp"
#include "pmt/gradcheck.hpp"
#include "pmt/losses.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace pmt {

struct GradSuiteEntry {
  std::string op;
  int instances = 0;
  double max_rel_err = 0.0;
  bool finite = true;

  bool ok(double tol = 1e-4) const { return finite && max_rel_err < tol; }
};

namespace detail {

using D = double;
using Fn = std::function<GradCheckReport(Rng&)>;

inline Tensor<D> weighted_sum(Tape<D>* tape, const Tensor<D>& y, const Tensor<D>& r) {
  return sum_all(tape, mul(tape, y, r));
}

inline std::vector<std::pair<std::string, Fn>> gradient_suite_cases() {
  std::vector<std::pair<std::string, Fn>> cases;
  auto add_case = [&](std::string name, Fn fn) { cases.emplace_back(std::move(name), std::move(fn)); };

  add_case("reshape", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {2, 6});
    Tensor<D> r = randn<D>(rng, {3, 4});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, reshape(t, in[0], {3, 4}), r);
        },
        {x});
  });

  add_case("permute", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {2, 3, 4});
    Tensor<D> r = randn<D>(rng, {4, 2, 3});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, permute(t, in[0], {2, 0, 1}), r);
        },
        {x});
  });

  add_case("transpose2d", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {3, 5});
    Tensor<D> r = randn<D>(rng, {5, 3});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, transpose2d(t, in[0]), r);
        },
        {x});
  });

  add_case("slice_rows", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {5, 3});
    Tensor<D> r = randn<D>(rng, {2, 3});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, slice_rows(t, in[0], 1, 2), r);
        },
        {x});
  });

  add_case("concat_rows", [](Rng& rng) {
    Tensor<D> a = randn<D>(rng, {2, 3});
    Tensor<D> b = randn<D>(rng, {3, 3});
    Tensor<D> r = randn<D>(rng, {5, 3});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, concat_rows(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("extract_patches", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {2, 4, 4});
    Tensor<D> r = randn<D>(rng, {4, 8});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, extract_patches(t, in[0], 2), r);
        },
        {x});
  });

  add_case("add", [](Rng& rng) {
    Tensor<D> a = randn<D>(rng, {3, 4});
    Tensor<D> b = randn<D>(rng, {3, 4});
    Tensor<D> r = randn<D>(rng, {3, 4});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, add(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("add_broadcast", [](Rng& rng) {
    Tensor<D> a = randn<D>(rng, {3, 4});
    Tensor<D> b = randn<D>(rng, {4});
    Tensor<D> r = randn<D>(rng, {3, 4});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, add(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("sub", [](Rng& rng) {
    Tensor<D> a = randn<D>(rng, {2, 5});
    Tensor<D> b = randn<D>(rng, {2, 5});
    Tensor<D> r = randn<D>(rng, {2, 5});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, sub(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("mul", [](Rng& rng) {
    Tensor<D> a = randn<D>(rng, {2, 5});
    Tensor<D> b = randn<D>(rng, {2, 5});
    Tensor<D> r = randn<D>(rng, {2, 5});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, mul(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("div", [](Rng& rng) {
    Tensor<D> a = randn<D>(rng, {2, 5});
    Tensor<D> b = randn<D>(rng, {2, 5});
    for (Index i = 0; i < b.size(); ++i)
      b.data()[i] = (b.data()[i] < 0 ? -1.0 : 1.0) * (std::abs(b.data()[i]) + 0.5);
    Tensor<D> r = randn<D>(rng, {2, 5});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, div(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("add_scalar", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {7});
    Tensor<D> r = randn<D>(rng, {7});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, add_scalar(t, in[0], 1.25), r);
        },
        {x});
  });

  add_case("mul_scalar", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {7});
    Tensor<D> r = randn<D>(rng, {7});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, mul_scalar(t, in[0], -0.75), r);
        },
        {x});
  });

  add_case("matmul", [](Rng& rng) {
    Index m = rng.uniform_int(1, 4), k = rng.uniform_int(1, 4), n = rng.uniform_int(1, 4);
    Tensor<D> a = randn<D>(rng, {m, k});
    Tensor<D> b = randn<D>(rng, {k, n});
    Tensor<D> r = randn<D>(rng, {m, n});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, matmul(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("matmul_batched", [](Rng& rng) {
    Tensor<D> a = randn<D>(rng, {2, 3, 2});
    Tensor<D> b = randn<D>(rng, {2, 2, 4});
    Tensor<D> r = randn<D>(rng, {2, 3, 4});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, matmul(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("matmul_shared_rhs", [](Rng& rng) {
    Tensor<D> a = randn<D>(rng, {3, 2, 2});
    Tensor<D> b = randn<D>(rng, {2, 4});
    Tensor<D> r = randn<D>(rng, {3, 2, 4});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, matmul(t, in[0], in[1]), r);
        },
        {a, b});
  });

  add_case("linear", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {3, 4});
    Tensor<D> w = randn<D>(rng, {5, 4});
    Tensor<D> b = randn<D>(rng, {5});
    Tensor<D> r = randn<D>(rng, {3, 5});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, linear(t, in[0], in[1], in[2]), r);
        },
        {x, w, b});
  });

  add_case("sum_all", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {3, 3});
    return gradcheck(
        [](Tape<D>* t, std::vector<Tensor<D>>& in) { return sum_all(t, in[0]); }, {x});
  });

  add_case("mean_all", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {4, 3});
    return gradcheck(
        [](Tape<D>* t, std::vector<Tensor<D>>& in) { return mean_all(t, in[0]); }, {x});
  });

  add_case("row_sums", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {4, 3});
    Tensor<D> r = randn<D>(rng, {4});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, row_sums(t, in[0]), r);
        },
        {x});
  });

  add_case("softmax", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {3, 5});
    Tensor<D> r = randn<D>(rng, {3, 5});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, softmax(t, in[0], -1), r);
        },
        {x});
  });

  add_case("softmax_axis0", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {3, 4});
    Tensor<D> r = randn<D>(rng, {3, 4});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, softmax(t, in[0], 0), r);
        },
        {x});
  });

  add_case("sigmoid", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {2, 6});
    Tensor<D> r = randn<D>(rng, {2, 6});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, sigmoid(t, in[0]), r);
        },
        {x});
  });

  add_case("gelu", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {2, 6});
    Tensor<D> r = randn<D>(rng, {2, 6});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, gelu(t, in[0]), r);
        },
        {x});
  });

  add_case("layer_norm", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {3, 6});
    Tensor<D> g = randn<D>(rng, {6});
    Tensor<D> b = randn<D>(rng, {6});
    Tensor<D> r = randn<D>(rng, {3, 6});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, layer_norm(t, in[0], in[1], in[2]), r);
        },
        {x, g, b});
  });

  add_case("batch_norm_train", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {5, 4});
    Tensor<D> g = randn<D>(rng, {4});
    Tensor<D> b = randn<D>(rng, {4});
    Tensor<D> r = randn<D>(rng, {5, 4});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          BatchNormState<D> st{in[1], in[2], Tensor<D>::zeros({4}), Tensor<D>::full({4}, 1.0)};
          return weighted_sum(t, batch_norm(t, in[0], st, true), r);
        },
        {x, g, b});
  });

  add_case("batch_norm_eval", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {5, 4});
    Tensor<D> g = randn<D>(rng, {4});
    Tensor<D> b = randn<D>(rng, {4});
    Tensor<D> rm = randn<D>(rng, {4}, 0.3);
    Tensor<D> rv = Tensor<D>::full({4}, 1.0);
    for (Index i = 0; i < 4; ++i) rv.data()[i] = 0.5 + rng.uniform();
    Tensor<D> r = randn<D>(rng, {5, 4});
    return gradcheck(
        [r, rm, rv](Tape<D>* t, std::vector<Tensor<D>>& in) {
          BatchNormState<D> st{in[1], in[2], rm, rv};
          return weighted_sum(t, batch_norm(t, in[0], st, false), r);
        },
        {x, g, b});
  });

  add_case("bilinear_upsample2x", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {2, 3, 3});
    Tensor<D> r = randn<D>(rng, {2, 6, 6});
    return gradcheck(
        [r](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, bilinear_upsample2x(t, in[0]), r);
        },
        {x});
  });

  add_case("rope_rotate", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {2, 3, 4});
    Tensor<D> cs({3, 2}), sn({3, 2});
    for (Index i = 0; i < 6; ++i) {
      double a = rng.uniform(-3.0, 3.0);
      cs.data()[i] = std::cos(a);
      sn.data()[i] = std::sin(a);
    }
    Tensor<D> r = randn<D>(rng, {2, 3, 4});
    return gradcheck(
        [r, cs, sn](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, rope_rotate(t, in[0], cs, sn), r);
        },
        {x});
  });

  add_case("bce_with_logits", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {3, 4});
    Tensor<D> tg({3, 4});
    for (Index i = 0; i < tg.size(); ++i) tg.data()[i] = rng.uniform();
    Tensor<D> r = randn<D>(rng, {3, 4});
    return gradcheck(
        [r, tg](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_sum(t, bce_with_logits(t, in[0], tg), r);
        },
        {x});
  });

  add_case("weighted_cross_entropy", [](Rng& rng) {
    Tensor<D> x = randn<D>(rng, {4, 3});
    std::vector<int> tg(4);
    for (auto& v : tg) v = rng.uniform_int(0, 2);
    std::vector<D> w = {1.0, 1.0, 0.1};
    return gradcheck(
        [tg, w](Tape<D>* t, std::vector<Tensor<D>>& in) {
          return weighted_cross_entropy(t, in[0], tg, w);
        },
        {x});
  });

  return cases;
}

}  // namespace detail

/// Finite-difference check of the whole decoder-and-loss chain: a tiny
/// decoder forward with deep supervision feeding the segmentation loss,
/// differentiated with respect to its inputs and every parameter. The step
/// is pinned to the end of the anneal window so no masking threshold can
/// flip under perturbation.
inline GradSuiteEntry run_composition_check(int instances = 10) {
  ModelConfig mc;
  mc.image_height = mc.image_width = 32;
  mc.patch_size = 8;
  mc.embed_dim = 8;
  mc.num_layers = 2;
  mc.num_heads = 2;
  mc.num_register_tokens = 1;
  mc.ffn_expansion = 2;
  mc.tap_layers = {1, 2};
  mc.eomt_l1 = 1;
  mc.eomt_l2 = 1;
  mc.num_queries = 3;
  mc.decoder_layers = 1;
  mc.num_classes = 2;

  GradSuiteEntry e;
  e.op = "decoder_loss_composition";
  for (int inst = 0; inst < instances; ++inst) {
    Rng rng(hash_combine(0xc0417051u, static_cast<std::uint64_t>(inst)));
    Decoder<double> dec;
    dec.init(mc, rng);

    std::vector<GtSegment<double>> gt(2);
    for (std::size_t j = 0; j < gt.size(); ++j) {
      gt[j].class_id = static_cast<Index>(j);
      gt[j].mask = Tensor<double>::zeros({mc.mask_h(), mc.mask_w()});
      for (Index i = 0; i < gt[j].mask.size(); ++i)
        gt[j].mask.data()[i] = rng.uniform() < 0.45 ? 1.0 : 0.0;
      gt[j].mask.data()[static_cast<std::size_t>(j)] = 1.0;
    }
    LossWeights lw;

    std::vector<Tensor<double>> inputs;
    inputs.push_back(randn<double>(rng, {mc.num_patches(), mc.embed_dim}, 0.5));
    inputs.push_back(randn<double>(rng, {mc.num_queries, mc.embed_dim}, 0.5));
    inputs.push_back(randn<double>(rng, {1 + mc.num_register_tokens, mc.embed_dim}, 0.5));
    ParamList<double> params;
    dec.collect(params, "d");
    for (auto& np : params)
      if (!np.tensor.same_node(dec.learned_queries)) inputs.push_back(np.tensor);

    auto f = [&](Tape<double>* tape, const std::vector<Tensor<double>>& in) {
      DecoderOut<double> out = dec.forward(tape, in[0], in[1], in[2], true, 100, 100, 9);
      return segmentation_loss(tape, out.preds, gt, lw, mc.num_classes).total;
    };
    GradCheckReport rep = gradcheck(f, inputs, 1e-4, 1e-4);
    e.instances += 1;
    e.finite = e.finite && rep.finite;
    e.max_rel_err = std::max(e.max_rel_err, rep.max_rel_err);
  }
  return e;
}

/// Central-difference verification of every differentiable primitive,
/// several random instances per op. Runs entirely in 64-bit.
inline std::vector<GradSuiteEntry> run_gradient_suite(int instances = 10) {
  std::vector<GradSuiteEntry> out;
  auto cases = detail::gradient_suite_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    GradSuiteEntry e;
    e.op = cases[ci].first;
    for (int i = 0; i < instances; ++i) {
      Rng rng(hash_combine(0x9a7ecc1e5u, hash_combine(ci, static_cast<std::uint64_t>(i))));
      GradCheckReport rep = cases[ci].second(rng);
      e.instances += 1;
      e.finite = e.finite && rep.finite;
      e.max_rel_err = std::max(e.max_rel_err, rep.max_rel_err);
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace pmt
