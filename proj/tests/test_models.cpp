// Candidate operations, the relaxed supernet for both topologies,
// discretization, and architecture enumeration/serialization.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "das1d/candidate_ops.hpp"
#include "das1d/grad_check.hpp"
#include "das1d/search_space.hpp"
#include "das1d/signal.hpp"

using namespace das1d;

namespace {

// 1/2 ||Au - f||^2 without touching any tape.
double data_term(const DegradationOperator& op, const Tensor& u,
                 const Tensor& f) {
  const long B = u.shape[0];
  std::vector<double> au(static_cast<std::size_t>(B * op.output_length()));
  op.apply_raw(u.ptr(), au.data(), B);
  double acc = 0.0;
  for (long i = 0; i < f.numel(); ++i) {
    const double d = au[static_cast<std::size_t>(i)] - f.at(i);
    acc += d * d;
  }
  return 0.5 * acc;
}

void zero_param(Parameter& p) {
  std::fill(p.value.data->begin(), p.value.data->end(), 0.0);
}

void saturate(Parameter& alpha, std::size_t choice) {
  for (long i = 0; i < alpha.value.numel(); ++i)
    alpha.value.at(i) = static_cast<std::size_t>(i) == choice ? 1000.0 : -1000.0;
}

Tensor randn(Rng& rng, Shape s) {
  Tensor t = Tensor::zeros(s);
  for (long i = 0; i < t.numel(); ++i) t.at(i) = rng.normal();
  return t;
}

SpaceSpec seq_space(int depth, std::vector<OperationKind> ops,
                    bool residual = true) {
  SpaceSpec s;
  s.topology = Topology::Sequential;
  s.depth = depth;
  s.opset = std::move(ops);
  s.global_residual = residual;
  return s;
}

SpaceSpec cell_space(int cells, int states, std::vector<OperationKind> ops,
                     bool residual = true) {
  SpaceSpec s;
  s.topology = Topology::Cell;
  s.cells = cells;
  s.states = states;
  s.opset = std::move(ops);
  s.global_residual = residual;
  return s;
}

}  // namespace

TEST_CASE("operation mnemonics round trip") {
  for (OperationKind k :
       {OperationKind::LearnableGrad, OperationKind::Net, OperationKind::Roll,
        OperationKind::Noise, OperationKind::Zero}) {
    auto back = op_from_mnemonic(op_mnemonic(k));
    REQUIRE(back.has_value());
    REQUIRE(*back == k);
  }
  REQUIRE_FALSE(op_from_mnemonic("bogus").has_value());
  REQUIRE(is_benign(OperationKind::LearnableGrad));
  REQUIRE(is_benign(OperationKind::Net));
  REQUIRE_FALSE(is_benign(OperationKind::Roll));
  REQUIRE_FALSE(is_benign(OperationKind::Noise));
  REQUIRE_FALSE(is_benign(OperationKind::Zero));
}

TEST_CASE("op_init sets the documented starting point") {
  const auto op = DegradationOperator::blur(50);

  SECTION("deterministic under the same seed") {
    Rng r1(3), r2(3);
    OpInstance a = op_init(OperationKind::LearnableGrad, r1, op);
    OpInstance b = op_init(OperationKind::LearnableGrad, r2, op);
    REQUIRE(*a.net.w1.value.data == *b.net.w1.value.data);
    REQUIRE(*a.net.w2.value.data == *b.net.w2.value.data);
    REQUIRE(a.tau.value.item() == b.tau.value.item());
  }
  SECTION("tau is the inverse squared operator norm") {
    Rng rng(1);
    OpInstance lg = op_init(OperationKind::LearnableGrad, rng, op);
    REQUIRE(lg.tau.value.item() == 1.0 / (op.norm() * op.norm()));
    OpInstance nz = op_init(OperationKind::Noise, rng, op);
    REQUIRE(nz.tau.value.item() == 1.0 / (op.norm() * op.norm()));
    // identity-like operator: norm 1, so tau = 1
    const auto id = DegradationOperator::blur(50, 1e-6);
    OpInstance lg_id = op_init(OperationKind::LearnableGrad, rng, id);
    REQUIRE_THAT(lg_id.tau.value.item(), Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("conv weights stay inside the fan-in bound and spread out") {
    const double bound1 = 1.0 / std::sqrt(3.0);        // 1 channel, K=3
    const double bound2 = 1.0 / std::sqrt(16.0 * 3.0); // 16 channels, K=3
    double max1 = 0.0, max2 = 0.0;
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      OpInstance net = op_init(OperationKind::Net, rng, op);
      for (double v : *net.net.w1.value.data) {
        REQUIRE(std::abs(v) <= bound1);
        max1 = std::max(max1, std::abs(v));
      }
      for (double v : *net.net.w2.value.data) {
        REQUIRE(std::abs(v) <= bound2);
        max2 = std::max(max2, std::abs(v));
      }
      for (double v : *net.net.b1.value.data) REQUIRE(v == 0.0);
      for (double v : *net.net.b2.value.data) REQUIRE(v == 0.0);
      for (double v : *net.net.gamma.value.data) REQUIRE(v == 1.0);
      for (double v : *net.net.beta.value.data) REQUIRE(v == 0.0);
    }
    REQUIRE(max1 > 0.9 * bound1);  // 480 draws: vanishingly unlikely to fail
    REQUIRE(max2 > 0.9 * bound2);
  }
  SECTION("parameter inventory per kind") {
    Rng rng(5);
    REQUIRE(op_init(OperationKind::Roll, rng, op).parameters().empty());
    REQUIRE(op_init(OperationKind::Zero, rng, op).parameters().empty());
    REQUIRE(op_init(OperationKind::Noise, rng, op).parameters().size() == 1);
    REQUIRE(op_init(OperationKind::Net, rng, op).parameters().size() == 6);
    REQUIRE(op_init(OperationKind::LearnableGrad, rng, op).parameters().size() ==
            7);
    REQUIRE(op_init(OperationKind::Roll, rng, op).roll_shift == 12);
    REQUIRE_THROWS_AS(op_init(OperationKind::Net, rng, op, 0),
                      std::invalid_argument);
  }
}

TEST_CASE("op_forward per-kind semantics") {
  const auto op = DegradationOperator::blur(50);
  Rng rng(11);
  Tensor u = randn(rng, Shape{2, 1, 50});
  Tensor f = Tensor::zeros(Shape{2, 1, 50});
  op.apply_raw(u.ptr(), f.ptr(), 2);

  LayerContext ctx;
  ctx.measurement = &f;
  ctx.op = &op;
  ctx.rng = &rng;

  SECTION("learnable gradient at a consistent point is a fixed point") {
    Rng init(2);
    OpInstance lg = op_init(OperationKind::LearnableGrad, init, op);
    zero_param(lg.net.w2);
    zero_param(lg.net.b2);  // n(u) == 0
    Tape tape;
    Tensor out = op_forward(lg, tape, u, ctx);
    for (long i = 0; i < u.numel(); ++i) REQUIRE(out.at(i) == u.at(i));
  }
  SECTION("zero op returns zeros and tracks nothing") {
    Rng init(2);
    OpInstance z = op_init(OperationKind::Zero, init, op);
    Tape tape;
    Parameter input(u.clone());
    Tensor tu = tape.watch(input);  // tracked input
    Tensor out = op_forward(z, tape, tu, ctx);
    for (long i = 0; i < out.numel(); ++i) REQUIRE(out.at(i) == 0.0);
    REQUIRE_FALSE(out.tracked());
  }
  SECTION("roll by s then by N-s is the identity") {
    Rng init(2);
    OpInstance roll = op_init(OperationKind::Roll, init, op);
    OpInstance inverse = roll.clone();
    inverse.roll_shift = 50 - roll.roll_shift;
    Tape tape;
    Tensor once = op_forward(roll, tape, u, ctx);
    Tensor twice = op_forward(inverse, tape, once, ctx);
    for (long i = 0; i < u.numel(); ++i) REQUIRE(twice.at(i) == u.at(i));
  }
  SECTION("noiseless noise op is a pure gradient step") {
    LayerContext quiet = ctx;
    quiet.noise_sigma = 0.0;
    Rng init(2);
    OpInstance nz = op_init(OperationKind::Noise, init, op);
    Tape tape;
    Tensor fresh = randn(rng, Shape{2, 1, 50});
    Tensor out = op_forward(nz, tape, fresh, quiet);
    // manual: u - tau * A^T(Au - f)
    std::vector<double> au(2 * 50), res(2 * 50), back(2 * 50);
    op.apply_raw(fresh.ptr(), au.data(), 2);
    for (long i = 0; i < 100; ++i)
      res[static_cast<std::size_t>(i)] =
          au[static_cast<std::size_t>(i)] - f.at(i);
    op.adjoint_raw(res.data(), back.data(), 2);
    const double tau = nz.tau.value.item();
    for (long i = 0; i < 100; ++i)
      REQUIRE_THAT(out.at(i),
                   Catch::Matchers::WithinAbs(
                       fresh.at(i) - tau * back[static_cast<std::size_t>(i)],
                       1e-14));
  }
  SECTION("context validation") {
    Rng init(2);
    OpInstance lg = op_init(OperationKind::LearnableGrad, init, op);
    Tape tape;
    LayerContext empty;
    REQUIRE_THROWS_AS(op_forward(lg, tape, u, empty), std::invalid_argument);
    LayerContext no_rng = ctx;
    no_rng.rng = nullptr;
    OpInstance nz = op_init(OperationKind::Noise, init, op);
    REQUIRE_THROWS_AS(op_forward(nz, tape, u, no_rng), std::invalid_argument);
    REQUIRE_THROWS_AS(op_forward(lg, tape, randn(rng, Shape{1, 1, 13}), ctx),
                      std::invalid_argument);
  }
}

TEST_CASE("gradient step never increases the data term") {
  // descent-lemma check at the initialized tau = 1/||A||^2
  for (auto kind : {Degradation::Blur, Degradation::BlurDownsample}) {
    const auto op = DegradationOperator::make(kind, 50);
    Rng rng(23);
    Rng init(1);
    OpInstance lg = op_init(OperationKind::LearnableGrad, init, op);
    zero_param(lg.net.w2);
    zero_param(lg.net.b2);
    OpInstance nz = op_init(OperationKind::Noise, init, op);
    CosineConfig cfg;
    LayerContext ctx;
    ctx.op = &op;
    ctx.rng = &rng;
    ctx.noise_sigma = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const SignalBatch batch = make_batch(rng, op, cfg, 2);
      ctx.measurement = &batch.measured;
      Tensor u = randn(rng, Shape{2, 1, 50});
      const double before = data_term(op, u, batch.measured);
      Tape tape;
      Tensor after_lg = op_forward(lg, tape, u, ctx);
      Tensor after_nz = op_forward(nz, tape, u, ctx);
      REQUIRE(data_term(op, after_lg, batch.measured) <=
              before * (1.0 + 1e-12));
      REQUIRE(data_term(op, after_nz, batch.measured) <=
              before * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("candidate ops pass gradient checks") {
  const auto op = DegradationOperator::blur(50);
  Rng rng(13);
  Tensor f = randn(rng, Shape{2, 1, 50});
  LayerContext ctx;
  ctx.measurement = &f;
  ctx.op = &op;
  ctx.rng = &rng;
  ctx.frozen_noise = true;
  Parameter u(randn(rng, Shape{2, 1, 50}));
  const Tensor target = randn(rng, Shape{2, 1, 50});

  SECTION("learnable gradient w.r.t. theta, tau, and input") {
    Rng init(4);
    OpInstance lg = op_init(OperationKind::LearnableGrad, init, op, 4);
    std::vector<Parameter*> params = lg.parameters();
    params.push_back(&u);
    const double err = grad_check(
        [&](Tape& t) {
          return mse(t, op_forward(lg, t, t.watch(u), ctx), target);
        },
        std::span<Parameter* const>(params.data(), params.size()));
    REQUIRE(err <= 1e-4);
  }
  SECTION("noise op with frozen noise w.r.t. tau and input") {
    Rng init(4);
    OpInstance nz = op_init(OperationKind::Noise, init, op);
    std::vector<Parameter*> params = nz.parameters();
    params.push_back(&u);
    const double err = grad_check(
        [&](Tape& t) {
          return mse(t, op_forward(nz, t, t.watch(u), ctx), target);
        },
        std::span<Parameter* const>(params.data(), params.size()));
    REQUIRE(err <= 1e-4);
  }
}

TEST_CASE("mixed_forward blends candidate outputs") {
  const auto op = DegradationOperator::blur(50);
  Rng rng(19);
  Tensor f = randn(rng, Shape{2, 1, 50});
  Tensor u = randn(rng, Shape{2, 1, 50});
  LayerContext ctx;
  ctx.measurement = &f;
  ctx.op = &op;
  ctx.rng = &rng;

  Rng init(8);
  std::vector<OpInstance> ops;
  ops.push_back(op_init(OperationKind::LearnableGrad, init, op));
  ops.push_back(op_init(OperationKind::Net, init, op));

  SECTION("saturated logits pick out a single op") {
    for (std::size_t pick = 0; pick < 2; ++pick) {
      Tensor alphas = Tensor::zeros(Shape{2});
      alphas.at(0) = pick == 0 ? 1000.0 : -1000.0;
      alphas.at(1) = pick == 1 ? 1000.0 : -1000.0;
      Tape tape;
      Tensor mixed = mixed_forward(tape, alphas, ops, u, ctx);
      Tensor solo = op_forward(ops[pick], tape, u, ctx);
      for (long i = 0; i < mixed.numel(); ++i)
        REQUIRE_THAT(mixed.at(i),
                     Catch::Matchers::WithinAbs(solo.at(i), 1e-9));
    }
  }
  SECTION("equal logits average the candidates") {
    Tensor alphas = Tensor::full(Shape{2}, 0.37);
    Tape tape;
    Tensor mixed = mixed_forward(tape, alphas, ops, u, ctx);
    Tensor a = op_forward(ops[0], tape, u, ctx);
    Tensor b = op_forward(ops[1], tape, u, ctx);
    for (long i = 0; i < mixed.numel(); ++i)
      REQUIRE_THAT(mixed.at(i), Catch::Matchers::WithinAbs(
                                    0.5 * (a.at(i) + b.at(i)), 1e-12));
  }
  SECTION("adding a constant to all logits changes nothing") {
    Tensor a1 = Tensor::from({0.3, -0.9}, Shape{2});
    Tensor a2 = Tensor::from({0.3 + 7.5, -0.9 + 7.5}, Shape{2});
    Tape tape;
    Tensor m1 = mixed_forward(tape, a1, ops, u, ctx);
    Tensor m2 = mixed_forward(tape, a2, ops, u, ctx);
    for (long i = 0; i < m1.numel(); ++i)
      REQUIRE_THAT(m1.at(i), Catch::Matchers::WithinAbs(m2.at(i), 1e-12));
  }
  SECTION("softmax weights are positive and normalized") {
    Tape tape;
    Tensor beta = softmax_vec(tape, Tensor::from({1.5, -2.0}, Shape{2}));
    double sum = 0.0;
    for (long i = 0; i < beta.numel(); ++i) {
      REQUIRE(beta.at(i) > 0.0);
      sum += beta.at(i);
    }
    REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("validation") {
    Tape tape;
    std::vector<OpInstance> none;
    REQUIRE_THROWS_AS(
        mixed_forward(tape, Tensor::zeros(Shape{1}), none, u, ctx),
        std::invalid_argument);
    REQUIRE_THROWS_AS(
        mixed_forward(tape, Tensor::zeros(Shape{3}), ops, u, ctx),
        std::invalid_argument);
  }
}

TEST_CASE("space specs count sites and validate opsets") {
  SpaceSpec seq = seq_space(10, good_opset());
  REQUIRE(seq.site_count() == 10);
  seq.validate();

  SpaceSpec cell = cell_space(2, 5, all_opset(Topology::Cell));
  REQUIRE(cell.edges_per_cell() == 15);
  REQUIRE(cell.site_count() == 30);
  REQUIRE(all_opset(Topology::Cell).size() == 5);
  REQUIRE(all_opset(Topology::Sequential).size() == 4);
  cell.validate();

  const auto edges = cell_edges(5);
  REQUIRE(edges.size() == 15);
  REQUIRE((edges[0].from == 0 && edges[0].to == 1));
  REQUIRE((edges[14].from == 4 && edges[14].to == 5));
  // lexicographic and i < j throughout
  for (std::size_t e = 1; e < edges.size(); ++e) {
    REQUIRE(edges[e].from < edges[e].to);
    REQUIRE((edges[e].from > edges[e - 1].from ||
             (edges[e].from == edges[e - 1].from &&
              edges[e].to > edges[e - 1].to)));
  }

  SECTION("invalid specs are rejected") {
    REQUIRE_THROWS_AS(seq_space(3, {OperationKind::Zero}).validate(),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(seq_space(0, good_opset()).validate(),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(seq_space(3, {}).validate(), std::invalid_argument);
    REQUIRE_THROWS_AS(
        seq_space(3, {OperationKind::Net, OperationKind::Net}).validate(),
        std::invalid_argument);
    REQUIRE_THROWS_AS(cell_space(1, 1, good_opset()).validate(),
                      std::invalid_argument);
  }
}

TEST_CASE("build_relaxed allocates one instance set per site") {
  const auto op = DegradationOperator::blur(50);

  SECTION("sequential: L sites, |opset| candidates each") {
    Rng rng(3);
    RelaxedModel m = build_relaxed(seq_space(10, good_opset()), op, rng);
    REQUIRE(m.sites.size() == 10);
    for (const auto& s : m.sites) {
      REQUIRE(s.candidates.size() == 2);
      REQUIRE(s.alpha.value.numel() == 2);
      REQUIRE(s.candidates[0].kind == OperationKind::LearnableGrad);
      REQUIRE(s.candidates[1].kind == OperationKind::Net);
    }
    REQUIRE(m.cell_convs.empty());
    REQUIRE(m.alpha_parameters().size() == 10);
  }
  SECTION("cell: 30 sites, 5 candidates, one conv per cell") {
    Rng rng(3);
    RelaxedModel m =
        build_relaxed(cell_space(2, 5, all_opset(Topology::Cell)), op, rng);
    REQUIRE(m.sites.size() == 30);
    for (const auto& s : m.sites) REQUIRE(s.candidates.size() == 5);
    REQUIRE(m.cell_convs.size() == 2);
    REQUIRE(m.cell_convs[0].w.value.shape == Shape{1, 2, 1});
  }
  SECTION("same seed gives an identical model") {
    Rng r1(42), r2(42);
    const SpaceSpec space = seq_space(4, all_opset(Topology::Sequential));
    RelaxedModel a = build_relaxed(space, op, r1);
    RelaxedModel b = build_relaxed(space, op, r2);
    for (std::size_t s = 0; s < a.sites.size(); ++s) {
      REQUIRE(*a.sites[s].alpha.value.data == *b.sites[s].alpha.value.data);
      for (std::size_t c = 0; c < a.sites[s].candidates.size(); ++c) {
        auto pa = a.sites[s].candidates[c].parameters();
        auto pb = b.sites[s].candidates[c].parameters();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t p = 0; p < pa.size(); ++p)
          REQUIRE(*pa[p]->value.data == *pb[p]->value.data);
      }
    }
  }
  SECTION("alpha starts near zero but not identically zero") {
    Rng rng(9);
    RelaxedModel m = build_relaxed(seq_space(10, good_opset()), op, rng);
    bool any_nonzero = false;
    for (const auto& s : m.sites)
      for (double v : *s.alpha.value.data) {
        REQUIRE(std::abs(v) < 0.1);
        any_nonzero = any_nonzero || v != 0.0;
      }
    REQUIRE(any_nonzero);
  }
  SECTION("Zero in a sequential opset is rejected") {
    Rng rng(3);
    SpaceSpec bad = seq_space(3, good_opset());
    bad.opset.push_back(OperationKind::Zero);
    REQUIRE_THROWS_AS(build_relaxed(bad, op, rng), std::invalid_argument);
  }
}

TEST_CASE("discretize takes the per-site argmax with a stable tie rule") {
  const auto op = DegradationOperator::blur(50);
  Rng rng(6);
  RelaxedModel m = build_relaxed(seq_space(3, good_opset()), op, rng);

  m.sites[0].alpha.value.at(0) = 0.1;   // LG
  m.sites[0].alpha.value.at(1) = 2.0;   // Net wins
  m.sites[1].alpha.value.at(0) = 0.5;   // exact tie: first entry wins
  m.sites[1].alpha.value.at(1) = 0.5;
  m.sites[2].alpha.value.at(0) = -1.0;
  m.sites[2].alpha.value.at(1) = -3.0;  // LG wins

  DiscreteArch arch = discretize(m);
  REQUIRE(arch.choices == std::vector<OperationKind>{OperationKind::Net,
                                                     OperationKind::LearnableGrad,
                                                     OperationKind::LearnableGrad});

  // shifting a site's logits by a constant cannot change the argmax
  for (long i = 0; i < 2; ++i) m.sites[0].alpha.value.at(i) += 123.0;
  REQUIRE(discretize(m).choices == arch.choices);

  REQUIRE(arch.to_string() == "seq:Net,LG,LG");
}

TEST_CASE("architecture strings parse back to themselves") {
  const SpaceSpec small = seq_space(2, all_opset(Topology::Sequential));
  for (const DiscreteArch& a : enumerate_archs(small)) {
    const DiscreteArch back = parse_arch(small, a.to_string());
    REQUIRE(back.choices == a.choices);
  }
  const SpaceSpec cell = cell_space(1, 2, all_opset(Topology::Cell));
  for (const DiscreteArch& a : enumerate_archs(cell)) {
    const DiscreteArch back = parse_arch(cell, a.to_string());
    REQUIRE(back.choices == a.choices);
  }

  SECTION("parse errors") {
    REQUIRE_THROWS_AS(parse_arch(small, "LG,Net"), std::invalid_argument);
    REQUIRE_THROWS_AS(parse_arch(small, "cell:LG,Net"), std::invalid_argument);
    REQUIRE_THROWS_AS(parse_arch(small, "seq:LG,Bogus"), std::invalid_argument);
    REQUIRE_THROWS_AS(parse_arch(seq_space(2, good_opset()), "seq:LG,Roll"),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(parse_arch(small, "seq:LG,Net,Roll"),
                      std::invalid_argument);
  }
}

TEST_CASE("enumerate_archs lists the whole space exactly once") {
  REQUIRE(enumerate_archs(seq_space(2, all_opset(Topology::Sequential))).size() ==
          16);
  REQUIRE(enumerate_archs(seq_space(1, good_opset())).size() == 2);

  const SpaceSpec space = seq_space(3, all_opset(Topology::Sequential));
  const auto all = enumerate_archs(space);
  REQUIRE(all.size() == 64);
  std::set<std::string> names;
  for (const auto& a : all) names.insert(a.to_string());
  REQUIRE(names.size() == all.size());  // no duplicates

  // completeness: every random draw is in the enumeration
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    REQUIRE(names.count(random_arch(space, rng).to_string()) == 1);
  }

  SECTION("guard on oversized spaces") {
    REQUIRE_THROWS_AS(enumerate_archs(seq_space(20, all_opset(Topology::Sequential))),
                      std::invalid_argument);
  }
}

TEST_CASE("random_arch is uniform per site") {
  SECTION("single-op space has a unique architecture") {
    const SpaceSpec one = seq_space(3, {OperationKind::Net});
    Rng rng(5);
    const DiscreteArch a = random_arch(one, rng);
    REQUIRE(a.to_string() == "seq:Net,Net,Net");
  }
  SECTION("deterministic under a fixed seed") {
    const SpaceSpec space = seq_space(6, all_opset(Topology::Sequential));
    Rng r1(77), r2(77);
    REQUIRE(random_arch(space, r1).to_string() ==
            random_arch(space, r2).to_string());
  }
  SECTION("site marginals are uniform within 3 sigma") {
    const SpaceSpec space = seq_space(4, all_opset(Topology::Sequential));
    Rng rng(123);
    const int draws = 10000;
    int counts[4][4] = {};
    for (int d = 0; d < draws; ++d) {
      const DiscreteArch a = random_arch(space, rng);
      for (int s = 0; s < 4; ++s)
        for (int k = 0; k < 4; ++k)
          if (a.choices[static_cast<std::size_t>(s)] == space.opset[static_cast<std::size_t>(k)])
            ++counts[s][k];
    }
    const double p = 0.25;
    const double sigma = std::sqrt(p * (1 - p) / draws);
    for (int s = 0; s < 4; ++s)
      for (int k = 0; k < 4; ++k) {
        const double freq = counts[s][k] / static_cast<double>(draws);
        REQUIRE(std::abs(freq - p) <= 3.0 * sigma);
      }
  }
}

TEST_CASE("relaxed forward with saturated logits equals the extracted network") {
  Rng data_rng(55);

  SECTION("sequential over every op kind") {
    const auto op = DegradationOperator::blur(50);
    const SpaceSpec space = seq_space(4, all_opset(Topology::Sequential));
    Rng rng(21);
    RelaxedModel model = build_relaxed(space, op, rng);
    // one site per kind: LG, Net, Roll, Noise
    for (std::size_t s = 0; s < 4; ++s) saturate(model.sites[s].alpha, s);

    const SignalBatch batch = make_batch(data_rng, op, CosineConfig{}, 3);
    Rng noise_rng(91);
    LayerContext ctx;
    ctx.measurement = &batch.measured;
    ctx.op = &op;
    ctx.rng = &noise_rng;
    ctx.frozen_noise = true;

    Tape tape;
    Tensor relaxed = forward_relaxed(model, tape, batch.measured, ctx);
    REQUIRE(relaxed.shape == Shape{3, 1, 50});

    const DiscreteArch arch = discretize(model);
    REQUIRE(arch.to_string() == "seq:LG,Net,Roll,Noise");
    DiscreteNet net = extract_discrete(model, arch);
    Tensor discrete = forward_discrete(net, tape, batch.measured, ctx);
    for (long i = 0; i < relaxed.numel(); ++i)
      REQUIRE_THAT(relaxed.at(i),
                   Catch::Matchers::WithinAbs(discrete.at(i), 1e-9));
  }
  SECTION("cell topology with zero ops in the mix") {
    const auto op = DegradationOperator::blur_downsample(50);
    const SpaceSpec space = cell_space(2, 3, all_opset(Topology::Cell));
    Rng rng(33);
    RelaxedModel model = build_relaxed(space, op, rng);
    Rng pick(3);
    for (auto& site : model.sites)
      saturate(site.alpha,
               static_cast<std::size_t>(pick.uniform_int(
                   static_cast<int>(space.opset.size()))));

    const SignalBatch batch = make_batch(data_rng, op, CosineConfig{}, 2);
    Rng noise_rng(92);
    LayerContext ctx;
    ctx.measurement = &batch.measured;
    ctx.op = &op;
    ctx.rng = &noise_rng;
    ctx.frozen_noise = true;

    Tape tape;
    Tensor relaxed = forward_relaxed(model, tape, batch.measured, ctx);
    REQUIRE(relaxed.shape == Shape{2, 1, 50});

    DiscreteNet net = extract_discrete(model, discretize(model));
    Tensor discrete = forward_discrete(net, tape, batch.measured, ctx);
    for (long i = 0; i < relaxed.numel(); ++i)
      REQUIRE_THAT(relaxed.at(i),
                   Catch::Matchers::WithinAbs(discrete.at(i), 1e-9));
  }
}

TEST_CASE("extract_discrete copies weights without sharing them") {
  const auto op = DegradationOperator::blur(50);
  Rng rng(14);
  RelaxedModel model = build_relaxed(seq_space(2, good_opset()), op, rng);
  saturate(model.sites[0].alpha, 1);
  saturate(model.sites[1].alpha, 1);
  DiscreteNet net = extract_discrete(model, discretize(model));

  REQUIRE(*net.ops[0].net.w1.value.data ==
          *model.sites[0].candidates[1].net.w1.value.data);
  net.ops[0].net.w1.value.at(0) += 1.0;
  REQUIRE(net.ops[0].net.w1.value.at(0) !=
          model.sites[0].candidates[1].net.w1.value.at(0));

  SECTION("site count mismatch is rejected") {
    RelaxedModel other = build_relaxed(seq_space(3, good_opset()), op, rng);
    REQUIRE_THROWS_AS(extract_discrete(other, discretize(model)),
                      std::invalid_argument);
  }
}

TEST_CASE("build_discrete starts from fresh weights") {
  const auto op = DegradationOperator::blur(50);
  const SpaceSpec space = seq_space(3, good_opset());
  Rng rng(10);
  const DiscreteArch arch = random_arch(space, rng);
  Rng s1(1), s2(2), s1_again(1);
  DiscreteNet a = build_discrete(arch, op, s1);
  DiscreteNet b = build_discrete(arch, op, s2);
  DiscreteNet c = build_discrete(arch, op, s1_again);
  REQUIRE(a.ops.size() == 3);
  REQUIRE(*a.ops[0].net.w1.value.data != *b.ops[0].net.w1.value.data);
  REQUIRE(*a.ops[0].net.w1.value.data == *c.ops[0].net.w1.value.data);

  DiscreteArch short_arch = arch;
  short_arch.choices.pop_back();
  REQUIRE_THROWS_AS(build_discrete(short_arch, op, rng),
                    std::invalid_argument);
}

TEST_CASE("an all-zero cell body passes the residual through untouched") {
  const auto op = DegradationOperator::blur_downsample(50);
  SpaceSpec space = cell_space(2, 5, {OperationKind::Zero, OperationKind::Net});
  Rng rng(2);
  DiscreteArch arch;
  arch.space = space;
  arch.choices.assign(30, OperationKind::Zero);
  DiscreteNet net = build_discrete(arch, op, rng);
  for (auto& cc : net.cell_convs) zero_param(cc.w);

  Rng data_rng(77);
  const SignalBatch batch = make_batch(data_rng, op, CosineConfig{}, 3);
  LayerContext ctx;
  ctx.measurement = &batch.measured;
  ctx.op = &op;
  ctx.rng = &data_rng;

  Tape tape;
  Tensor out = forward_discrete(net, tape, batch.measured, ctx);
  Tensor u0 = Tensor::zeros(Shape{3, 1, 50});
  op.adjoint_raw(batch.measured.ptr(), u0.ptr(), 3);
  for (long i = 0; i < out.numel(); ++i) REQUIRE(out.at(i) == u0.at(i));
}

TEST_CASE("a chain of zeroed gradient layers keeps reducing the data term") {
  const auto op = DegradationOperator::blur(50);
  Rng rng(41);
  const SignalBatch batch = make_batch(rng, op, CosineConfig{}, 2);
  LayerContext ctx;
  ctx.measurement = &batch.measured;
  ctx.op = &op;
  ctx.rng = &rng;

  Rng init(9);
  SpaceSpec space = seq_space(5, {OperationKind::LearnableGrad}, false);
  DiscreteArch arch;
  arch.space = space;
  arch.choices.assign(5, OperationKind::LearnableGrad);
  DiscreteNet net = build_discrete(arch, op, init);
  for (auto& o : net.ops) {
    zero_param(o.net.w2);
    zero_param(o.net.b2);
  }

  Tape tape;
  Tensor u = Tensor::zeros(Shape{2, 1, 50});
  op.adjoint_raw(batch.measured.ptr(), u.ptr(), 2);
  double level = data_term(op, u, batch.measured);
  for (auto& o : net.ops) {
    u = op_forward(o, tape, u, ctx);
    const double next = data_term(op, u, batch.measured);
    REQUIRE(next <= level * (1.0 + 1e-12));
    level = next;
  }
}

TEST_CASE("relaxed forward output length is the signal length for either operator") {
  for (auto kind : {Degradation::Blur, Degradation::BlurDownsample}) {
    const auto op = DegradationOperator::make(kind, 50);
    Rng rng(4);
    for (const SpaceSpec& space :
         {seq_space(3, all_opset(Topology::Sequential)),
          cell_space(1, 3, all_opset(Topology::Cell))}) {
      RelaxedModel model = build_relaxed(space, op, rng);
      const SignalBatch batch = make_batch(rng, op, CosineConfig{}, 2);
      LayerContext ctx;
      ctx.measurement = &batch.measured;
      ctx.op = &op;
      ctx.rng = &rng;
      Tape tape;
      Tensor out = forward_relaxed(model, tape, batch.measured, ctx);
      REQUIRE(out.shape == Shape{2, 1, 50});
    }
  }
}

TEST_CASE("shifting one site's logits leaves the relaxed output unchanged") {
  const auto op = DegradationOperator::blur(50);
  const SpaceSpec space = seq_space(3, good_opset());
  Rng rng(61);
  RelaxedModel model = build_relaxed(space, op, rng);
  const SignalBatch batch = make_batch(rng, op, CosineConfig{}, 2);
  LayerContext ctx;
  ctx.measurement = &batch.measured;
  ctx.op = &op;
  ctx.rng = &rng;

  Tape tape;
  Tensor before = forward_relaxed(model, tape, batch.measured, ctx);
  for (long i = 0; i < model.sites[1].alpha.value.numel(); ++i)
    model.sites[1].alpha.value.at(i) += 42.0;
  Tensor after = forward_relaxed(model, tape, batch.measured, ctx);
  for (long i = 0; i < before.numel(); ++i)
    REQUIRE_THAT(before.at(i), Catch::Matchers::WithinAbs(after.at(i), 1e-12));
}
