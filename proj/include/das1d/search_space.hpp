#pragma once

// Search spaces over candidate operations: a sequential chain of decision
// sites, and a cell-based DAG (edges carry operations, states aggregate by
// sum, the cell output is a bias-free 1x1 conv over the last two states).
// Both support a relaxed (softmax-mixed) model and discrete networks, with
// identical wiring so the relaxation collapses exactly.

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "das1d/candidate_ops.hpp"

namespace das1d {

enum class Topology { Sequential, Cell };

struct SpaceSpec {
  Topology topology = Topology::Sequential;
  int depth = 10;   // sequential: number of sites
  int cells = 2;    // cell topology
  int states = 5;   // states per cell (plus one input node)
  std::vector<OperationKind> opset;
  bool global_residual = true;

  int edges_per_cell() const { return (states + 1) * states / 2; }

  int site_count() const {
    return topology == Topology::Sequential ? depth : cells * edges_per_cell();
  }

  void validate() const {
    if (topology == Topology::Sequential && depth < 1)
      throw std::invalid_argument("space: depth must be >= 1");
    if (topology == Topology::Cell && (cells < 1 || states < 2))
      throw std::invalid_argument("space: cells >= 1 and states >= 2 required");
    if (opset.empty()) throw std::invalid_argument("space: opset is empty");
    for (std::size_t i = 0; i < opset.size(); ++i)
      for (std::size_t j = i + 1; j < opset.size(); ++j)
        if (opset[i] == opset[j])
          throw std::invalid_argument("space: duplicate op in opset");
    if (topology == Topology::Sequential)
      for (OperationKind k : opset)
        if (k == OperationKind::Zero)
          throw std::invalid_argument("space: Zero op is cell-topology only");
  }

  std::string summary() const {
    std::string s = topology == Topology::Sequential
                        ? "seq" + std::to_string(depth)
                        : "cell" + std::to_string(cells) + "x" +
                              std::to_string(states);
    s += global_residual ? "/res" : "/nores";
    s += "/ops=";
    for (std::size_t i = 0; i < opset.size(); ++i) {
      if (i) s += "+";
      s += op_mnemonic(opset[i]);
    }
    return s;
  }
};

inline std::vector<OperationKind> good_opset() {
  return {OperationKind::LearnableGrad, OperationKind::Net};
}

inline std::vector<OperationKind> all_opset(Topology t) {
  std::vector<OperationKind> ops = {OperationKind::LearnableGrad,
                                    OperationKind::Net, OperationKind::Roll,
                                    OperationKind::Noise};
  if (t == Topology::Cell) ops.push_back(OperationKind::Zero);
  return ops;
}

struct CellEdge {
  int from = 0, to = 0;  // nodes 0..states; node 0 is the cell input
};

// All pairs (i, j) with i < j over nodes {0..states}, lexicographic; the
// position in this list is the edge's site index within its cell.
inline std::vector<CellEdge> cell_edges(int states) {
  std::vector<CellEdge> e;
  for (int i = 0; i <= states; ++i)
    for (int j = i + 1; j <= states; ++j) e.push_back({i, j});
  return e;
}

struct DiscreteArch {
  SpaceSpec space;
  std::vector<OperationKind> choices;  // one per site

  std::string to_string() const {
    std::string s =
        space.topology == Topology::Sequential ? "seq:" : "cell:";
    for (std::size_t i = 0; i < choices.size(); ++i) {
      if (i) s += ",";
      s += op_mnemonic(choices[i]);
    }
    return s;
  }
};

inline DiscreteArch parse_arch(const SpaceSpec& space, std::string_view text) {
  space.validate();
  const auto colon = text.find(':');
  if (colon == std::string_view::npos)
    throw std::invalid_argument("arch string: missing topology tag");
  const std::string_view tag = text.substr(0, colon);
  const char* want =
      space.topology == Topology::Sequential ? "seq" : "cell";
  if (tag != want)
    throw std::invalid_argument("arch string: topology tag '" +
                                std::string(tag) + "' does not match space");
  DiscreteArch arch;
  arch.space = space;
  std::string rest(text.substr(colon + 1));
  std::stringstream ss(rest);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    auto k = op_from_mnemonic(tok);
    if (!k)
      throw std::invalid_argument("arch string: unknown op '" + tok + "'");
    if (std::find(space.opset.begin(), space.opset.end(), *k) ==
        space.opset.end())
      throw std::invalid_argument("arch string: op '" + tok +
                                  "' not in the space's opset");
    arch.choices.push_back(*k);
  }
  if (static_cast<int>(arch.choices.size()) != space.site_count())
    throw std::invalid_argument(
        "arch string: expected " + std::to_string(space.site_count()) +
        " ops, got " + std::to_string(arch.choices.size()));
  return arch;
}

struct CellConv {
  Parameter w;  // [1, 2, 1], no bias so an all-Zero body stays exactly zero
};

struct RelaxedModel {
  SpaceSpec space;
  struct Site {
    std::vector<OpInstance> candidates;  // one per opset entry, same order
    Parameter alpha;                     // logits, one per candidate
  };
  std::vector<Site> sites;
  std::vector<CellConv> cell_convs;  // one per cell (cell topology)

  std::vector<Parameter*> theta_parameters() {
    std::vector<Parameter*> out;
    for (auto& s : sites)
      for (auto& c : s.candidates)
        for (Parameter* p : c.parameters()) out.push_back(p);
    for (auto& cc : cell_convs) out.push_back(&cc.w);
    return out;
  }

  std::vector<Parameter*> alpha_parameters() {
    std::vector<Parameter*> out;
    for (auto& s : sites) out.push_back(&s.alpha);
    return out;
  }

  void freeze_theta() {
    for (Parameter* p : theta_parameters()) p->frozen = true;
  }

  // Softmax of each site's current logits.
  std::vector<std::vector<double>> site_betas() const {
    std::vector<std::vector<double>> out;
    for (const auto& s : sites) {
      const auto& a = *s.alpha.value.data;
      double mx = a[0];
      for (double v : a) mx = std::max(mx, v);
      std::vector<double> b(a.size());
      double z = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        b[i] = std::exp(a[i] - mx);
        z += b[i];
      }
      for (double& v : b) v /= z;
      out.push_back(std::move(b));
    }
    return out;
  }
};

struct DiscreteNet {
  DiscreteArch arch;
  std::vector<OpInstance> ops;  // one per site
  std::vector<CellConv> cell_convs;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& o : ops)
      for (Parameter* p : o.parameters()) out.push_back(p);
    for (auto& cc : cell_convs) out.push_back(&cc.w);
    return out;
  }
};

namespace detail {

inline Parameter init_alpha(Rng& rng, int count) {
  Tensor a = Tensor::zeros(Shape{static_cast<long>(count)});
  for (long i = 0; i < a.numel(); ++i) a.at(i) = 1e-3 * rng.normal();
  return Parameter(std::move(a));
}

inline Parameter init_cell_conv(Rng& rng) { return init_conv_weight(rng, 1, 2, 1); }

// Shared wiring. `site(index, input)` evaluates the operation(s) at a site.
template <class SiteFn>
Tensor forward_space(const SpaceSpec& space, Tape& tape,
                     const Tensor& measured, LayerContext& ctx,
                     std::vector<CellConv>& cell_convs, SiteFn&& site) {
  const Tensor u0 = ctx.op->adjoint(tape, measured);
  Tensor body;
  if (space.topology == Topology::Sequential) {
    Tensor u = u0;
    for (int s = 0; s < space.depth; ++s) u = site(s, u);
    body = u;
  } else {
    if (static_cast<int>(cell_convs.size()) != space.cells)
      throw std::invalid_argument("forward: cell conv count mismatch");
    const auto edges = cell_edges(space.states);
    const int E = static_cast<int>(edges.size());
    const Tensor zero_bias = Tensor::zeros(Shape{1});
    Tensor cell_in = u0;
    for (int c = 0; c < space.cells; ++c) {
      std::vector<Tensor> node(static_cast<std::size_t>(space.states) + 1);
      node[0] = cell_in;
      for (int j = 1; j <= space.states; ++j) {
        Tensor acc;
        for (int e = 0; e < E; ++e) {
          if (edges[static_cast<std::size_t>(e)].to != j) continue;
          const int i = edges[static_cast<std::size_t>(e)].from;
          Tensor t = site(c * E + e, node[static_cast<std::size_t>(i)]);
          acc = acc.data ? add(tape, acc, t) : t;
        }
        node[static_cast<std::size_t>(j)] = acc;
      }
      Tensor cat = concat_channels(tape, node[static_cast<std::size_t>(space.states) - 1],
                                   node[static_cast<std::size_t>(space.states)]);
      Tensor w = maybe_watch(tape, cell_convs[static_cast<std::size_t>(c)].w,
                             ctx.track_theta);
      cell_in = conv1d(tape, cat, w, zero_bias);
    }
    body = cell_in;
  }
  return space.global_residual ? add(tape, u0, body) : body;
}

}  // namespace detail

inline RelaxedModel build_relaxed(const SpaceSpec& space,
                                  const DegradationOperator& op, Rng& rng) {
  space.validate();
  RelaxedModel model;
  model.space = space;
  const int sites = space.site_count();
  model.sites.reserve(static_cast<std::size_t>(sites));
  for (int s = 0; s < sites; ++s) {
    RelaxedModel::Site site;
    for (OperationKind k : space.opset)
      site.candidates.push_back(op_init(k, rng, op));
    site.alpha =
        detail::init_alpha(rng, static_cast<int>(space.opset.size()));
    model.sites.push_back(std::move(site));
  }
  if (space.topology == Topology::Cell)
    for (int c = 0; c < space.cells; ++c)
      model.cell_convs.push_back({detail::init_cell_conv(rng)});
  return model;
}

// track_alpha=false treats the logits as constants (used for theta updates).
inline Tensor forward_relaxed(RelaxedModel& model, Tape& tape,
                              const Tensor& measured, LayerContext& ctx,
                              bool track_alpha = true) {
  return detail::forward_space(
      model.space, tape, measured, ctx, model.cell_convs,
      [&](int s, const Tensor& u) {
        auto& site = model.sites[static_cast<std::size_t>(s)];
        Tensor alphas = track_alpha
                            ? tape.watch(site.alpha)
                            : Tensor(site.alpha.value.shape,
                                     site.alpha.value.data);
        return mixed_forward(tape, alphas, site.candidates, u, ctx);
      });
}

inline Tensor forward_discrete(DiscreteNet& net, Tape& tape,
                               const Tensor& measured, LayerContext& ctx) {
  return detail::forward_space(
      net.arch.space, tape, measured, ctx, net.cell_convs,
      [&](int s, const Tensor& u) {
        return op_forward(net.ops[static_cast<std::size_t>(s)], tape, u, ctx);
      });
}

// Argmax per site; ties resolve to the lowest candidate index.
inline DiscreteArch discretize(const RelaxedModel& model) {
  DiscreteArch arch;
  arch.space = model.space;
  for (const auto& s : model.sites) {
    const auto& a = *s.alpha.value.data;
    std::size_t best = 0;
    for (std::size_t i = 1; i < a.size(); ++i)
      if (a[i] > a[best]) best = i;
    arch.choices.push_back(model.space.opset[best]);
  }
  return arch;
}

inline DiscreteNet build_discrete(const DiscreteArch& arch,
                                  const DegradationOperator& op, Rng& rng) {
  arch.space.validate();
  if (static_cast<int>(arch.choices.size()) != arch.space.site_count())
    throw std::invalid_argument("build_discrete: choice count mismatch");
  DiscreteNet net;
  net.arch = arch;
  for (OperationKind k : arch.choices) net.ops.push_back(op_init(k, rng, op));
  if (arch.space.topology == Topology::Cell)
    for (int c = 0; c < arch.space.cells; ++c)
      net.cell_convs.push_back({detail::init_cell_conv(rng)});
  return net;
}

// Discrete network that shares nothing with, but copies its weights from,
// the relaxed model's chosen candidates.
inline DiscreteNet extract_discrete(const RelaxedModel& model,
                                    const DiscreteArch& arch) {
  if (static_cast<int>(arch.choices.size()) !=
      static_cast<int>(model.sites.size()))
    throw std::invalid_argument("extract_discrete: site count mismatch");
  DiscreteNet net;
  net.arch = arch;
  for (std::size_t s = 0; s < model.sites.size(); ++s) {
    const auto& opset = model.space.opset;
    const auto it = std::find(opset.begin(), opset.end(), arch.choices[s]);
    if (it == opset.end())
      throw std::invalid_argument("extract_discrete: choice not in opset");
    const auto idx = static_cast<std::size_t>(it - opset.begin());
    net.ops.push_back(model.sites[s].candidates[idx].clone());
  }
  for (const auto& cc : model.cell_convs)
    net.cell_convs.push_back({cc.w.clone()});
  return net;
}

inline DiscreteArch random_arch(const SpaceSpec& space, Rng& rng) {
  space.validate();
  DiscreteArch arch;
  arch.space = space;
  const int sites = space.site_count();
  for (int s = 0; s < sites; ++s)
    arch.choices.push_back(
        space.opset[static_cast<std::size_t>(rng.uniform_int(
            static_cast<int>(space.opset.size())))]);
  return arch;
}

// All |opset|^sites architectures, counting order (last site fastest).
inline std::vector<DiscreteArch> enumerate_archs(const SpaceSpec& space) {
  space.validate();
  const int sites = space.site_count();
  const std::size_t k = space.opset.size();
  double total = 1.0;
  for (int s = 0; s < sites; ++s) {
    total *= static_cast<double>(k);
    if (total > 1e5)
      throw std::invalid_argument("enumerate_archs: space too large");
  }
  std::vector<DiscreteArch> out;
  std::vector<std::size_t> idx(static_cast<std::size_t>(sites), 0);
  while (true) {
    DiscreteArch a;
    a.space = space;
    for (std::size_t i : idx) a.choices.push_back(space.opset[i]);
    out.push_back(std::move(a));
    int pos = sites - 1;
    while (pos >= 0 && ++idx[static_cast<std::size_t>(pos)] == k) {
      idx[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  return out;
}

}  // namespace das1d
