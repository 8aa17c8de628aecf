#include "tp/apps.hpp"

#include <cmath>
#include <stdexcept>

#include "tp/expr.hpp"
#include "tp/nonlin.hpp"
#include "tp/rng.hpp"

namespace tp {

namespace {

double broadcast(const std::vector<double>& v, int idx1, double dflt) {
  if (v.empty()) return dflt;
  if (v.size() == 1) return v[0];
  return v.at(static_cast<size_t>(idx1 - 1));
}

// Layer index l runs 1..L+1 for sigma_w (readout last), 1..L for the rest.
double sw(const ArchSpec& a, int l) { return broadcast(a.sigma_w, l, 1.0); }
double sb(const ArchSpec& a, int l) { return broadcast(a.sigma_b, l, 0.0); }
double sv(const ArchSpec& a, int l) { return broadcast(a.sigma_v, l, 1.0); }
double sa(const ArchSpec& a, int l) { return broadcast(a.sigma_a, l, 0.0); }
double lscale(const ArchSpec& a, int l) {
  return broadcast(a.layer_scale, l, 1.0);
}

std::string layer_label(int l) { return "layer" + std::to_string(l); }

Eigen::MatrixXd input_gram(const std::vector<Eigen::VectorXd>& xs) {
  if (xs.empty()) throw std::invalid_argument("at least one input required");
  const Eigen::Index n0 = xs.front().size();
  const int b = static_cast<int>(xs.size());
  Eigen::MatrixXd g(b, b);
  for (int i = 0; i < b; ++i) {
    if (xs[static_cast<size_t>(i)].size() != n0)
      throw std::invalid_argument("inputs must share a dimension");
    for (int j = 0; j < b; ++j)
      g(i, j) = xs[static_cast<size_t>(i)].dot(xs[static_cast<size_t>(j)]) /
                static_cast<double>(n0);
  }
  return g;
}

std::function<double(double)> act_fn(const Registry& reg,
                                     const std::string& name) {
  const Nonlinearity& fn = reg.at(name);
  if (fn.arity != 1)
    throw std::invalid_argument("activation '" + name + "' is not unary");
  return [&fn](double x) { return fn.forward({&x, 1}, {}); };
}

std::function<double(double)> act_deriv(const Registry& reg,
                                        const std::string& name) {
  const Nonlinearity& fn = reg.at(name);
  if (!fn.has_partial(0))
    throw MissingDerivative("activation '" + name + "'");
  return [&fn](double x) { return fn.partial(0, {&x, 1}, {}); };
}

void finish(BuiltProgram& bp) {
  auto diags = validate(bp.sk, bp.lam);
  if (!diags.empty())
    throw std::logic_error("builder produced invalid program: " +
                           diags.front().message);
  bp.cdc = compute_cdc(bp.sk, bp.lam);
}

BuiltProgram build_mlp(const ArchSpec& a, bool backward) {
  const int L = a.depth;
  if (L < 1) throw std::invalid_argument("depth must be at least 1");
  const int B = static_cast<int>(a.inputs.size());
  Eigen::MatrixXd gram = input_gram(a.inputs);

  BuiltProgram bp;
  Skeleton& sk = bp.sk;
  SamplingSpec& spec = bp.spec;
  for (int l = 1; l <= L; ++l) spec.scale[layer_label(l)] = lscale(a, l);

  // Layer 1: the products W^1 x_a are input G-vars (input dim stays finite).
  std::vector<int> emb(static_cast<size_t>(B));
  for (int i = 0; i < B; ++i)
    emb[static_cast<size_t>(i)] =
        sk.add("w1x" + std::to_string(i), VecInLine{layer_label(1)});
  for (int i = 0; i < B; ++i)
    for (int j = i; j < B; ++j)
      spec.set_cov(emb[static_cast<size_t>(i)], emb[static_cast<size_t>(j)],
                   sw(a, 1) * sw(a, 1) * gram(i, j));
  int bias = sk.add("b1", VecInLine{layer_label(1)});
  spec.set_cov(bias, bias, sb(a, 1) * sb(a, 1));

  std::vector<int> prev_act(static_cast<size_t>(B));
  std::vector<int> mats(static_cast<size_t>(L) + 1, 0);
  for (int i = 0; i < B; ++i) {
    int pre = sk.add("h1_" + std::to_string(i),
                     LinCombLine{{{1.0, emb[static_cast<size_t>(i)]},
                                  {1.0, bias}}});
    int act = sk.add("x1_" + std::to_string(i),
                     NonlinLine{{a.activation, {}, -1}, {pre}});
    bp.preact[{1, i}] = pre;
    bp.act[{1, i}] = act;
    prev_act[static_cast<size_t>(i)] = act;
  }

  for (int l = 2; l <= L; ++l) {
    int w = sk.add("w" + std::to_string(l),
                   MatInLine{layer_label(l), layer_label(l - 1)});
    spec.sigma[w] = sw(a, l);
    mats[static_cast<size_t>(l)] = w;
    int bl = sk.add("b" + std::to_string(l), VecInLine{layer_label(l)});
    spec.set_cov(bl, bl, sb(a, l) * sb(a, l));
    for (int i = 0; i < B; ++i) {
      int prod = sk.add("w" + std::to_string(l) + "x" + std::to_string(i),
                        MatMulLine{w, prev_act[static_cast<size_t>(i)]});
      int pre = sk.add("h" + std::to_string(l) + "_" + std::to_string(i),
                       LinCombLine{{{1.0, prod}, {1.0, bl}}});
      int act = sk.add("x" + std::to_string(l) + "_" + std::to_string(i),
                       NonlinLine{{a.activation, {}, -1}, {pre}});
      bp.preact[{l, i}] = pre;
      bp.act[{l, i}] = act;
      prev_act[static_cast<size_t>(i)] = act;
    }
  }
  bp.fwd_size = sk.size();

  if (backward) {
    // Readout gradient: grad_{x^L} f = w, one shared vector for every input.
    const std::string bp_name = a.activation + "_bp";
    int gl = sk.add("gout", VecInLine{layer_label(L)});
    spec.set_cov(gl, gl, sw(a, L + 1) * sw(a, L + 1));
    std::vector<int> g_act(static_cast<size_t>(B), gl);
    for (int i = 0; i < B; ++i) bp.grad_act[{L, i}] = gl;
    for (int l = L; l >= 1; --l) {
      std::vector<int> g_pre(static_cast<size_t>(B));
      for (int i = 0; i < B; ++i) {
        g_pre[static_cast<size_t>(i)] =
            sk.add("dh" + std::to_string(l) + "_" + std::to_string(i),
                   NonlinLine{{bp_name, {}, -1},
                              {bp.preact[{l, i}],
                               g_act[static_cast<size_t>(i)]}});
        bp.grad_pre[{l, i}] = g_pre[static_cast<size_t>(i)];
      }
      if (l == 1) break;
      int wt = sk.add("w" + std::to_string(l) + "t",
                      TransposeLine{mats[static_cast<size_t>(l)]});
      for (int i = 0; i < B; ++i) {
        g_act[static_cast<size_t>(i)] =
            sk.add("dx" + std::to_string(l - 1) + "_" + std::to_string(i),
                   MatMulLine{wt, g_pre[static_cast<size_t>(i)]});
        bp.grad_act[{l - 1, i}] = g_act[static_cast<size_t>(i)];
      }
    }
  }
  finish(bp);
  return bp;
}

BuiltProgram build_resnet(const ArchSpec& a) {
  const int L = a.depth;
  if (L < 1) throw std::invalid_argument("depth must be at least 1");
  const int B = static_cast<int>(a.inputs.size());
  Eigen::MatrixXd gram = input_gram(a.inputs);

  BuiltProgram bp;
  Skeleton& sk = bp.sk;
  SamplingSpec& spec = bp.spec;
  spec.scale["res"] = 1.0;

  // Embedding W^1 x_a: the skip path starts after the first weight layer.
  std::vector<int> skip(static_cast<size_t>(B));
  for (int i = 0; i < B; ++i)
    skip[static_cast<size_t>(i)] =
        sk.add("w1x" + std::to_string(i), VecInLine{std::string("res")});
  for (int i = 0; i < B; ++i)
    for (int j = i; j < B; ++j)
      spec.set_cov(skip[static_cast<size_t>(i)], skip[static_cast<size_t>(j)],
                   sw(a, 1) * sw(a, 1) * gram(i, j));

  for (int l = 1; l <= L; ++l) {
    int bl = sk.add("b" + std::to_string(l), VecInLine{std::string("res")});
    spec.set_cov(bl, bl, sb(a, l) * sb(a, l));
    int al = sk.add("a" + std::to_string(l), VecInLine{std::string("res")});
    spec.set_cov(al, al, sa(a, l) * sa(a, l));
    int wl = 0;
    if (l > 1) {
      wl = sk.add("w" + std::to_string(l), MatInLine{"res", "res"});
      spec.sigma[wl] = sw(a, l);
    }
    int vl = sk.add("v" + std::to_string(l), MatInLine{"res", "res"});
    spec.sigma[vl] = sv(a, l);
    for (int i = 0; i < B; ++i) {
      int drive = skip[static_cast<size_t>(i)];
      if (l > 1)
        drive = sk.add("w" + std::to_string(l) + "x" + std::to_string(i),
                       MatMulLine{wl, skip[static_cast<size_t>(i)]});
      int pre = sk.add("h" + std::to_string(l) + "_" + std::to_string(i),
                       LinCombLine{{{1.0, drive}, {1.0, bl}}});
      int act = sk.add("p" + std::to_string(l) + "_" + std::to_string(i),
                       NonlinLine{{a.activation, {}, -1}, {pre}});
      int res = sk.add("v" + std::to_string(l) + "p" + std::to_string(i),
                       MatMulLine{vl, act});
      int merged =
          sk.add("x" + std::to_string(l) + "_" + std::to_string(i),
                 LinCombLine{{{1.0, res},
                              {1.0, skip[static_cast<size_t>(i)]},
                              {1.0, al}}});
      bp.preact[{l, i}] = pre;
      bp.act[{l, i}] = act;
      skip[static_cast<size_t>(i)] = merged;
    }
  }
  bp.fwd_size = sk.size();
  finish(bp);
  return bp;
}

BuiltProgram build_rnn(const ArchSpec& a) {
  const int T = a.depth;
  if (T < 1) throw std::invalid_argument("depth must be at least 1");
  BuiltProgram bp;
  Skeleton& sk = bp.sk;
  SamplingSpec& spec = bp.spec;
  spec.scale["state"] = 1.0;

  int h0 = sk.add("h0", VecInLine{std::string("state")});
  spec.set_cov(h0, h0, 1.0);
  int bias = sk.add("b", VecInLine{std::string("state")});
  spec.set_cov(bias, bias, sb(a, 1) * sb(a, 1));
  int w = 0;
  if (a.rnn_tied) {
    w = sk.add("w", MatInLine{"state", "state"});
    spec.sigma[w] = sw(a, 1);
  }

  // Per-step injections U x^t are input G-vars; jointly Gaussian across
  // steps with the input gram as covariance.
  std::vector<int> inj;
  if (!a.inputs.empty()) {
    Eigen::MatrixXd gram = input_gram(a.inputs);
    const int s = static_cast<int>(a.inputs.size());
    for (int t = 0; t < s; ++t)
      inj.push_back(sk.add("u" + std::to_string(t + 1),
                           VecInLine{std::string("state")}));
    for (int i = 0; i < s; ++i)
      for (int j = i; j < s; ++j)
        spec.set_cov(inj[static_cast<size_t>(i)], inj[static_cast<size_t>(j)],
                     gram(i, j));
  }

  int state = h0;  // G-var at step 0, H-var afterwards
  for (int t = 1; t <= T; ++t) {
    int wt = w;
    if (!a.rnn_tied) {
      wt = sk.add("w" + std::to_string(t), MatInLine{"state", "state"});
      spec.sigma[wt] = sw(a, 1);
    }
    int prod = sk.add("wh" + std::to_string(t), MatMulLine{wt, state});
    std::vector<LinCombTerm> terms{{1.0, prod}, {1.0, bias}};
    if (static_cast<size_t>(t) <= inj.size())
      terms.push_back({1.0, inj[static_cast<size_t>(t) - 1]});
    int pre = sk.add("h" + std::to_string(t), LinCombLine{std::move(terms)});
    int act = sk.add("x" + std::to_string(t),
                     NonlinLine{{a.activation, {}, -1}, {pre}});
    bp.preact[{t, 0}] = pre;
    bp.act[{t, 0}] = act;
    state = act;
  }
  bp.fwd_size = sk.size();
  finish(bp);
  return bp;
}

BuiltProgram build_batchnorm(const ArchSpec& a, const Registry& reg) {
  const int L = a.depth;
  const int B = static_cast<int>(a.inputs.size());
  if (B < 2) throw std::invalid_argument("batchnorm needs a batch of >= 2");
  const std::string bn_name = "batchnorm_" + a.activation;
  if (!reg.has(bn_name))
    throw std::invalid_argument("no batchnorm variant for activation '" +
                                a.activation + "'");
  Eigen::MatrixXd gram = input_gram(a.inputs);

  BuiltProgram bp;
  Skeleton& sk = bp.sk;
  SamplingSpec& spec = bp.spec;
  for (int l = 1; l <= L; ++l) spec.scale[layer_label(l)] = lscale(a, l);

  std::vector<int> emb(static_cast<size_t>(B));
  for (int i = 0; i < B; ++i)
    emb[static_cast<size_t>(i)] =
        sk.add("w1x" + std::to_string(i), VecInLine{layer_label(1)});
  for (int i = 0; i < B; ++i)
    for (int j = i; j < B; ++j)
      spec.set_cov(emb[static_cast<size_t>(i)], emb[static_cast<size_t>(j)],
                   sw(a, 1) * sw(a, 1) * gram(i, j));

  std::vector<int> prev = emb;
  for (int l = 1; l <= L; ++l) {
    if (l > 1) {
      int w = sk.add("w" + std::to_string(l),
                     MatInLine{layer_label(l), layer_label(l - 1)});
      spec.sigma[w] = sw(a, l);
      for (int i = 0; i < B; ++i)
        prev[static_cast<size_t>(i)] =
            sk.add("w" + std::to_string(l) + "x" + std::to_string(i),
                   MatMulLine{w, prev[static_cast<size_t>(i)]});
    }
    int bl = sk.add("b" + std::to_string(l), VecInLine{layer_label(l)});
    spec.set_cov(bl, bl, sb(a, l) * sb(a, l));
    std::vector<int> pre(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) {
      pre[static_cast<size_t>(i)] =
          sk.add("h" + std::to_string(l) + "_" + std::to_string(i),
                 LinCombLine{{{1.0, prev[static_cast<size_t>(i)]},
                              {1.0, bl}}});
      bp.preact[{l, i}] = pre[static_cast<size_t>(i)];
    }
    for (int i = 0; i < B; ++i) {
      int act = sk.add(
          "x" + std::to_string(l) + "_" + std::to_string(i),
          NonlinLine{{bn_name, {static_cast<double>(i)}, -1}, pre});
      bp.act[{l, i}] = act;
      prev[static_cast<size_t>(i)] = act;
    }
  }
  bp.fwd_size = sk.size();
  finish(bp);
  return bp;
}

BuiltProgram build_cnn(const ArchSpec& a) {
  const int L = a.depth;
  const int P = a.pixels;
  if (P < 2) throw std::invalid_argument("at least two pixels required");
  if (static_cast<int>(a.inputs.size()) != P)
    throw std::invalid_argument("cnn takes one input vector per pixel");
  Eigen::MatrixXd gram = input_gram(a.inputs);

  BuiltProgram bp;
  Skeleton& sk = bp.sk;
  SamplingSpec& spec = bp.spec;
  for (int l = 1; l <= L; ++l) spec.scale["chan" + std::to_string(l)] = lscale(a, l);

  // Layer 1: per kernel tap k and pixel p, W^1_k x_p is an input G-var;
  // taps are independent, pixels correlate through the input gram.
  std::vector<std::vector<int>> emb(2, std::vector<int>(static_cast<size_t>(P)));
  for (int k = 0; k < 2; ++k)
    for (int p = 0; p < P; ++p)
      emb[static_cast<size_t>(k)][static_cast<size_t>(p)] =
          sk.add("w1k" + std::to_string(k) + "x" + std::to_string(p),
                 VecInLine{std::string("chan1")});
  for (int k = 0; k < 2; ++k)
    for (int p = 0; p < P; ++p)
      for (int q = p; q < P; ++q)
        spec.set_cov(emb[static_cast<size_t>(k)][static_cast<size_t>(p)],
                     emb[static_cast<size_t>(k)][static_cast<size_t>(q)],
                     sw(a, 1) * sw(a, 1) * gram(p, q));

  std::vector<int> prev(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) {
    int pre = sk.add("h1_" + std::to_string(p),
                     LinCombLine{{{1.0, emb[0][static_cast<size_t>(p)]},
                                  {1.0, emb[1][static_cast<size_t>((p + 1) % P)]}}});
    int act = sk.add("x1_" + std::to_string(p),
                     NonlinLine{{a.activation, {}, -1}, {pre}});
    bp.preact[{1, p}] = pre;
    bp.act[{1, p}] = act;
    prev[static_cast<size_t>(p)] = act;
  }

  for (int l = 2; l <= L; ++l) {
    int w0 = sk.add("w" + std::to_string(l) + "k0",
                    MatInLine{"chan" + std::to_string(l),
                              "chan" + std::to_string(l - 1)});
    int w1 = sk.add("w" + std::to_string(l) + "k1",
                    MatInLine{"chan" + std::to_string(l),
                              "chan" + std::to_string(l - 1)});
    spec.sigma[w0] = sw(a, l);
    spec.sigma[w1] = sw(a, l);
    std::vector<int> cur(static_cast<size_t>(P));
    for (int p = 0; p < P; ++p) {
      int t0 = sk.add("w" + std::to_string(l) + "k0x" + std::to_string(p),
                      MatMulLine{w0, prev[static_cast<size_t>(p)]});
      int t1 = sk.add("w" + std::to_string(l) + "k1x" + std::to_string(p),
                      MatMulLine{w1, prev[static_cast<size_t>((p + 1) % P)]});
      int pre = sk.add("h" + std::to_string(l) + "_" + std::to_string(p),
                       LinCombLine{{{1.0, t0}, {1.0, t1}}});
      int act = sk.add("x" + std::to_string(l) + "_" + std::to_string(p),
                       NonlinLine{{a.activation, {}, -1}, {pre}});
      bp.preact[{l, p}] = pre;
      bp.act[{l, p}] = act;
      cur[static_cast<size_t>(p)] = act;
    }
    prev = cur;
  }
  bp.fwd_size = sk.size();
  finish(bp);
  return bp;
}

}  // namespace

BuiltProgram build_program(const ArchSpec& a) {
  switch (a.variant) {
    case Arch::Mlp:
      return build_mlp(a, false);
    case Arch::MlpBackward:
      return build_mlp(a, true);
    case Arch::Resnet:
      return build_resnet(a);
    case Arch::SimpleRnn:
      return build_rnn(a);
    case Arch::BatchnormForward:
      return build_batchnorm(a, Registry::standard());
    case Arch::Cnn1dCircular:
      return build_cnn(a);
  }
  throw std::invalid_argument("unsupported variant");
}

std::vector<Eigen::MatrixXd> mlp_sigma(const ArchSpec& a,
                                       ExpectationMethod method,
                                       const Registry& reg) {
  const int L = a.depth;
  auto phi = act_fn(reg, a.activation);
  Eigen::MatrixXd gram = input_gram(a.inputs);
  std::vector<Eigen::MatrixXd> out;
  out.reserve(static_cast<size_t>(L) + 1);
  Eigen::MatrixXd s = sw(a, 1) * sw(a, 1) * gram;
  s.array() += sb(a, 1) * sb(a, 1);
  out.push_back(s);
  for (int l = 2; l <= L; ++l) {
    s = sw(a, l) * sw(a, l) * v_op(phi, out.back(), method);
    s.array() += sb(a, l) * sb(a, l);
    out.push_back(s);
  }
  out.push_back(sw(a, L + 1) * sw(a, L + 1) * v_op(phi, out.back(), method));
  return out;
}

SignalProp signal_prop(const ArchSpec& a, bool want_pi,
                       ExpectationMethod method, const Registry& reg) {
  SignalProp sp;
  auto phi = act_fn(reg, a.activation);
  const int L = a.depth;

  switch (a.variant) {
    case Arch::Mlp:
    case Arch::MlpBackward: {
      sp.sigma = mlp_sigma(a, method, reg);
      if (!want_pi) break;
      auto dphi = act_deriv(reg, a.activation);
      const int b = static_cast<int>(a.inputs.size());
      std::vector<Eigen::MatrixXd> pi(static_cast<size_t>(L));
      pi[static_cast<size_t>(L) - 1] = Eigen::MatrixXd::Constant(
          b, b, sw(a, L + 1) * sw(a, L + 1));
      for (int l = L - 1; l >= 1; --l) {
        const double ratio = lscale(a, l + 1) / lscale(a, l);
        pi[static_cast<size_t>(l) - 1] =
            ratio * sw(a, l + 1) * sw(a, l + 1) *
            v_op(dphi, sp.sigma[static_cast<size_t>(l)], method).cwiseProduct(
                pi[static_cast<size_t>(l)]);
      }
      sp.pi = std::move(pi);
      break;
    }
    case Arch::Resnet: {
      Eigen::MatrixXd skip = input_gram(a.inputs);
      sp.sigma_skip.push_back(skip);
      for (int l = 1; l <= L; ++l) {
        Eigen::MatrixXd s = sw(a, l) * sw(a, l) * skip;
        s.array() += sb(a, l) * sb(a, l);
        sp.sigma.push_back(s);
        skip += sv(a, l) * sv(a, l) * v_op(phi, s, method);
        skip.array() += sa(a, l) * sa(a, l);
        sp.sigma_skip.push_back(skip);
      }
      sp.sigma.push_back(sw(a, L + 1) * sw(a, L + 1) * skip);
      break;
    }
    case Arch::BatchnormForward: {
      if (want_pi)
        throw std::invalid_argument(
            "backward propagation through batchnorm is not available: its "
            "Jacobian is singular at the origin");
      const int b = static_cast<int>(a.inputs.size());
      auto bnorm = [&phi, b](const Eigen::VectorXd& z) {
        Eigen::VectorXd out(z.size());
        const double m = z.mean();
        double ss = (z.array() - m).square().sum();
        const double s = std::sqrt(ss / b);
        for (Eigen::Index i = 0; i < z.size(); ++i)
          out(i) = s == 0.0 ? phi(0.0) : phi((z(i) - m) / s);
        return out;
      };
      Eigen::MatrixXd s = sw(a, 1) * sw(a, 1) * input_gram(a.inputs);
      s.array() += sb(a, 1) * sb(a, 1);
      sp.sigma.push_back(s);
      for (int l = 2; l <= L; ++l) {
        s = sw(a, l) * sw(a, l) * v_op_vector(bnorm, sp.sigma.back(), method);
        s.array() += sb(a, l) * sb(a, l);
        sp.sigma.push_back(s);
      }
      sp.sigma.push_back(sw(a, L + 1) * sw(a, L + 1) *
                         v_op_vector(bnorm, sp.sigma.back(), method));
      break;
    }
    case Arch::Cnn1dCircular: {
      const int P = a.pixels;
      Eigen::MatrixXd gram = input_gram(a.inputs);
      auto shifted = [P](const Eigen::MatrixXd& m, int k) {
        Eigen::MatrixXd out(P, P);
        for (int p = 0; p < P; ++p)
          for (int q = 0; q < P; ++q)
            out(p, q) = m(((p + k) % P + P) % P, ((q + k) % P + P) % P);
        return out;
      };
      Eigen::MatrixXd s =
          sw(a, 1) * sw(a, 1) * (shifted(gram, 0) + shifted(gram, 1));
      sp.sigma.push_back(s);
      for (int l = 2; l <= L; ++l) {
        Eigen::MatrixXd v = v_op(phi, sp.sigma.back(), method);
        sp.sigma.push_back(sw(a, l) * sw(a, l) *
                           (shifted(v, 0) + shifted(v, 1)));
      }
      if (want_pi && L >= 2) {
        auto dphi = act_deriv(reg, a.activation);
        std::vector<Eigen::MatrixXd> pi(static_cast<size_t>(L) - 1);
        pi[static_cast<size_t>(L) - 2] =
            Eigen::MatrixXd::Identity(P, P) / static_cast<double>(P);
        for (int l = L - 2; l >= 1; --l) {
          Eigen::MatrixXd core =
              v_op(dphi, sp.sigma[static_cast<size_t>(l)], method)
                  .cwiseProduct(pi[static_cast<size_t>(l)]);
          pi[static_cast<size_t>(l) - 1] =
              sw(a, l + 1) * sw(a, l + 1) *
              (shifted(core, -1) + shifted(core, 0));
        }
        sp.pi = std::move(pi);
      }
      break;
    }
    default:
      throw std::invalid_argument("signal propagation unsupported for variant");
  }
  return sp;
}

Eigen::MatrixXd mlp_ntk(const ArchSpec& a, ExpectationMethod method,
                        const Registry& reg) {
  const int L = a.depth;
  auto dphi = act_deriv(reg, a.activation);
  SignalProp sp = signal_prop(a, true, method, reg);
  Eigen::MatrixXd k = sp.sigma.back() / (sw(a, L + 1) * sw(a, L + 1));
  for (int l = 1; l <= L; ++l) {
    const double swl2 = sw(a, l) * sw(a, l);
    const double sbl2 = sb(a, l) * sb(a, l);
    const double ratio = lscale(a, l) / lscale(a, L);
    Eigen::MatrixXd term =
        sp.pi[static_cast<size_t>(l) - 1]
            .cwiseProduct(v_op(dphi, sp.sigma[static_cast<size_t>(l) - 1],
                               method))
            .cwiseProduct(
                (sp.sigma[static_cast<size_t>(l) - 1].array() + swl2 - sbl2)
                    .matrix() /
                swl2);
    k += ratio * term;
  }
  return (k + Eigen::MatrixXd(k.transpose())) / 2.0;
}

Eigen::MatrixXd mlp_ntk_gmp(const ArchSpec& a, ExpectationMethod method,
                            const Registry& reg) {
  const int L = a.depth;
  if (L < 2)
    throw std::invalid_argument("pooled readout needs at least two layers");
  auto phi = act_fn(reg, a.activation);
  auto dphi = act_deriv(reg, a.activation);
  const Nonlinearity& fn = reg.at(a.activation);
  std::vector<Eigen::MatrixXd> sigma = mlp_sigma(a, method, reg);
  const int b = static_cast<int>(a.inputs.size());

  // One-dimensional Gaussian moments via Stein's identity, so relu's
  // distributional second derivative needs no special casing:
  //   E phi''(y)           = E[y phi'(y)] / var
  //   E phi'(y)^2 + E phi phi''(y) = E[y phi(y) phi'(y)] / var.
  auto e1 = [&](const std::function<double(double)>& f, double var) {
    if (var <= 0) return f(0.0);
    std::vector<double> nodes, weights;
    gauss_hermite(method.points > 0 ? method.points : kQuadPointsDefault,
                  nodes, weights);
    const double sd = std::sqrt(var);
    double acc = 0;
    for (size_t i = 0; i < nodes.size(); ++i) acc += weights[i] * f(sd * nodes[i]);
    return acc;
  };

  // Mean-correction coefficients a^{l} per input, layers L-1 down to 1.
  std::vector<Eigen::VectorXd> corr(static_cast<size_t>(L));
  {
    Eigen::VectorXd c(b);
    const double pref =
        (lscale(a, L) / lscale(a, L - 1)) * sw(a, L) * sw(a, L);
    for (int i = 0; i < b; ++i) {
      const double var = sigma[static_cast<size_t>(L) - 1](i, i);
      double second;
      if (fn.second_derivative_gaussian_mean)
        second = fn.second_derivative_gaussian_mean(var, {});
      else
        second =
            var > 0 ? e1([&](double y) { return y * dphi(y); }, var) / var
                    : 0.0;
      c(i) = pref * second;
    }
    corr[static_cast<size_t>(L) - 1] = c;
  }
  for (int l = L - 2; l >= 1; --l) {
    Eigen::VectorXd c(b);
    const double pref =
        (lscale(a, l + 1) / lscale(a, l)) * sw(a, l + 1) * sw(a, l + 1);
    for (int i = 0; i < b; ++i) {
      const double var = sigma[static_cast<size_t>(l)](i, i);
      const double factor =
          var > 0
              ? e1([&](double y) { return y * phi(y) * dphi(y); }, var) / var
              : dphi(0.0) * dphi(0.0);
      c(i) = corr[static_cast<size_t>(l) + 1](i) * pref * factor;
    }
    corr[static_cast<size_t>(l)] = c;
  }

  // Backward kernels with the mean-correction outer-product terms.
  std::vector<Eigen::MatrixXd> pi(static_cast<size_t>(L));
  pi[static_cast<size_t>(L) - 1] =
      (lscale(a, L) / lscale(a, L - 1)) * sw(a, L) * sw(a, L) *
      v_op(dphi, sigma[static_cast<size_t>(L) - 1], method);
  for (int l = L - 2; l >= 1; --l) {
    const double pref =
        (lscale(a, l + 1) / lscale(a, l)) * sw(a, l + 1) * sw(a, l + 1);
    const Eigen::VectorXd& cn = corr[static_cast<size_t>(l) + 1];
    pi[static_cast<size_t>(l)] =
        pref * (pi[static_cast<size_t>(l) + 1].cwiseProduct(
                    v_op(dphi, sigma[static_cast<size_t>(l) + 1], method)) +
                (cn * cn.transpose())
                    .cwiseProduct(
                        v_op(phi, sigma[static_cast<size_t>(l) + 1], method)));
  }

  auto phidphi = [&](double y) { return phi(y) * dphi(y); };
  Eigen::MatrixXd k =
      v_op(dphi, sigma[static_cast<size_t>(L) - 1], method)
          .cwiseProduct(
              (sigma[static_cast<size_t>(L) - 1].array() +
               sw(a, L) * sw(a, L) - sb(a, L) * sb(a, L))
                  .matrix() /
              (sw(a, L) * sw(a, L)));
  for (int l = 1; l <= L - 1; ++l) {
    const double swl2 = sw(a, l) * sw(a, l);
    const double sbl2 = sb(a, l) * sb(a, l);
    const double ratio = lscale(a, l) / lscale(a, L);
    const Eigen::VectorXd& cl = corr[static_cast<size_t>(l)];
    Eigen::MatrixXd inner =
        pi[static_cast<size_t>(l)].cwiseProduct(
            v_op(dphi, sigma[static_cast<size_t>(l) - 1], method)) +
        (cl * cl.transpose())
            .cwiseProduct(
                v_op(phidphi, sigma[static_cast<size_t>(l) - 1], method));
    k += ratio *
         inner.cwiseProduct(
             (sigma[static_cast<size_t>(l) - 1].array() + swl2 - sbl2)
                 .matrix() /
             swl2);
  }
  return (k + Eigen::MatrixXd(k.transpose())) / 2.0;
}

double goe_moment(int k) {
  if (k < 0) throw std::invalid_argument("moment order must be >= 0");
  if (k % 2 != 0) return 0.0;
  // b[j][r]: coefficient of g^0-direction r in the chain at step j.
  std::vector<std::vector<unsigned long long>> b(
      static_cast<size_t>(k) + 1,
      std::vector<unsigned long long>(static_cast<size_t>(k) + 1, 0));
  b[0][0] = 1;
  for (int j = 1; j <= k; ++j) {
    b[static_cast<size_t>(j)][static_cast<size_t>(j)] = 1;
    for (int r = 0; r < j; ++r) {
      unsigned long long acc = 0;
      for (int i = r; i <= j - 2; ++i)
        acc += b[static_cast<size_t>(i)][static_cast<size_t>(r)] *
               b[static_cast<size_t>(j) - 1][static_cast<size_t>(i) + 1];
      b[static_cast<size_t>(j)][static_cast<size_t>(r)] = acc;
    }
  }
  return static_cast<double>(b[static_cast<size_t>(k)][0]);
}

double mp_moment(int k, double alpha) {
  if (k < 0 || alpha <= 0)
    throw std::invalid_argument("need k >= 0 and alpha > 0");
  if (k == 0) return 1.0;
  // Coupled coefficient tables for the alternating A^T / A chain.
  std::vector<std::vector<double>> b(
      static_cast<size_t>(k) + 1,
      std::vector<double>(static_cast<size_t>(k) + 1, 0.0));
  auto bbar = b;
  b[0][0] = 1.0;
  bbar[0][0] = 1.0;
  for (int i = 1; i <= k; ++i) {
    b[static_cast<size_t>(i)][static_cast<size_t>(i)] = 1.0;
    bbar[static_cast<size_t>(i)][static_cast<size_t>(i)] = 1.0;
    for (int j = i - 1; j >= 0; --j) {
      double acc = 0;
      for (int kk = j; kk <= i - 1; ++kk)
        acc += bbar[static_cast<size_t>(i) - 1][static_cast<size_t>(kk)] *
               b[static_cast<size_t>(kk)][static_cast<size_t>(j)];
      b[static_cast<size_t>(i)][static_cast<size_t>(j)] = acc;
      acc = 0;
      for (int kk = j + 1; kk <= i; ++kk)
        acc += b[static_cast<size_t>(i)][static_cast<size_t>(kk)] *
               bbar[static_cast<size_t>(kk) - 1][static_cast<size_t>(j)];
      bbar[static_cast<size_t>(i)][static_cast<size_t>(j)] = alpha * acc;
    }
  }
  return b[static_cast<size_t>(k)][0];
}

double mp_moment_closed(int k, double alpha) {
  if (k < 0 || alpha <= 0)
    throw std::invalid_argument("need k >= 0 and alpha > 0");
  if (k == 0) return 1.0;
  auto catalan = [](int j) {
    double c = 1.0;
    for (int i = 0; i < j; ++i)
      c = c * 2.0 * (2 * i + 1) / static_cast<double>(i + 2);
    return c;
  };
  auto binom = [](int n, int r) {
    double v = 1.0;
    for (int i = 1; i <= r; ++i)
      v = v * static_cast<double>(n - r + i) / static_cast<double>(i);
    return v;
  };
  double acc = 0;
  for (int j = 0; 2 * j <= k - 1; ++j)
    acc += std::pow(alpha, j) * std::pow(1.0 + alpha, k - 1 - 2 * j) *
           binom(k - 1, 2 * j) * catalan(j);
  return acc;
}

BuiltProgram goe_program(int k) {
  if (k < 1) throw std::invalid_argument("chain length must be >= 1");
  BuiltProgram bp;
  Skeleton& sk = bp.sk;
  SamplingSpec& spec = bp.spec;
  spec.scale["n"] = 1.0;
  int g0 = sk.add("g0", VecInLine{std::string("n")});
  spec.set_cov(g0, g0, 1.0);
  bp.preact[{0, 0}] = g0;
  int A = sk.add("A", MatInLine{"n", "n"});
  spec.sigma[A] = 1.0 / std::sqrt(2.0);
  int At = sk.add("At", TransposeLine{A});
  int prev = g0;
  for (int j = 1; j <= k; ++j) {
    int fwd = sk.add("p" + std::to_string(j), MatMulLine{A, prev});
    int bwd = sk.add("q" + std::to_string(j), MatMulLine{At, prev});
    prev = sk.add("g" + std::to_string(j),
                  LinCombLine{{{1.0, fwd}, {1.0, bwd}}});
    bp.preact[{j, 0}] = prev;
  }
  bp.fwd_size = sk.size();
  finish(bp);
  return bp;
}

BuiltProgram mp_program(int k, double alpha) {
  if (k < 1 || alpha <= 0)
    throw std::invalid_argument("need k >= 1 and alpha > 0");
  BuiltProgram bp;
  Skeleton& sk = bp.sk;
  SamplingSpec& spec = bp.spec;
  spec.scale["m"] = alpha;
  spec.scale["n"] = 1.0;
  int g0 = sk.add("g0", VecInLine{std::string("m")});
  spec.set_cov(g0, g0, 1.0);
  bp.preact[{0, 0}] = g0;
  int A = sk.add("A", MatInLine{"m", "n"});
  spec.sigma[A] = 1.0;
  int At = sk.add("At", TransposeLine{A});
  int prev = g0;
  for (int j = 1; j <= k; ++j) {
    int mid = sk.add("u" + std::to_string(j), MatMulLine{At, prev});
    prev = sk.add("g" + std::to_string(j), MatMulLine{A, mid});
    bp.preact[{j, 0}] = prev;
  }
  bp.fwd_size = sk.size();
  finish(bp);
  return bp;
}

Eigen::MatrixXd empirical_ntk(const ArchSpec& a, long width, int draws,
                              std::uint64_t seed, bool gmp,
                              const Registry& reg) {
  const int L = a.depth;
  const int B = static_cast<int>(a.inputs.size());
  if (L < 1 || B < 1 || draws < 1 || width < 1)
    throw std::invalid_argument("invalid gradient-oracle configuration");
  auto phi = act_fn(reg, a.activation);
  auto dphi = act_deriv(reg, a.activation);
  std::vector<long> n(static_cast<size_t>(L) + 1);
  n[0] = a.inputs.front().size();
  for (int l = 1; l <= L; ++l)
    n[static_cast<size_t>(l)] = std::max<long>(
        1, std::lround(static_cast<double>(width) * lscale(a, l)));

  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(B, B);
#ifdef TP_HAVE_OPENMP
#pragma omp parallel
#endif
  {
    Eigen::MatrixXd local = Eigen::MatrixXd::Zero(B, B);
#ifdef TP_HAVE_OPENMP
#pragma omp for schedule(dynamic)
#endif
    for (int d = 0; d < draws; ++d) {
      NormalStream rs(mix(seed, static_cast<std::uint64_t>(d)));
      std::vector<Eigen::MatrixXd> W(static_cast<size_t>(L) + 1);
      std::vector<Eigen::VectorXd> bias(static_cast<size_t>(L) + 1);
      for (int l = 1; l <= L; ++l) {
        W[static_cast<size_t>(l)].resize(n[static_cast<size_t>(l)],
                                         n[static_cast<size_t>(l) - 1]);
        for (long i = 0; i < n[static_cast<size_t>(l)]; ++i)
          for (long j = 0; j < n[static_cast<size_t>(l) - 1]; ++j)
            W[static_cast<size_t>(l)](i, j) = sw(a, l) * rs.next();
        bias[static_cast<size_t>(l)].resize(n[static_cast<size_t>(l)]);
        for (long i = 0; i < n[static_cast<size_t>(l)]; ++i)
          bias[static_cast<size_t>(l)](i) = sb(a, l) * rs.next();
      }
      Eigen::VectorXd readout(n[static_cast<size_t>(L)]);
      for (long i = 0; i < n[static_cast<size_t>(L)]; ++i)
        readout(i) = gmp ? 1.0 : sw(a, L + 1) * rs.next();

      std::vector<std::vector<Eigen::VectorXd>> h(
          static_cast<size_t>(B)),
          x(static_cast<size_t>(B)), dh(static_cast<size_t>(B));
      for (int i = 0; i < B; ++i) {
        auto& hi = h[static_cast<size_t>(i)];
        auto& xi = x[static_cast<size_t>(i)];
        auto& di = dh[static_cast<size_t>(i)];
        hi.resize(static_cast<size_t>(L) + 1);
        xi.resize(static_cast<size_t>(L) + 1);
        di.resize(static_cast<size_t>(L) + 1);
        xi[0] = a.inputs[static_cast<size_t>(i)];
        for (int l = 1; l <= L; ++l) {
          hi[static_cast<size_t>(l)] =
              W[static_cast<size_t>(l)] * xi[static_cast<size_t>(l) - 1] /
                  std::sqrt(static_cast<double>(n[static_cast<size_t>(l) - 1])) +
              bias[static_cast<size_t>(l)];
          xi[static_cast<size_t>(l)] =
              hi[static_cast<size_t>(l)].unaryExpr(phi);
        }
        // Readout gradient with respect to x^L, then backward.
        Eigen::VectorXd dx;
        if (gmp)
          dx = Eigen::VectorXd::Constant(
              n[static_cast<size_t>(L)],
              1.0 / static_cast<double>(n[static_cast<size_t>(L)]));
        else
          dx = readout /
               std::sqrt(static_cast<double>(n[static_cast<size_t>(L)]));
        for (int l = L; l >= 1; --l) {
          di[static_cast<size_t>(l)] =
              hi[static_cast<size_t>(l)].unaryExpr(dphi).cwiseProduct(dx);
          if (l > 1)
            dx = W[static_cast<size_t>(l)].transpose() *
                 di[static_cast<size_t>(l)] /
                 std::sqrt(static_cast<double>(n[static_cast<size_t>(l) - 1]));
        }
      }
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < B; ++j) {
          double k = 0;
          for (int l = 1; l <= L; ++l) {
            const double grad_dot =
                dh[static_cast<size_t>(i)][static_cast<size_t>(l)].dot(
                    dh[static_cast<size_t>(j)][static_cast<size_t>(l)]);
            const double act_dot =
                x[static_cast<size_t>(i)][static_cast<size_t>(l) - 1].dot(
                    x[static_cast<size_t>(j)][static_cast<size_t>(l) - 1]) /
                static_cast<double>(n[static_cast<size_t>(l) - 1]);
            k += grad_dot * (act_dot + 1.0);  // weight + bias gradients
          }
          if (!gmp)
            k += x[static_cast<size_t>(i)][static_cast<size_t>(L)].dot(
                     x[static_cast<size_t>(j)][static_cast<size_t>(L)]) /
                 static_cast<double>(n[static_cast<size_t>(L)]);
          if (gmp) k *= static_cast<double>(n[static_cast<size_t>(L)]);
          local(i, j) += k;
        }
    }
#ifdef TP_HAVE_OPENMP
#pragma omp critical
#endif
    acc += local;
  }
  return acc / static_cast<double>(draws);
}

namespace {

double se_expect_sq(const NonlinRef& fn, double var1, double var2,
                    ExpectationMethod method, const Registry& reg) {
  GaussianSpec gs;
  gs.labels = {1, 2};
  gs.mean = Eigen::VectorXd::Zero(2);
  gs.cov = Eigen::MatrixXd::Zero(2, 2);
  gs.cov(0, 0) = var1;
  gs.cov(1, 1) = var2;
  ExprPtr inner = make_apply(fn, {make_leaf(1), make_leaf(2)});
  ExprPtr sq = make_apply({"mul", {}, -1}, {inner, inner});
  if (method.kind == ExpectationMethod::Kind::Auto)
    method = ExpectationMethod::quad(method.points);
  return expect_scalar(sq, gs, method, reg);
}

}  // namespace

AmpStateEvolution amp_state_evolution(const AmpConfig& cfg,
                                      ExpectationMethod method,
                                      const Registry& reg) {
  if (cfg.delta <= 0 || cfg.steps < 1)
    throw std::invalid_argument("need delta > 0 and steps >= 1");
  AmpStateEvolution se;
  double sigma_sq = se_expect_sq(cfg.f, 0.0, cfg.sigma_x0 * cfg.sigma_x0,
                                 method, reg) /
                    cfg.delta;
  for (int t = 0; t < cfg.steps; ++t) {
    se.sigma_sq.push_back(sigma_sq);
    double tau_sq =
        se_expect_sq(cfg.g, sigma_sq, cfg.sigma_w * cfg.sigma_w, method, reg);
    se.tau_sq.push_back(tau_sq);
    sigma_sq = se_expect_sq(cfg.f, tau_sq, cfg.sigma_x0 * cfg.sigma_x0,
                            method, reg) /
               cfg.delta;
  }
  return se;
}

AmpTrajectory amp_run(const AmpConfig& cfg, const Registry& reg) {
  const long N = cfg.N;
  const long n = std::lround(cfg.delta * static_cast<double>(N));
  if (N < 1 || n < 1) throw std::invalid_argument("dimensions must be positive");

  const Nonlinearity& f = reg.at(cfg.f.name);
  const Nonlinearity& g = reg.at(cfg.g.name);
  auto f2 = [&](double h, double x0) {
    double args[2] = {h, x0};
    return f.forward({args, 2}, {cfg.f.params.data(), cfg.f.params.size()});
  };
  auto g2 = [&](double bv, double wv) {
    double args[2] = {bv, wv};
    return g.forward({args, 2}, {cfg.g.params.data(), cfg.g.params.size()});
  };

  NormalStream sx(mix(cfg.seed, 0x616d705f785f3030ULL));
  NormalStream swn(mix(cfg.seed, 0x616d705f775f3030ULL));
  NormalStream sa(mix(cfg.seed, 0x616d705f415f3030ULL));
  Eigen::VectorXd x0(N), w(n);
  for (long i = 0; i < N; ++i) x0(i) = cfg.sigma_x0 * sx.next();
  for (long i = 0; i < n; ++i) w(i) = cfg.sigma_w * swn.next();
  Eigen::MatrixXd A(n, N);
  const double a_sd = 1.0 / std::sqrt(static_cast<double>(n));
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < N; ++j) A(i, j) = a_sd * sa.next();

  AmpTrajectory tr;
  Eigen::VectorXd q(N), h(N), b(n), m_prev = Eigen::VectorXd::Zero(n), m(n);
  for (long i = 0; i < N; ++i) q(i) = f2(0.0, x0(i));
  double lambda = 0.0;
  for (int t = 0; t < cfg.steps; ++t) {
    tr.q_sq.push_back(q.squaredNorm() / static_cast<double>(N));
    b = A * q - lambda * m_prev;
    tr.b_sq.push_back(b.squaredNorm() / static_cast<double>(n));
    for (long i = 0; i < n; ++i) m(i) = g2(b(i), w(i));
    tr.m_sq.push_back(m.squaredNorm() / static_cast<double>(n));
    // Onsager coefficients as inner-product quotients.  The denominators are
    // the empirical second moments (which converge to sigma_t^2 resp.
    // tau_t^2): normalizing by the deterministic limits instead lets finite-
    // size fluctuations feed back and blow up within a few iterations.
    const double b_sq = b.squaredNorm();
    if (b_sq <= 0) throw std::runtime_error("AMP iterate b vanished");
    const double xi = b.dot(m) / b_sq;
    tr.xi.push_back(xi);
    h = A.transpose() * m - xi * q;
    tr.h_sq.push_back(h.squaredNorm() / static_cast<double>(N));
    for (long i = 0; i < N; ++i) q(i) = f2(h(i), x0(i));
    const double h_sq = h.squaredNorm();
    if (h_sq <= 0) throw std::runtime_error("AMP iterate h vanished");
    lambda = static_cast<double>(N) * h.dot(q) / (static_cast<double>(n) * h_sq);
    tr.lambda.push_back(lambda);
    m_prev = m;
  }
  return tr;
}

}  // namespace tp
