#include "xbnn/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "xbnn/errors.hpp"
#include "xbnn/rng.hpp"
#include "xbnn/train.hpp"

namespace xbnn {

std::string to_string(AttackKind k) { return k == AttackKind::Fgsm ? "fgsm" : "pgd"; }
std::string to_string(AttackMode m) { return m == AttackMode::SH ? "SH" : "HH"; }

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::Fgsm;
  if (s == "pgd") return AttackKind::Pgd;
  throw ConfigError("unknown attack kind '" + s + "' (fgsm or pgd)");
}

AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "sh" || s == "SH") return AttackMode::SH;
  if (s == "hh" || s == "HH") return AttackMode::HH;
  throw ConfigError("unknown attack mode '" + s + "' (sh or hh)");
}

void AttackSpec::validate() const {
  if (epsilon < 0.0) throw ConfigError("attack epsilon must be >= 0");
  if (clip_lo >= clip_hi) throw ConfigError("attack clip range is empty");
  if (epsilon > clip_hi - clip_lo)
    throw ConfigError("attack epsilon exceeds the input range span");
  if (pgd_steps < 1) throw ConfigError("pgd_steps must be >= 1");
  if (pgd_alpha < 0.0) throw ConfigError("pgd_alpha must be >= 0");
}

namespace {

ForwardTrace fwd(const NetworkModel& m, const Tensor& x) { return forward_ideal(m, x, false); }
ForwardTrace fwd(const MappedNetwork& m, const Tensor& x) { return forward_crossbar(m, x); }
Gradients bwd(const NetworkModel& m, const ForwardTrace& t, const Tensor& d) {
  return backward(m, t, d);
}
Gradients bwd(const MappedNetwork& m, const ForwardTrace& t, const Tensor& d) {
  return backward(m, t, d);
}

template <typename Model>
Tensor input_grad(const Model& m, const Tensor& x, const std::vector<int>& y) {
  ForwardTrace t = fwd(m, x);
  Tensor dlogits;
  softmax_cross_entropy(t.logits(), y, &dlogits);
  return bwd(m, t, dlogits).input_grad;
}

double sgn0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

template <typename Model>
Tensor fgsm_impl(const Model& m, const Tensor& x, const std::vector<int>& y,
                 const AttackSpec& spec) {
  spec.validate();
  if (spec.kind != AttackKind::Fgsm) throw ConfigError("fgsm called with a non-fgsm spec");
  Tensor g = input_grad(m, x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = std::clamp(x[i] + spec.epsilon * sgn0(g[i]), spec.clip_lo, spec.clip_hi);
  return out;
}

template <typename Model>
Tensor pgd_impl(const Model& m, const Tensor& x, const std::vector<int>& y,
                const AttackSpec& spec) {
  spec.validate();
  if (spec.kind != AttackKind::Pgd) throw ConfigError("pgd called with a non-pgd spec");
  const double eps = spec.epsilon;
  const double alpha = spec.alpha();
  const int N = x.dim(0);
  const std::size_t stride = x.size() / static_cast<std::size_t>(N);

  Tensor cur = x;
  if (spec.pgd_random_start && eps > 0.0) {
    // One stream per sample position, so the start point is independent of
    // how the batch was split.
    for (int n = 0; n < N; ++n) {
      RandomStream rs(spec.seed, stream_tag("pgd-start"), static_cast<std::uint64_t>(n));
      double* p = cur.data() + static_cast<std::size_t>(n) * stride;
      for (std::size_t i = 0; i < stride; ++i)
        p[i] = std::clamp(p[i] + rs.next_uniform(-eps, eps), spec.clip_lo, spec.clip_hi);
    }
  }
  for (int step = 0; step < spec.pgd_steps; ++step) {
    Tensor g = input_grad(m, cur, y);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      double v = cur[i] + alpha * sgn0(g[i]);
      v = std::clamp(v, x[i] - eps, x[i] + eps);
      cur[i] = std::clamp(v, spec.clip_lo, spec.clip_hi);
    }
  }
  return cur;
}

}  // namespace

Tensor fgsm(const NetworkModel& model, const Tensor& x, const std::vector<int>& y,
            const AttackSpec& spec) {
  return fgsm_impl(model, x, y, spec);
}

Tensor fgsm(const MappedNetwork& mapped, const Tensor& x, const std::vector<int>& y,
            const AttackSpec& spec) {
  return fgsm_impl(mapped, x, y, spec);
}

Tensor pgd(const NetworkModel& model, const Tensor& x, const std::vector<int>& y,
           const AttackSpec& spec) {
  return pgd_impl(model, x, y, spec);
}

Tensor pgd(const MappedNetwork& mapped, const Tensor& x, const std::vector<int>& y,
           const AttackSpec& spec) {
  return pgd_impl(mapped, x, y, spec);
}

AnsReport ans(const ForwardTrace& clean, const ForwardTrace& adv) {
  if (clean.outputs.size() != adv.outputs.size())
    throw DataError("traces come from different models");
  AnsReport report;
  for (std::size_t l = 0; l < clean.outputs.size(); ++l) {
    const Tensor& a = clean.outputs[l];
    const Tensor& b = adv.outputs[l];
    if (!a.same_shape(b)) throw DataError("trace activation shapes differ at layer " +
                                          std::to_string(l));
    double na = 0.0, nd = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      na += a[i] * a[i];
      const double d = b[i] - a[i];
      nd += d * d;
    }
    if (na == 0.0) {
      report.excluded.push_back(static_cast<int>(l));
    } else {
      report.per_layer[static_cast<int>(l)] = std::sqrt(nd) / std::sqrt(na);
    }
  }
  return report;
}

}  // namespace xbnn
