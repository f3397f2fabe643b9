#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xbnn/network.hpp"

namespace xbnn {

enum class AttackKind { Fgsm, Pgd };
// SH: adversaries from the software model's gradients (transfer setting).
// HH: adversaries from the mapped model's effective-weight gradients.
enum class AttackMode { SH, HH };

std::string to_string(AttackKind k);
std::string to_string(AttackMode m);
AttackKind attack_kind_from_string(const std::string& s);
AttackMode attack_mode_from_string(const std::string& s);

struct AttackSpec {
  AttackKind kind = AttackKind::Fgsm;
  double epsilon = 0.1;       // L-inf budget in input scale
  int pgd_steps = 10;
  double pgd_alpha = 0.0;     // 0 selects epsilon/4
  AttackMode mode = AttackMode::SH;
  double clip_lo = 0.0;
  double clip_hi = 1.0;
  bool pgd_random_start = true;
  std::uint64_t seed = 1;

  double alpha() const { return pgd_alpha > 0.0 ? pgd_alpha : epsilon / 4.0; }
  void validate() const;
};

// x_adv = clip(x + eps * sign(dL/dx)); sign(0) leaves the pixel untouched.
Tensor fgsm(const NetworkModel& model, const Tensor& x, const std::vector<int>& y,
            const AttackSpec& spec);
Tensor fgsm(const MappedNetwork& mapped, const Tensor& x, const std::vector<int>& y,
            const AttackSpec& spec);

// Iterated sign ascent with projection onto the eps-ball around the clean
// input and the clip box; optional seeded uniform random start.
Tensor pgd(const NetworkModel& model, const Tensor& x, const std::vector<int>& y,
           const AttackSpec& spec);
Tensor pgd(const MappedNetwork& mapped, const Tensor& x, const std::vector<int>& y,
           const AttackSpec& spec);

// Per-layer adversarial noise sensitivity ||A_adv - A||_2 / ||A||_2 over the
// recorded activations of two traces. Layers whose clean activation norm is
// zero are excluded and listed.
struct AnsReport {
  std::map<int, double> per_layer;
  std::vector<int> excluded;
};

AnsReport ans(const ForwardTrace& clean, const ForwardTrace& adv);

// One evaluated sample of an attack run; streamed into the reporting CSVs.
struct AttackRecord {
  int sample_id = 0;
  double epsilon = 0.0;
  AttackKind kind = AttackKind::Fgsm;
  AttackMode mode = AttackMode::SH;
  MapMode mapping = MapMode::Normal;
  bool clean_correct = false;
  bool adv_correct = false;
};

}  // namespace xbnn
