#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopdrive/autodiff.hpp"
#include "coopdrive/mdp.hpp"

namespace coopdrive {

enum class Variant { dvc, cvc };
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

struct PolicyConfig {
  Variant variant = Variant::dvc;
  int layers = 2;
  int width = 64;
  int ff_width = 128;
  bool shared_embedding = true;
};

nlohmann::json policy_config_to_json(const PolicyConfig& c);
PolicyConfig policy_config_from_json(const nlohmann::json& j);

/// Creates every parameter of the policy and critic networks.
void init_parameters(ParameterStore& store, const PolicyConfig& config, std::uint64_t seed);

/// Encodings reduced to occupied tokens: the computation only ever touches rows with M_s set.
struct CompactSample {
  int tokens = 0;
  std::vector<double> features;            // tokens x kFeatureDim
  std::vector<int> av_token;               // per active AV (in M_AV order), its token index
  std::vector<std::uint8_t> obs_mask;      // active x tokens
  std::vector<std::uint8_t> action_mask;   // active x kActionDim
  std::vector<int> av_row;                 // per active AV, its row in the N-slot observation

  int active() const { return static_cast<int>(av_token.size()); }
};

/// Validates the encoding invariants and compacts. Throws ContractViolation on inconsistent masks.
CompactSample compact(const StateEncoding& state, const ObservationEncoding& obs);

template <class T>
struct PolicyNodes {
  Var logits;  // active x kActionDim, absent when no AV is active
  Var logp;    // masked log-probabilities
  bool empty = true;
};

template <class T>
PolicyNodes<T> policy_forward(Graph<T>& g, const PolicyConfig& config, const CompactSample& s);

template <class T>
Var critic_forward(Graph<T>& g, const PolicyConfig& config, const CompactSample& s);

enum class ActMode { sample, greedy };

struct ActResult {
  std::vector<int> actions;               // per active AV
  std::vector<std::vector<double>> probs; // per active AV, length kActionDim
  double log_prob = 0.0;                  // joint
  double entropy = 0.0;                   // joint
  double value = 0.0;
};

/// One vectorized forward pass of policy and critic for every active AV.
template <class T>
ActResult act(const ParamSnapshot<T>& params, const PolicyConfig& config, const CompactSample& s, Rng& rng, ActMode mode);

/// Logits of all N observation rows (inactive rows zero), in the encoding's AV order.
template <class T>
std::vector<std::vector<double>> policy_logits(const ParamSnapshot<T>& params, const PolicyConfig& config,
                                               const StateEncoding& state, const ObservationEncoding& obs);

template <class T>
double critic_value(const ParamSnapshot<T>& params, const PolicyConfig& config, const StateEncoding& state,
                    const ObservationEncoding& obs);

}  // namespace coopdrive
