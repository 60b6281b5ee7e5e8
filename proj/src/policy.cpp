#include "coopdrive/policy.hpp"

#include <algorithm>
#include <cmath>

#include "coopdrive/errors.hpp"

namespace coopdrive {

std::string_view to_string(Variant v) { return v == Variant::cvc ? "CVC" : "DVC"; }

Variant parse_variant(std::string_view s) {
  if (s == "DVC" || s == "dvc") return Variant::dvc;
  if (s == "CVC" || s == "cvc") return Variant::cvc;
  throw ConfigError("unknown policy variant '" + std::string(s) + "'");
}

nlohmann::json policy_config_to_json(const PolicyConfig& c) {
  return {{"variant", std::string(to_string(c.variant))},
          {"layers", c.layers},
          {"width", c.width},
          {"ff_width", c.ff_width},
          {"shared_embedding", c.shared_embedding}};
}

PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.variant = parse_variant(j.value("variant", std::string("DVC")));
  c.layers = j.value("layers", c.layers);
  c.width = j.value("width", c.width);
  c.ff_width = j.value("ff_width", c.ff_width);
  c.shared_embedding = j.value("shared_embedding", c.shared_embedding);
  if (c.layers != 2) throw ConfigError("the policy uses exactly two attention layers");
  if (c.width <= 0 || c.ff_width <= 0) throw ConfigError("network widths must be positive");
  return c;
}

namespace {

void add_affine(ParameterStore& s, const std::string& name, int in, int out, std::uint64_t seed, Init init = Init::xavier) {
  s.add(name + ".w", in, out, init, seed);
  s.add(name + ".b", 1, out, Init::zeros, seed);
}

void add_norm(ParameterStore& s, const std::string& name, int width, std::uint64_t seed) {
  s.add(name + ".g", 1, width, Init::ones, seed);
  s.add(name + ".b", 1, width, Init::zeros, seed);
}

void add_block(ParameterStore& s, const std::string& p, const PolicyConfig& c, std::uint64_t seed) {
  add_norm(s, p + ".ln_att", c.width, seed);
  add_affine(s, p + ".wq", c.width, c.width, seed);
  add_affine(s, p + ".wk", c.width, c.width, seed);
  add_affine(s, p + ".wv", c.width, c.width, seed);
  add_affine(s, p + ".wo", c.width, c.width, seed);
  add_norm(s, p + ".ln_ff", c.width, seed);
  add_affine(s, p + ".ff1", c.width, c.ff_width, seed);
  add_affine(s, p + ".ff2", c.ff_width, c.width, seed);
}

std::string embed_prefix(const PolicyConfig& c, bool critic) { return (critic && !c.shared_embedding) ? "v.embed" : "embed"; }

}  // namespace

void init_parameters(ParameterStore& store, const PolicyConfig& c, std::uint64_t seed) {
  require(c.layers == 2 && c.width > 0 && c.ff_width > 0, "invalid policy configuration");
  add_affine(store, "embed.l1", kFeatureDim, c.width, seed);
  add_affine(store, "embed.l2", c.width, c.width, seed);
  for (int l = 0; l < c.layers; ++l) add_block(store, "pi.l" + std::to_string(l), c, seed);
  add_affine(store, "pi.head", c.width, kActionDim, seed, Init::small);
  if (!c.shared_embedding) {
    add_affine(store, "v.embed.l1", kFeatureDim, c.width, seed);
    add_affine(store, "v.embed.l2", c.width, c.width, seed);
  }
  for (int l = 0; l < c.layers; ++l) add_block(store, "v.l" + std::to_string(l), c, seed);
  add_affine(store, "v.head", c.width, 1, seed);
}

CompactSample compact(const StateEncoding& state, const ObservationEncoding& obs) {
  const int C = state.capacity;
  require(obs.capacity == C, "observation and state capacities differ");
  require(state.mask.size() == static_cast<std::size_t>(C) && state.features.size() == static_cast<std::size_t>(C) * kFeatureDim,
          "state encoding has inconsistent sizes");
  CompactSample s;
  std::vector<int> token_of(static_cast<std::size_t>(C), -1);
  for (int j = 0; j < C; ++j) {
    if (!state.mask[static_cast<std::size_t>(j)]) continue;
    token_of[static_cast<std::size_t>(j)] = s.tokens++;
    s.features.insert(s.features.end(), state.row(j), state.row(j) + kFeatureDim);
  }
  for (int i = 0; i < obs.max_active; ++i) {
    const bool on = obs.av_mask[static_cast<std::size_t>(i)] != 0;
    if (!on) {
      for (int j = 0; j < C; ++j) require(!obs.observes(i, j), "inactive AV rows must observe nothing");
      for (int a = 0; a < kActionDim; ++a) require(!obs.allowed(i, a), "inactive AV rows must allow no action");
      continue;
    }
    const auto self = obs.state_slot[static_cast<std::size_t>(i)];
    require(self.has_value() && *self >= 0 && *self < C && state.mask[static_cast<std::size_t>(*self)] != 0,
            "active AV must map to an occupied slot");
    require(obs.observes(i, *self), "an AV observes itself");
    s.av_token.push_back(token_of[static_cast<std::size_t>(*self)]);
    s.av_row.push_back(i);
    for (int j = 0; j < C; ++j) {
      if (!state.mask[static_cast<std::size_t>(j)]) {
        require(!obs.observes(i, j), "observation of an empty slot");
        continue;
      }
      s.obs_mask.push_back(obs.observes(i, j) ? 1 : 0);
    }
    bool any = false;
    for (int a = 0; a < kActionDim; ++a) {
      s.action_mask.push_back(obs.allowed(i, a) ? 1 : 0);
      any = any || obs.allowed(i, a);
    }
    require(any, "active AV needs at least one allowed action");
  }
  return s;
}

namespace {

template <class T>
Var affine(Graph<T>& g, Var x, const std::string& name) {
  return g.affine(x, g.param(name + ".w"), g.param(name + ".b"));
}

template <class T>
Var norm(Graph<T>& g, Var x, const std::string& name) {
  return g.layer_norm(x, g.param(name + ".g"), g.param(name + ".b"));
}

template <class T>
Var embed(Graph<T>& g, const PolicyConfig& c, const CompactSample& s, bool critic) {
  Tensor<T> f(s.tokens, kFeatureDim);
  for (std::size_t k = 0; k < f.size(); ++k) f.data[k] = static_cast<T>(s.features[k]);
  const std::string p = embed_prefix(c, critic);
  Var h = g.relu(affine(g, g.input(std::move(f)), p + ".l1"));
  return affine(g, h, p + ".l2");
}

// Pre-norm attention sub-layer then pre-norm feed-forward sub-layer, each with a residual.
template <class T>
Var block(Graph<T>& g, const std::string& p, Var query, Var tokens, const std::vector<std::uint8_t>& mask, bool self) {
  Var qn = norm(g, query, p + ".ln_att");
  Var kv = self ? qn : tokens;
  Var att = g.masked_attention(affine(g, qn, p + ".wq"), affine(g, kv, p + ".wk"), affine(g, kv, p + ".wv"), mask);
  Var x = g.add(query, affine(g, att, p + ".wo"));
  Var ff = affine(g, g.relu(affine(g, norm(g, x, p + ".ln_ff"), p + ".ff1")), p + ".ff2");
  return g.add(x, ff);
}

}  // namespace

template <class T>
PolicyNodes<T> policy_forward(Graph<T>& g, const PolicyConfig& c, const CompactSample& s) {
  PolicyNodes<T> out;
  if (s.active() == 0) return out;
  Var tokens = embed(g, c, s, false);
  Var q = g.gather_rows(tokens, s.av_token);
  std::vector<std::uint8_t> mask = s.obs_mask;
  if (c.variant == Variant::cvc) mask.assign(static_cast<std::size_t>(s.active()) * static_cast<std::size_t>(s.tokens), 1);
  for (int l = 0; l < c.layers; ++l) {
    q = block(g, "pi.l" + std::to_string(l), q, tokens, mask, false);
    // The centralized variant lets AVs exchange information through their updated tokens.
    if (c.variant == Variant::cvc) tokens = g.scatter_rows(tokens, q, s.av_token);
  }
  out.logits = affine(g, q, "pi.head");
  out.logp = g.masked_log_softmax(out.logits, s.action_mask);
  out.empty = false;
  return out;
}

template <class T>
Var critic_forward(Graph<T>& g, const PolicyConfig& c, const CompactSample& s) {
  if (s.tokens == 0) {
    Var pooled = g.input(Tensor<T>(1, c.width));
    return affine(g, pooled, "v.head");
  }
  Var x = embed(g, c, s, true);
  const std::vector<std::uint8_t> mask(static_cast<std::size_t>(s.tokens) * static_cast<std::size_t>(s.tokens), 1);
  for (int l = 0; l < c.layers; ++l) x = block(g, "v.l" + std::to_string(l), x, x, mask, true);
  return affine(g, g.sum_pool(x), "v.head");
}

template <class T>
ActResult act(const ParamSnapshot<T>& params, const PolicyConfig& config, const CompactSample& s, Rng& rng, ActMode mode) {
  ActResult r;
  Graph<T> g(&params);
  PolicyNodes<T> pn = policy_forward(g, config, s);
  if (!pn.empty) {
    const Tensor<T>& L = g.value(pn.logits);
    for (int i = 0; i < s.active(); ++i) {
      std::vector<double> logits(kActionDim);
      std::vector<std::uint8_t> valid(kActionDim);
      for (int a = 0; a < kActionDim; ++a) {
        logits[static_cast<std::size_t>(a)] = static_cast<double>(L.at(i, a));
        valid[static_cast<std::size_t>(a)] = s.action_mask[static_cast<std::size_t>(i) * kActionDim + static_cast<std::size_t>(a)];
      }
      std::vector<double> p = masked_softmax(logits, valid);
      int a;
      if (mode == ActMode::greedy) {
        a = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      } else {
        a = categorical_sample(p, rng);
      }
      r.actions.push_back(a);
      r.log_prob += categorical_log_prob(p, a);
      r.entropy += categorical_entropy(p);
      r.probs.push_back(std::move(p));
    }
  }
  r.value = static_cast<double>(g.value(critic_forward(g, config, s)).data[0]);
  return r;
}

template <class T>
std::vector<std::vector<double>> policy_logits(const ParamSnapshot<T>& params, const PolicyConfig& config,
                                               const StateEncoding& state, const ObservationEncoding& obs) {
  const CompactSample s = compact(state, obs);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(obs.max_active), std::vector<double>(kActionDim, 0.0));
  Graph<T> g(&params);
  PolicyNodes<T> pn = policy_forward(g, config, s);
  if (pn.empty) return out;
  const Tensor<T>& L = g.value(pn.logits);
  for (int i = 0; i < s.active(); ++i)
    for (int a = 0; a < kActionDim; ++a)
      out[static_cast<std::size_t>(s.av_row[static_cast<std::size_t>(i)])][static_cast<std::size_t>(a)] = L.at(i, a);
  return out;
}

template <class T>
double critic_value(const ParamSnapshot<T>& params, const PolicyConfig& config, const StateEncoding& state,
                    const ObservationEncoding& obs) {
  Graph<T> g(&params);
  return static_cast<double>(g.value(critic_forward(g, config, compact(state, obs))).data[0]);
}

#define COOPDRIVE_INSTANTIATE(T)                                                                                   \
  template PolicyNodes<T> policy_forward<T>(Graph<T>&, const PolicyConfig&, const CompactSample&);                 \
  template Var critic_forward<T>(Graph<T>&, const PolicyConfig&, const CompactSample&);                            \
  template ActResult act<T>(const ParamSnapshot<T>&, const PolicyConfig&, const CompactSample&, Rng&, ActMode);     \
  template std::vector<std::vector<double>> policy_logits<T>(const ParamSnapshot<T>&, const PolicyConfig&,         \
                                                             const StateEncoding&, const ObservationEncoding&);    \
  template double critic_value<T>(const ParamSnapshot<T>&, const PolicyConfig&, const StateEncoding&,               \
                                  const ObservationEncoding&);

COOPDRIVE_INSTANTIATE(float)
COOPDRIVE_INSTANTIATE(double)

#undef COOPDRIVE_INSTANTIATE

}  // namespace coopdrive
