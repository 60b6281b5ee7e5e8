#include "coopdrive/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "coopdrive/errors.hpp"

namespace coopdrive {

void ParameterStore::add(const std::string& name, int rows, int cols, Init init, std::uint64_t seed) {
  require(index_.count(name) == 0, "parameter names must be unique");
  require(rows > 0 && cols > 0, "parameter shapes must be positive");
  Entry e{name, Tensor<double>(rows, cols), Tensor<double>(rows, cols), Tensor<double>(rows, cols)};
  Rng rng(mix_seed(seed, fnv1a(name)));
  const double limit = std::sqrt(6.0 / (rows + cols));
  for (auto& x : e.value.data) {
    switch (init) {
      case Init::zeros: x = 0.0; break;
      case Init::ones: x = 1.0; break;
      case Init::xavier: x = rng.uniform(-limit, limit); break;
      case Init::small: x = 0.01 * rng.uniform(-limit, limit); break;
    }
  }
  index_[name] = static_cast<int>(entries_.size());
  entries_.push_back(std::move(e));
}

int ParameterStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractViolation("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::vector<Tensor<double>> ParameterStore::zero_grads() const {
  std::vector<Tensor<double>> g;
  g.reserve(entries_.size());
  for (const auto& e : entries_) g.emplace_back(e.value.rows, e.value.cols);
  return g;
}

void ParameterStore::adam_step(const std::vector<Tensor<double>>& grads, double lr, double beta1, double beta2,
                               double eps) {
  require(grads.size() == entries_.size(), "one gradient per parameter");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    require(grads[i].rows == entries_[i].value.rows && grads[i].cols == entries_[i].value.cols,
            "gradient shape must match its parameter");
    for (double g : grads[i].data)
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient for parameter '" + entries_[i].name + "'");
  }
  ++adam_t_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(adam_t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(adam_t_));
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    Entry& e = entries_[i];
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      const double g = grads[i].data[k];
      e.m.data[k] = beta1 * e.m.data[k] + (1.0 - beta1) * g;
      e.v.data[k] = beta2 * e.v.data[k] + (1.0 - beta2) * g * g;
      e.value.data[k] -= lr * (e.m.data[k] / c1) / (std::sqrt(e.v.data[k] / c2) + eps);
    }
  }
}

template <class T>
ParamSnapshot<T> ParamSnapshot<T>::from(const ParameterStore& store) {
  ParamSnapshot<T> s;
  s.store = &store;
  for (const auto& e : store.entries()) {
    Tensor<T> t(e.value.rows, e.value.cols);
    for (std::size_t k = 0; k < t.size(); ++k) t.data[k] = static_cast<T>(e.value.data[k]);
    s.values.push_back(std::move(t));
  }
  return s;
}

// ---------------------------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[] = "COOPDRIVE-CKPT 1\n";

template <class T>
void write_raw(std::ostream& out, const std::vector<T>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
void read_raw(std::istream& in, std::vector<T>& v) {
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  if (!in) throw ConfigError("checkpoint payload is truncated");
}

nlohmann::json read_manifest(std::istream& in, const std::string& path) {
  std::string magic(sizeof(kCheckpointMagic) - 1, '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) throw ConfigError("'" + path + "' is not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ConfigError("checkpoint manifest is truncated");
  return nlohmann::json::parse(text);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterStore& store, const nlohmann::json& meta,
                     bool with_trainer_state) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : store.entries()) params.push_back({{"name", e.name}, {"shape", {e.value.rows, e.value.cols}}});
  nlohmann::json manifest = {{"format", "coopdrive-checkpoint"},
                             {"version", 1},
                             {"parameters", params},
                             {"payload", "float32-le"},
                             {"trainer_state", with_trainer_state},
                             {"adam_steps", store.adam_steps()},
                             {"meta", meta}};
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(len));
  for (const auto& e : store.entries()) {
    std::vector<float> f(e.value.data.begin(), e.value.data.end());
    write_raw(out, f);
  }
  if (with_trainer_state)
    for (const auto& e : store.entries()) {
      write_raw(out, e.value.data);
      write_raw(out, e.m.data);
      write_raw(out, e.v.data);
    }
  if (!out) throw ConfigError("failed writing checkpoint '" + path + "'");
}

nlohmann::json read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  return read_manifest(in, path);
}

nlohmann::json load_checkpoint(const std::string& path, ParameterStore& store, bool restore_trainer_state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  const nlohmann::json manifest = read_manifest(in, path);
  const auto& params = manifest.at("parameters");
  if (params.size() != store.size()) throw ConfigError("checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    if (params[i].at("name") != e.name || params[i].at("shape")[0] != e.value.rows || params[i].at("shape")[1] != e.value.cols)
      throw ConfigError("checkpoint parameter '" + params[i].at("name").get<std::string>() + "' does not match the model");
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.entry(i);
    std::vector<float> f(e.value.size());
    read_raw(in, f);
    for (std::size_t k = 0; k < f.size(); ++k) e.value.data[k] = f[k];
  }
  if (restore_trainer_state) {
    if (!manifest.at("trainer_state").get<bool>()) throw ConfigError("checkpoint has no trainer state to resume from");
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& e = store.entry(i);
      read_raw(in, e.value.data);
      read_raw(in, e.m.data);
      read_raw(in, e.v.data);
    }
    store.set_adam_steps(manifest.at("adam_steps").get<std::int64_t>());
  }
  return manifest.at("meta");
}

// ---------------------------------------------------------------------------------------------
// Graph

namespace {

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  Tensor<T> t(a.cols, a.rows);
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) t.at(c, r) = a.at(r, c);
  return t;
}

}  // namespace

template <class T>
Var Graph<T>::push(Tensor<T> value, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
Tensor<T>& Graph<T>::g(Var v) {
  Node& n = node(v);
  if (n.grad.size() == 0) {
    const Tensor<T>& val = value(v);
    n.grad = Tensor<T>(val.rows, val.cols);
  }
  return n.grad;
}

template <class T>
Var Graph<T>::input(Tensor<T> value, bool requires_grad) {
  return push(std::move(value), requires_grad);
}

template <class T>
Var Graph<T>::param(int index) {
  require(params_ != nullptr, "graph has no parameter snapshot");
  Node n;
  n.ref = &params_->get(index);
  n.needs_grad = grads_ != nullptr;
  n.param = index;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
Var Graph<T>::affine(Var x, Var w, Var b) {
  const Tensor<T>& X = value(x);
  const Tensor<T>& W = value(w);
  const Tensor<T>& B = value(b);
  require(X.cols == W.rows && B.rows == 1 && B.cols == W.cols, "affine shape mismatch");
  const int n = X.rows, in = X.cols, o = W.cols;
  Tensor<T> Y(n, o);
  for (int r = 0; r < n; ++r) {
    T* y = Y.row(r);
    std::copy(B.data.begin(), B.data.end(), y);
    const T* xr = X.row(r);
    for (int i = 0; i < in; ++i) {
      const T xi = xr[i];
      const T* wr = W.row(i);
      for (int c = 0; c < o; ++c) y[c] += xi * wr[c];
    }
  }
  const bool ng = needs(x) || needs(w) || needs(b);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, x, w, b, out, n, in, o] {
      const Tensor<T>& dY = node(out).grad;
      const Tensor<T>& X = value(x);
      const Tensor<T>& W = value(w);
      if (needs(x)) {
        Tensor<T>& dX = g(x);
        const Tensor<T> Wt = transpose(W);
        for (int r = 0; r < n; ++r) {
          const T* dy = dY.row(r);
          T* dx = dX.row(r);
          for (int c = 0; c < o; ++c) {
            const T d = dy[c];
            const T* wt = Wt.row(c);
            for (int i = 0; i < in; ++i) dx[i] += d * wt[i];
          }
        }
      }
      if (needs(w)) {
        Tensor<T>& dW = g(w);
        for (int r = 0; r < n; ++r) {
          const T* dy = dY.row(r);
          const T* xr = X.row(r);
          for (int i = 0; i < in; ++i) {
            const T xi = xr[i];
            T* dw = dW.row(i);
            for (int c = 0; c < o; ++c) dw[c] += xi * dy[c];
          }
        }
      }
      if (needs(b)) {
        Tensor<T>& dB = g(b);
        for (int r = 0; r < n; ++r) {
          const T* dy = dY.row(r);
          for (int c = 0; c < o; ++c) dB.data[static_cast<std::size_t>(c)] += dy[c];
        }
      }
    };
  return out;
}

template <class T>
Var Graph<T>::layer_norm(Var x, Var gain, Var bias, T eps) {
  const Tensor<T>& X = value(x);
  const Tensor<T>& G = value(gain);
  const Tensor<T>& B = value(bias);
  require(G.rows == 1 && B.rows == 1 && G.cols == X.cols && B.cols == X.cols, "layer_norm shape mismatch");
  const int n = X.rows, d = X.cols;
  Tensor<T> Y(n, d);
  Tensor<T> xhat(n, d);
  std::vector<T> inv_std(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    const T* xr = X.row(r);
    T mean = 0;
    for (int c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    T* h = xhat.row(r);
    T* y = Y.row(r);
    for (int c = 0; c < d; ++c) {
      h[c] = (xr[c] - mean) * is;
      y[c] = h[c] * G.data[static_cast<std::size_t>(c)] + B.data[static_cast<std::size_t>(c)];
    }
  }
  const bool ng = needs(x) || needs(gain) || needs(bias);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, x, gain, bias, out, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const Tensor<T>& dY = node(out).grad;
      const Tensor<T>& G = value(gain);
      if (needs(gain) || needs(bias)) {
        Tensor<T>* dG = needs(gain) ? &g(gain) : nullptr;
        Tensor<T>* dB = needs(bias) ? &g(bias) : nullptr;
        for (int r = 0; r < n; ++r) {
          const T* dy = dY.row(r);
          const T* h = xhat.row(r);
          for (int c = 0; c < d; ++c) {
            if (dG) dG->data[static_cast<std::size_t>(c)] += dy[c] * h[c];
            if (dB) dB->data[static_cast<std::size_t>(c)] += dy[c];
          }
        }
      }
      if (needs(x)) {
        Tensor<T>& dX = g(x);
        std::vector<T> dh(static_cast<std::size_t>(d));
        for (int r = 0; r < n; ++r) {
          const T* dy = dY.row(r);
          const T* h = xhat.row(r);
          T mean_dh = 0, mean_dh_h = 0;
          for (int c = 0; c < d; ++c) {
            dh[static_cast<std::size_t>(c)] = dy[c] * G.data[static_cast<std::size_t>(c)];
            mean_dh += dh[static_cast<std::size_t>(c)];
            mean_dh_h += dh[static_cast<std::size_t>(c)] * h[c];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          T* dx = dX.row(r);
          const T is = inv_std[static_cast<std::size_t>(r)];
          for (int c = 0; c < d; ++c) dx[c] += is * (dh[static_cast<std::size_t>(c)] - mean_dh - h[c] * mean_dh_h);
        }
      }
    };
  return out;
}

template <class T>
Var Graph<T>::relu(Var x) {
  Tensor<T> Y = value(x);
  for (auto& v : Y.data) v = v > T(0) ? v : T(0);
  const bool ng = needs(x);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, x, out] {
      const Tensor<T>& dY = node(out).grad;
      const Tensor<T>& X = value(x);
      Tensor<T>& dX = g(x);
      for (std::size_t k = 0; k < X.size(); ++k)
        if (X.data[k] > T(0)) dX.data[k] += dY.data[k];
    };
  return out;
}

template <class T>
Var Graph<T>::add(Var x, Var y) {
  const Tensor<T>& X = value(x);
  const Tensor<T>& Y = value(y);
  require(X.rows == Y.rows && X.cols == Y.cols, "add shape mismatch");
  Tensor<T> Z = X;
  for (std::size_t k = 0; k < Z.size(); ++k) Z.data[k] += Y.data[k];
  const bool ng = needs(x) || needs(y);
  Var out = push(std::move(Z), ng);
  if (ng)
    node(out).back = [this, x, y, out] {
      const Tensor<T>& dZ = node(out).grad;
      for (Var v : {x, y})
        if (needs(v)) {
          Tensor<T>& d = g(v);
          for (std::size_t k = 0; k < d.size(); ++k) d.data[k] += dZ.data[k];
        }
    };
  return out;
}

template <class T>
Var Graph<T>::scale(Var x, T factor) {
  Tensor<T> Y = value(x);
  for (auto& v : Y.data) v *= factor;
  const bool ng = needs(x);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, x, out, factor] {
      const Tensor<T>& dY = node(out).grad;
      Tensor<T>& dX = g(x);
      for (std::size_t k = 0; k < dX.size(); ++k) dX.data[k] += factor * dY.data[k];
    };
  return out;
}

template <class T>
Var Graph<T>::masked_attention(Var q, Var k, Var v, const std::vector<std::uint8_t>& mask) {
  const Tensor<T>& Q = value(q);
  const Tensor<T>& K = value(k);
  const Tensor<T>& V = value(v);
  require(Q.cols == K.cols && K.rows == V.rows, "attention shape mismatch");
  const int nq = Q.rows, nk = K.rows, d = Q.cols, dv = V.cols;
  require(mask.size() == static_cast<std::size_t>(nq) * static_cast<std::size_t>(nk), "attention mask shape mismatch");
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  // Masked scores stand for -1e9: their exponentials underflow to exactly 0, so they are skipped.
  Tensor<T> P(nq, nk);
  Tensor<T> Y(nq, dv);
  const Tensor<T> Kt = transpose(K);
  for (int i = 0; i < nq; ++i) {
    const std::uint8_t* m = &mask[static_cast<std::size_t>(i) * static_cast<std::size_t>(nk)];
    T* p = P.row(i);
    const T* qi = Q.row(i);
    for (int c = 0; c < d; ++c) {
      const T qc = qi[c];
      const T* kt = Kt.row(c);
      for (int j = 0; j < nk; ++j) p[j] += qc * kt[j];
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < nk; ++j) {
      if (!m[j]) {
        p[j] = T(0);
        continue;
      }
      p[j] *= scale;
      mx = std::max(mx, p[j]);
    }
    require(mx > -std::numeric_limits<T>::infinity(), "attention query row has no unmasked key");
    T z = 0;
    for (int j = 0; j < nk; ++j) {
      if (!m[j]) continue;
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    T* y = Y.row(i);
    for (int j = 0; j < nk; ++j) {
      if (!m[j]) continue;
      p[j] /= z;
      const T pj = p[j];
      const T* vj = V.row(j);
      for (int c = 0; c < dv; ++c) y[c] += pj * vj[c];
    }
  }
  const bool ng = needs(q) || needs(k) || needs(v);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, q, k, v, out, nq, nk, d, dv, scale, mask, P = std::move(P)] {
      const Tensor<T>& dY = node(out).grad;
      const Tensor<T>& Q = value(q);
      const Tensor<T>& K = value(k);
      const Tensor<T>& V = value(v);
      Tensor<T>* dQ = needs(q) ? &g(q) : nullptr;
      Tensor<T>* dK = needs(k) ? &g(k) : nullptr;
      Tensor<T>* dV = needs(v) ? &g(v) : nullptr;
      std::vector<T> ds(static_cast<std::size_t>(nk));
      const Tensor<T> Vt = transpose(V);
      for (int i = 0; i < nq; ++i) {
        const std::uint8_t* m = &mask[static_cast<std::size_t>(i) * static_cast<std::size_t>(nk)];
        const T* p = P.row(i);
        const T* dy = dY.row(i);
        std::fill(ds.begin(), ds.end(), T(0));
        for (int c = 0; c < dv; ++c) {
          const T dc = dy[c];
          const T* vt = Vt.row(c);
          for (int j = 0; j < nk; ++j) ds[static_cast<std::size_t>(j)] += dc * vt[j];
        }
        T dot = 0;
        for (int j = 0; j < nk; ++j) {
          if (!m[j]) continue;
          dot += p[j] * ds[static_cast<std::size_t>(j)];
          if (dV) {
            T* dvj = dV->row(j);
            for (int c = 0; c < dv; ++c) dvj[c] += p[j] * dy[c];
          }
        }
        const T* qi = Q.row(i);
        T* dqi = dQ ? dQ->row(i) : nullptr;
        for (int j = 0; j < nk; ++j) {
          if (!m[j]) continue;
          const T s = p[j] * (ds[static_cast<std::size_t>(j)] - dot) * scale;
          const T* kj = K.row(j);
          if (dqi)
            for (int c = 0; c < d; ++c) dqi[c] += s * kj[c];
          if (dK) {
            T* dkj = dK->row(j);
            for (int c = 0; c < d; ++c) dkj[c] += s * qi[c];
          }
        }
      }
    };
  return out;
}

template <class T>
Var Graph<T>::gather_rows(Var x, const std::vector<int>& rows) {
  const Tensor<T>& X = value(x);
  Tensor<T> Y(static_cast<int>(rows.size()), X.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < X.rows, "gather row out of range");
    std::copy(X.row(rows[i]), X.row(rows[i]) + X.cols, Y.row(static_cast<int>(i)));
  }
  const bool ng = needs(x);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, x, out, rows] {
      const Tensor<T>& dY = node(out).grad;
      Tensor<T>& dX = g(x);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const T* dy = dY.row(static_cast<int>(i));
        T* dx = dX.row(rows[i]);
        for (int c = 0; c < dX.cols; ++c) dx[c] += dy[c];
      }
    };
  return out;
}

template <class T>
Var Graph<T>::scatter_rows(Var base, Var src, const std::vector<int>& rows) {
  const Tensor<T>& B = value(base);
  const Tensor<T>& S = value(src);
  require(S.cols == B.cols && S.rows == static_cast<int>(rows.size()), "scatter shape mismatch");
  Tensor<T> Y = B;
  std::vector<std::uint8_t> replaced(static_cast<std::size_t>(B.rows), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < B.rows && !replaced[static_cast<std::size_t>(rows[i])], "scatter rows must be distinct and in range");
    replaced[static_cast<std::size_t>(rows[i])] = 1;
    std::copy(S.row(static_cast<int>(i)), S.row(static_cast<int>(i)) + S.cols, Y.row(rows[i]));
  }
  const bool ng = needs(base) || needs(src);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, base, src, out, rows, replaced = std::move(replaced)] {
      const Tensor<T>& dY = node(out).grad;
      if (needs(base)) {
        Tensor<T>& dB = g(base);
        for (int r = 0; r < dB.rows; ++r) {
          if (replaced[static_cast<std::size_t>(r)]) continue;
          const T* dy = dY.row(r);
          T* db = dB.row(r);
          for (int c = 0; c < dB.cols; ++c) db[c] += dy[c];
        }
      }
      if (needs(src)) {
        Tensor<T>& dS = g(src);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const T* dy = dY.row(rows[i]);
          T* ds = dS.row(static_cast<int>(i));
          for (int c = 0; c < dS.cols; ++c) ds[c] += dy[c];
        }
      }
    };
  return out;
}

template <class T>
Var Graph<T>::sum_pool(Var x, const std::vector<std::uint8_t>& mask) {
  const Tensor<T>& X = value(x);
  require(mask.empty() || mask.size() == static_cast<std::size_t>(X.rows), "pool mask shape mismatch");
  Tensor<T> Y(1, X.cols);
  for (int r = 0; r < X.rows; ++r) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(r)]) continue;
    const T* xr = X.row(r);
    for (int c = 0; c < X.cols; ++c) Y.data[static_cast<std::size_t>(c)] += xr[c];
  }
  const bool ng = needs(x);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, x, out, mask] {
      const Tensor<T>& dY = node(out).grad;
      Tensor<T>& dX = g(x);
      for (int r = 0; r < dX.rows; ++r) {
        if (!mask.empty() && !mask[static_cast<std::size_t>(r)]) continue;
        T* dx = dX.row(r);
        for (int c = 0; c < dX.cols; ++c) dx[c] += dY.data[static_cast<std::size_t>(c)];
      }
    };
  return out;
}

template <class T>
Var Graph<T>::masked_log_softmax(Var logits, const std::vector<std::uint8_t>& valid) {
  const Tensor<T>& L = value(logits);
  require(valid.size() == L.size(), "log-softmax mask shape mismatch");
  Tensor<T> Y(L.rows, L.cols);
  for (int r = 0; r < L.rows; ++r) {
    const std::uint8_t* m = &valid[static_cast<std::size_t>(r) * static_cast<std::size_t>(L.cols)];
    const T* l = L.row(r);
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < L.cols; ++c)
      if (m[c]) mx = std::max(mx, l[c]);
    require(mx > -std::numeric_limits<T>::infinity(), "log-softmax row has no valid entry");
    T z = 0;
    for (int c = 0; c < L.cols; ++c)
      if (m[c]) z += std::exp(l[c] - mx);
    const T lz = mx + std::log(z);
    T* y = Y.row(r);
    for (int c = 0; c < L.cols; ++c) y[c] = m[c] ? l[c] - lz : T(0);
  }
  const bool ng = needs(logits);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, logits, out, valid] {
      const Tensor<T>& dY = node(out).grad;
      const Tensor<T>& Y = value(out);
      Tensor<T>& dL = g(logits);
      for (int r = 0; r < Y.rows; ++r) {
        const std::uint8_t* m = &valid[static_cast<std::size_t>(r) * static_cast<std::size_t>(Y.cols)];
        const T* dy = dY.row(r);
        const T* y = Y.row(r);
        T total = 0;
        for (int c = 0; c < Y.cols; ++c)
          if (m[c]) total += dy[c];
        T* dl = dL.row(r);
        for (int c = 0; c < Y.cols; ++c)
          if (m[c]) dl[c] += dy[c] - std::exp(y[c]) * total;
      }
    };
  return out;
}

template <class T>
Var Graph<T>::pick_sum(Var logp, const std::vector<int>& actions) {
  const Tensor<T>& L = value(logp);
  require(actions.size() == static_cast<std::size_t>(L.rows), "one action per row");
  Tensor<T> Y(1, 1);
  for (int r = 0; r < L.rows; ++r) {
    require(actions[static_cast<std::size_t>(r)] >= 0 && actions[static_cast<std::size_t>(r)] < L.cols, "action out of range");
    Y.data[0] += L.at(r, actions[static_cast<std::size_t>(r)]);
  }
  const bool ng = needs(logp);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, logp, out, actions] {
      const T dy = node(out).grad.data[0];
      Tensor<T>& dL = g(logp);
      for (int r = 0; r < dL.rows; ++r) dL.at(r, actions[static_cast<std::size_t>(r)]) += dy;
    };
  return out;
}

template <class T>
Var Graph<T>::entropy_sum(Var logp, const std::vector<std::uint8_t>& valid) {
  const Tensor<T>& L = value(logp);
  require(valid.size() == L.size(), "entropy mask shape mismatch");
  Tensor<T> Y(1, 1);
  for (std::size_t k = 0; k < L.size(); ++k)
    if (valid[k]) Y.data[0] -= std::exp(L.data[k]) * L.data[k];
  const bool ng = needs(logp);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, logp, out, valid] {
      const T dy = node(out).grad.data[0];
      const Tensor<T>& L = value(logp);
      Tensor<T>& dL = g(logp);
      for (std::size_t k = 0; k < L.size(); ++k)
        if (valid[k]) dL.data[k] -= dy * std::exp(L.data[k]) * (L.data[k] + T(1));
    };
  return out;
}

template <class T>
Var Graph<T>::clipped_surrogate(Var logp, T old_logp, T advantage, T eps) {
  const Tensor<T>& L = value(logp);
  require(L.rows == 1 && L.cols == 1, "surrogate takes a scalar log-probability");
  const T rho = std::exp(L.data[0] - old_logp);
  const T unclipped = rho * advantage;
  const T clipped = std::clamp(rho, T(1) - eps, T(1) + eps) * advantage;
  Tensor<T> Y(1, 1);
  Y.data[0] = std::min(unclipped, clipped);
  // The gradient flows only while the unclipped branch is the minimum.
  const bool active = unclipped <= clipped;
  const bool ng = needs(logp);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, logp, out, active, unclipped] {
      if (active) g(logp).data[0] += node(out).grad.data[0] * unclipped;
    };
  return out;
}

template <class T>
Var Graph<T>::squared_error(Var x, T target) {
  const Tensor<T>& X = value(x);
  require(X.rows == 1 && X.cols == 1, "squared error takes a scalar");
  Tensor<T> Y(1, 1);
  const T diff = X.data[0] - target;
  Y.data[0] = diff * diff;
  const bool ng = needs(x);
  Var out = push(std::move(Y), ng);
  if (ng) node(out).back = [this, x, out, diff] { g(x).data[0] += node(out).grad.data[0] * T(2) * diff; };
  return out;
}

template <class T>
Var Graph<T>::sum(Var x) {
  const Tensor<T>& X = value(x);
  Tensor<T> Y(1, 1);
  for (T v : X.data) Y.data[0] += v;
  const bool ng = needs(x);
  Var out = push(std::move(Y), ng);
  if (ng)
    node(out).back = [this, x, out] {
      const T dy = node(out).grad.data[0];
      for (auto& d : g(x).data) d += dy;
    };
  return out;
}

template <class T>
void Graph<T>::backward(Var out) {
  require(value(out).rows == 1 && value(out).cols == 1, "backward starts from a scalar");
  if (!needs(out)) return;
  g(out).data[0] = T(1);
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.back) n.back();
    if (n.param >= 0 && grads_ != nullptr) {
      Tensor<T>& acc = (*grads_)[static_cast<std::size_t>(n.param)];
      for (std::size_t k = 0; k < acc.size(); ++k) acc.data[k] += n.grad.data[k];
    }
  }
}

template class Graph<float>;
template class Graph<double>;
template struct ParamSnapshot<float>;
template struct ParamSnapshot<double>;

// ---------------------------------------------------------------------------------------------
// Categorical helpers

std::vector<double> masked_softmax(const std::vector<double>& logits, const std::vector<std::uint8_t>& valid) {
  require(logits.size() == valid.size(), "softmax mask shape mismatch");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (valid[k]) mx = std::max(mx, logits[k]);
  require(mx > -std::numeric_limits<double>::infinity(), "softmax needs at least one valid entry");
  std::vector<double> p(logits.size(), 0.0);
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (valid[k]) z += p[k] = std::exp(logits[k] - mx);
  for (auto& x : p) x /= z;
  return p;
}

int categorical_sample(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last = -1;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (probs[k] <= 0.0) continue;
    acc += probs[k];
    last = static_cast<int>(k);
    if (u < acc) return last;
  }
  require(last >= 0, "cannot sample from an empty distribution");
  return last;
}

double categorical_log_prob(const std::vector<double>& probs, int action) {
  require(action >= 0 && static_cast<std::size_t>(action) < probs.size(), "action out of range");
  return std::log(probs[static_cast<std::size_t>(action)]);
}

double categorical_entropy(const std::vector<double>& probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

}  // namespace coopdrive
