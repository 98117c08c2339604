#pragma once

// Parameter store, Adam, cosine schedule, EMA blending, ckpt/1 checkpoints.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <string>

#include "gridflow/errors.hpp"
#include "gridflow/tensor.hpp"

namespace gridflow {

// Named trainable tensors with a stable canonical (lexicographic) ordering.
struct ParamStore {
  std::map<std::string, ad::Tensor> params;

  ad::Tensor& add(const std::string& name, ad::Tensor t) {
    t.set_requires_grad().set_name(name);
    auto [it, ok] = params.emplace(name, std::move(t));
    if (!ok) throw ParamMismatch("duplicate parameter " + name);
    return it->second;
  }

  ad::Tensor& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ParamMismatch("unknown parameter " + name);
    return it->second;
  }

  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : params)
      out.add(name, ad::Tensor::from_array(t.shape(), t.value()));
    return out;
  }

  size_t size() const { return params.size(); }
};

// grads accumulated across the samples of a batch, keyed like the store
struct GradAccumulator {
  std::map<std::string, ad::ArrayXd> grads;

  // Moves the per-sample gradients out of the store so the next backward
  // cannot double-count a parameter it does not reach.
  void accumulate(ParamStore& ps) {
    for (auto& [name, t] : ps.params) {
      if (!t.grad().size()) continue;  // not reached by this backward
      auto it = grads.find(name);
      if (it == grads.end())
        grads.emplace(name, t.grad());
      else
        it->second += t.grad();
      t.grad().resize(0);
    }
  }

  void scale(double c) {
    for (auto& [name, g] : grads) g *= c;
  }

  void clear() { grads.clear(); }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, std::pair<ad::ArrayXd, ad::ArrayXd>> moments;  // m, v
  int64_t t = 0;
};

inline void adam_step(ParamStore& params, const GradAccumulator& grads,
                      AdamState& state, const AdamConfig& cfg) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params.params) {
    auto git = grads.grads.find(name);
    if (git == grads.grads.end()) continue;
    const ad::ArrayXd& g = git->second;
    if (!g.isFinite().all())
      throw NonFiniteGradient("non-finite gradient for parameter " + name);
    auto [mit, fresh] = state.moments.try_emplace(
        name, ad::ArrayXd::Zero(g.size()), ad::ArrayXd::Zero(g.size()));
    auto& [m, v] = mit->second;
    if (m.size() != g.size()) throw ParamMismatch("moment shape mismatch for " + name);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    p.value() -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
  }
}

inline double cosine_lr(int64_t step, int64_t total_steps, double lr_max = 1e-3,
                        double lr_min = 1e-5) {
  if (step < 0 || step > total_steps || total_steps <= 0)
    throw Error("cosine_lr: step out of range");
  return lr_min + 0.5 * (lr_max - lr_min) *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                      static_cast<double>(total_steps)));
}

// θ_t ← α·θ_t + (1−α)·θ_s
inline void ema_update(ParamStore& teacher, const ParamStore& student, double alpha) {
  if (teacher.size() != student.size())
    throw ParamMismatch("teacher/student parameter counts differ");
  auto ti = teacher.params.begin();
  auto si = student.params.begin();
  for (; ti != teacher.params.end(); ++ti, ++si) {
    if (ti->first != si->first || ti->second.shape() != si->second.shape())
      throw ParamMismatch("teacher/student parameter mismatch at " + ti->first);
    ti->second.value() = alpha * ti->second.value() + (1.0 - alpha) * si->second.value();
  }
}

// ---- ckpt/1: named-tensor container, shape header + raw little-endian data

inline void save_checkpoint(const ParamStore& ps, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  f.write("GFCKPT1\n", 8);
  auto put_u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  put_u32(static_cast<uint32_t>(ps.size()));
  for (const auto& [name, t] : ps.params) {
    put_u32(static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) put_u32(static_cast<uint32_t>(d));
    f.write(reinterpret_cast<const char*>(t.value().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
}

inline ParamStore load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 8) != "GFCKPT1\n") throw SchemaMismatch("not a ckpt/1 file");
  auto get_u32 = [&] {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  ParamStore ps;
  const uint32_t count = get_u32();
  for (uint32_t k = 0; k < count; ++k) {
    std::string name(get_u32(), '\0');
    f.read(name.data(), static_cast<std::streamsize>(name.size()));
    std::vector<int> shape(get_u32());
    int sz = 1;
    for (auto& d : shape) {
      d = static_cast<int>(get_u32());
      sz *= d;
    }
    ad::ArrayXd data(sz);
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(sz * sizeof(double)));
    ps.add(name, ad::Tensor::from_array(shape, std::move(data)));
  }
  if (!f) throw SchemaMismatch("truncated ckpt/1 file");
  return ps;
}

}  // namespace gridflow
