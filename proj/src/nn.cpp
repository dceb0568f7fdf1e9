// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#include "diffmark/nn.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace diffmark {

Parameter& ParamStore::add(const std::string& name, Shape shape) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  params_.push_back(std::make_unique<Parameter>(name, shape));
  index_[name] = params_.back().get();
  return *params_.back();
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
  return *it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
  return *it->second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> v;
  v.reserve(params_.size());
  for (auto& p : params_) v.push_back(p.get());
  return v;
}

std::vector<const Parameter*> ParamStore::all() const {
  std::vector<const Parameter*> v;
  v.reserve(params_.size());
  for (auto& p : params_) v.push_back(p.get());
  return v;
}

std::size_t ParamStore::param_count() const {
  std::size_t n = 0;
  for (auto& p : params_) n += p->value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void ParamStore::freeze(bool on) {
  for (auto& p : params_) p->frozen = on;
}

double ParamStore::grad_norm() const {
  double acc = 0;
  for (auto& p : params_)
    for (double g : p->grad) acc += g * g;
  return std::sqrt(acc);
}

void ParamStore::clip_grad_norm(double max_norm) {
  double n = grad_norm();
  if (n > max_norm && n > 0) {
    double s = max_norm / n;
    for (auto& p : params_)
      for (double& g : p->grad) g *= s;
  }
}

std::vector<std::vector<Scalar>> ParamStore::snapshot() const {
  std::vector<std::vector<Scalar>> s;
  for (auto& p : params_) s.push_back(p->value);
  return s;
}

bool ParamStore::equals_snapshot(const std::vector<std::vector<Scalar>>& snap) const {
  if (snap.size() != params_.size()) return false;
  for (std::size_t i = 0; i < snap.size(); ++i) {
    if (snap[i].size() != params_[i]->value.size()) return false;
    if (std::memcmp(snap[i].data(), params_[i]->value.data(),
                    snap[i].size() * sizeof(Scalar)) != 0)
      return false;
  }
  return true;
}

void init_uniform_fan_in(Parameter& p, int fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(double(std::max(fan_in, 1)));
  for (auto& v : p.value) v = rng.uniform(-bound, bound);
}

void init_zeros(Parameter& p) { std::fill(p.value.begin(), p.value.end(), 0.0); }
void init_ones(Parameter& p) { std::fill(p.value.begin(), p.value.end(), 1.0); }

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2,
           double eps, double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter* p = params_[i];
    if (p->frozen) continue;
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      double g = p->grad[j];
      m_[i][j] = beta1_ * m_[i][j] + (1 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1 - beta2_) * g * g;
      double mhat = m_[i][j] / bc1;
      double vhat = v_[i][j] / bc2;
      if (weight_decay_ > 0) p->value[j] -= lr_ * weight_decay_ * p->value[j];
      p->value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

namespace {
constexpr char kCkptMagic[8] = {'D', 'M', 'K', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::string& path, const std::string& kind,
                     const nlohmann::json& meta, const ParamStore& params) {
  nlohmann::json manifest = meta;
  manifest["format_version"] = 1;
  manifest["kind"] = kind;
  nlohmann::json arrays = nlohmann::json::array();
  for (const Parameter* p : params.all()) {
    arrays.push_back({{"name", p->name},
                      {"b", p->shape.b},
                      {"c", p->shape.c},
                      {"l", p->shape.l}});
  }
  manifest["arrays"] = arrays;

  std::string mtext = manifest.dump();
  std::vector<char> payload;
  auto put = [&payload](const void* p, std::size_t n) {
    payload.insert(payload.end(), static_cast<const char*>(p),
                   static_cast<const char*>(p) + n);
  };
  std::uint64_t mlen = mtext.size();
  put(&mlen, 8);
  put(mtext.data(), mtext.size());
  for (const Parameter* p : params.all())
    put(p->value.data(), p->value.size() * sizeof(Scalar));

  std::uint32_t crc = std::uint32_t(
      crc32(0, reinterpret_cast<const Bytef*>(payload.data()), uInt(payload.size())));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint: " + path);
  f.write(kCkptMagic, 8);
  f.write(payload.data(), std::streamsize(payload.size()));
  f.write(reinterpret_cast<char*>(&crc), 4);
  if (!f) throw CheckpointError("short write: " + path);
}

Checkpoint load_checkpoint_raw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  std::vector<char> raw((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
  if (raw.size() < 8 + 8 + 4 || std::memcmp(raw.data(), kCkptMagic, 8) != 0)
    throw CheckpointError("corrupt checkpoint (bad magic): " + path);
  const char* payload = raw.data() + 8;
  const std::size_t payload_len = raw.size() - 8 - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, raw.data() + raw.size() - 4, 4);
  std::uint32_t crc = std::uint32_t(
      crc32(0, reinterpret_cast<const Bytef*>(payload), uInt(payload_len)));
  if (crc != stored_crc)
    throw CheckpointError("corrupt checkpoint (crc mismatch): " + path);

  std::uint64_t mlen;
  std::memcpy(&mlen, payload, 8);
  if (8 + mlen > payload_len)
    throw CheckpointError("corrupt checkpoint (manifest overruns file): " + path);
  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(std::string(payload + 8, payload + 8 + mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint (manifest json): " + std::string(e.what()));
  }
  if (!ck.manifest.contains("format_version") ||
      ck.manifest["format_version"].get<int>() != 1)
    throw CheckpointError("unsupported checkpoint format version: " + path);

  std::size_t off = 8 + mlen;
  for (const auto& a : ck.manifest["arrays"]) {
    Shape s{a["b"].get<int>(), a["c"].get<int>(), a["l"].get<int>()};
    std::size_t n = s.elems();
    if (off + n * sizeof(Scalar) > payload_len)
      throw CheckpointError("corrupt checkpoint (array overruns file): " + path);
    std::vector<Scalar> data(n);
    std::memcpy(data.data(), payload + off, n * sizeof(Scalar));
    off += n * sizeof(Scalar);
    ck.arrays.emplace_back(a["name"].get<std::string>(), std::move(data));
  }
  return ck;
}

void restore_params(const Checkpoint& ck, ParamStore& params) {
  for (const auto& [name, data] : ck.arrays) {
    if (!params.has(name))
      throw CheckpointError("checkpoint array has no matching parameter: " + name);
    Parameter& p = params.at(name);
    if (p.value.size() != data.size())
      throw CheckpointError("parameter size mismatch for " + name);
    p.value = data;
  }
  for (const Parameter* p : params.all()) {
    bool found = false;
    for (const auto& [name, _] : ck.arrays)
      if (name == p->name) {
        found = true;
        break;
      }
    if (!found) throw CheckpointError("checkpoint missing parameter: " + p->name);
  }
}

}  // namespace diffmark
