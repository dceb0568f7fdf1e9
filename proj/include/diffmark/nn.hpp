// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffmark/rng.hpp"
#include "diffmark/tensor.hpp"

namespace diffmark {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Named parameter collection. Ordering is insertion order, which makes
// checkpoints and optimizer state stable across runs.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Shape shape);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool has(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t param_count() const;
  void zero_grad();
  void freeze(bool on = true);

  // Gradient utilities used by the trainers.
  double grad_norm() const;
  void clip_grad_norm(double max_norm);

  // Byte-exact snapshot/compare (frozen-module integrity checks).
  std::vector<std::vector<Scalar>> snapshot() const;
  bool equals_snapshot(const std::vector<std::vector<Scalar>>& snap) const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> index_;
};

// Initializers -----------------------------------------------------------
void init_uniform_fan_in(Parameter& p, int fan_in, Rng& rng);  // Kaiming-uniform style
void init_zeros(Parameter& p);
void init_ones(Parameter& p);

// Optimizers --------------------------------------------------------------
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);
  void step();
  void zero_grad();
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<Scalar>> m_, v_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;  // decoupled decay (AdamW) when > 0
  long t_ = 0;
};

// Checkpoint archive -------------------------------------------------------
// Single file: magic, format version, length-prefixed JSON manifest, raw
// float64 arrays in manifest order, trailing CRC32 of everything before it.
struct Checkpoint {
  nlohmann::json manifest;
  // array name -> data, in manifest order
  std::vector<std::pair<std::string, std::vector<Scalar>>> arrays;
};

void save_checkpoint(const std::string& path, const std::string& kind,
                     const nlohmann::json& meta, const ParamStore& params);
Checkpoint load_checkpoint_raw(const std::string& path);
// Validates kind + meta fields the caller cares about, then fills `params`
// (shapes must match exactly).
void restore_params(const Checkpoint& ck, ParamStore& params);

}  // namespace diffmark
