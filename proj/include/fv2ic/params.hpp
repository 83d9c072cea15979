#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fv2ic/autodiff.hpp"
#include "fv2ic/errors.hpp"
#include "fv2ic/tensor.hpp"

namespace fv2ic {

// Name + shape of one parameter tensor. The ordered list of these is the
// manifest: the contract that makes aggregation, checkpointing and
// communication accounting line up across clients and server.
struct ParamSpec {
  std::string name;
  std::vector<int> shape;

  bool operator==(const ParamSpec&) const = default;
};

using Manifest = std::vector<ParamSpec>;

// Flat, ordered collection of named parameter tensors. This is the unit of
// aggregation and of client<->server communication; exchanging it copies by
// value, so no mutable state crosses the boundary.
struct ModelParams {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  Manifest manifest() const {
    Manifest m;
    m.reserve(names.size());
    for (std::size_t i = 0; i < names.size(); ++i) m.push_back({names[i], tensors[i].shape()});
    return m;
  }

  int total_scalars() const {
    int n = 0;
    for (const Tensor& t : tensors) n += t.size();
    return n;
  }

  // Wire size: parameters travel as little-endian float32.
  std::uint64_t payload_bytes() const { return 4ull * static_cast<std::uint64_t>(total_scalars()); }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_scalars()));
    for (const Tensor& t : tensors) flat.insert(flat.end(), t.values().begin(), t.values().end());
    return flat;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != static_cast<std::size_t>(total_scalars())) {
      throw ContractViolation("unflatten: size mismatch");
    }
    std::size_t off = 0;
    for (Tensor& t : tensors) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + t.values().size()),
                t.values().begin());
      off += t.values().size();
    }
  }
};

inline bool same_manifest(const ModelParams& a, const ModelParams& b) {
  return a.manifest() == b.manifest();
}

// Live parameters of a model under training: ordered (name, leaf Var) pairs.
// Construction order fixes the manifest order.
class ParamRegistry {
 public:
  Var add(const std::string& name, Tensor init) {
    Var v = leaf(std::move(init));
    entries_.emplace_back(name, v);
    return v;
  }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    out.reserve(entries_.size());
    for (const auto& [name, v] : entries_) out.push_back(v);
    return out;
  }

  Manifest manifest() const {
    Manifest m;
    m.reserve(entries_.size());
    for (const auto& [name, v] : entries_) m.push_back({name, v->value.shape()});
    return m;
  }

  int total_scalars() const {
    int n = 0;
    for (const auto& [name, v] : entries_) n += v->value.size();
    return n;
  }

  ModelParams snapshot() const {
    ModelParams p;
    p.names.reserve(entries_.size());
    p.tensors.reserve(entries_.size());
    for (const auto& [name, v] : entries_) {
      p.names.push_back(name);
      p.tensors.push_back(v->value);
    }
    return p;
  }

  void load(const ModelParams& p) {
    if (p.names.size() != entries_.size()) throw ProtocolError("param manifest size mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& [name, v] = entries_[i];
      if (p.names[i] != name || p.tensors[i].shape() != v->value.shape()) {
        throw ProtocolError("param manifest mismatch at " + name);
      }
      v->value = p.tensors[i];
    }
  }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

}  // namespace fv2ic
