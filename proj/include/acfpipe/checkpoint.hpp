#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "acfpipe/acf.hpp"
#include "acfpipe/errors.hpp"
#include "acfpipe/nn/optim.hpp"
#include "acfpipe/nn/tape.hpp"

namespace acfpipe::ckpt {

using nlohmann::json;

// Binary model container. Layout, all integers little-endian:
//
//   magic   "ACFPIPE\0"
//   u32     format version (currently 1)
//   u64     metadata length, then that many bytes of UTF-8 JSON
//   u32     array count
//   per array:
//     u16   name length, then the name bytes
//     u8    dtype (0 = float64, 1 = float32)
//     u8    rank, then rank x u64 dims
//     payload, numel * sizeof(scalar) bytes
//   u32     CRC-32 over everything above
//
// Reads reject wrong magic/CRC/truncation with IntegrityError and an
// unknown version with VersionError.

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointArray {
  std::uint8_t dtype = 0;  // 0: f64, 1: f32
  std::vector<std::uint64_t> dims;
  std::vector<double> f64;
  std::vector<float> f32;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct Checkpoint {
  json meta = json::object();
  std::vector<std::pair<std::string, CheckpointArray>> arrays;

  bool has(const std::string& name) const;
  const CheckpointArray& at(const std::string& name) const;

  void add(const std::string& name, const nn::Tensor<double>& t);
  void add(const std::string& name, const nn::Tensor<float>& t);
  void add(const std::string& name, const Eigen::MatrixXd& m);

  // Copies into a preallocated tensor; shape must match exactly.
  template <typename Scalar>
  void fill(const std::string& name, nn::Tensor<Scalar>& t) const {
    const auto& a = at(name);
    if (a.dims.size() != t.shape.size()) {
      throw IntegrityError("checkpoint array '" + name + "' has rank " +
                           std::to_string(a.dims.size()) + ", expected " +
                           std::to_string(t.shape.size()));
    }
    for (std::size_t i = 0; i < a.dims.size(); ++i) {
      if (static_cast<Eigen::Index>(a.dims[i]) != t.shape[i]) {
        throw IntegrityError("checkpoint array '" + name + "' dimension " +
                             std::to_string(i) + " mismatch");
      }
    }
    const bool from64 = a.dtype == 0;
    for (Eigen::Index i = 0; i < t.numel(); ++i) {
      t.values[i] = from64 ? static_cast<Scalar>(a.f64[i]) : static_cast<Scalar>(a.f32[i]);
    }
  }

  Eigen::MatrixXd matrix(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32(const std::uint8_t* data, std::size_t n, std::uint32_t seed = 0);

// ---- typed adapters ------------------------------------------------------

template <typename Scalar>
void save_parameters(Checkpoint& c, const std::vector<nn::Parameter<Scalar>*>& params) {
  for (const auto* p : params) c.add("param/" + p->name, p->value);
}

template <typename Scalar>
void load_parameters(const Checkpoint& c, const std::vector<nn::Parameter<Scalar>*>& params) {
  for (auto* p : params) c.fill("param/" + p->name, p->value);
}

template <typename Scalar>
void save_bn_states(Checkpoint& c,
                    const std::vector<std::pair<std::string, nn::BatchNormState<Scalar>*>>& states) {
  for (const auto& [name, s] : states) {
    c.add("bn/" + name + "/mean", s->running_mean);
    c.add("bn/" + name + "/var", s->running_var);
  }
}

template <typename Scalar>
void load_bn_states(const Checkpoint& c,
                    const std::vector<std::pair<std::string, nn::BatchNormState<Scalar>*>>& states) {
  for (auto& [name, s] : states) {
    c.fill("bn/" + name + "/mean", s->running_mean);
    c.fill("bn/" + name + "/var", s->running_var);
  }
}

template <typename Scalar>
void save_adam(Checkpoint& c, const nn::AdamState<Scalar>& state) {
  c.meta["adam_step"] = state.step;
  int i = 0;
  for (const auto& slot : state.slots) {
    const std::string base = "adam/" + std::to_string(i++);
    nn::Tensor<Scalar> m({slot.m.size()}), v({slot.v.size()});
    m.values = slot.m;
    v.values = slot.v;
    c.add(base + "/m", m);
    c.add(base + "/v", v);
  }
}

template <typename Scalar>
void load_adam(const Checkpoint& c, nn::AdamState<Scalar>& state,
               const std::vector<nn::Parameter<Scalar>*>& params) {
  state.step = c.meta.at("adam_step").get<long>();
  state.slots.clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string base = "adam/" + std::to_string(i);
    if (!c.has(base + "/m")) break;
    nn::Tensor<Scalar> m({params[i]->value.numel()}), v({params[i]->value.numel()});
    c.fill(base + "/m", m);
    c.fill(base + "/v", v);
    state.slots.push_back({m.values, v.values});
  }
}

void save_standardizer(Checkpoint& c, const acf::AcfStandardizer& s);
acf::AcfStandardizer load_standardizer(const Checkpoint& c);

}  // namespace acfpipe::ckpt
