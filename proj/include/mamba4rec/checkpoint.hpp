#pragma once

#include <string>
#include <vector>

#include "mamba4rec/container.hpp"
#include "mamba4rec/errors.hpp"
#include "mamba4rec/model.hpp"

namespace m4r {

// Metadata record carrying the resolved configuration text.
inline constexpr std::string_view kConfigRecord = "__config__";

template <class T>
std::vector<TensorRecord> params_to_records(const ModelParams<T>& params) {
  std::vector<TensorRecord> out;
  params.for_each([&](const std::string& name, const Tensor<T>& t) {
    TensorRecord r{name, t.shape(), {}};
    r.values.reserve(t.size());
    for (const T v : t.data()) r.values.push_back(static_cast<float>(v));
    out.push_back(std::move(r));
  });
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const ModelParams<T>& params,
                     const std::string& config_text) {
  auto records = params_to_records(params);
  records.push_back(bytes_record(std::string(kConfigRecord), config_text));
  write_container(path, records);
}

struct Checkpoint {
  std::string config_text;
  std::vector<TensorRecord> records;  // parameters only
};

inline Checkpoint read_checkpoint(const std::string& path) {
  Checkpoint ck;
  for (auto& r : read_container(path)) {
    if (r.name == kConfigRecord) {
      ck.config_text = record_bytes(r);
    } else {
      ck.records.push_back(std::move(r));
    }
  }
  return ck;
}

// Copies records into already-initialized params, checking names and shapes.
template <class T>
void load_params(ModelParams<T>& params, const std::vector<TensorRecord>& records) {
  std::size_t used = 0;
  params.for_each([&](const std::string& name, Tensor<T>& t) {
    const TensorRecord* r = find_record(records, name);
    if (!r) throw IoError("checkpoint is missing parameter " + name);
    if (r->shape != t.shape()) {
      throw DimensionError("checkpoint shape mismatch for " + name + ": file " +
                           to_string(r->shape) + ", model " + to_string(t.shape()));
    }
    auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(r->values[i]);
    ++used;
  });
  if (used != records.size()) {
    throw DimensionError("checkpoint holds " + std::to_string(records.size()) +
                         " parameters, model expects " + std::to_string(used));
  }
}

}  // namespace m4r
