#pragma once

/// Model checkpoints and trajectory corpora on disk.
///
/// Checkpoint layout:
///   bytes 0..7   magic "KFLOWCK1"
///   bytes 8..15  u64 LE length of the JSON metadata
///   ...          JSON metadata (kind, specs, tensor shapes, crc32 of blob)
///   ...          blob: LE float64 parameter tensors in declaration order

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <string>
#include <vector>

#include <json.hpp>

#include "kflow/cfm.hpp"
#include "kflow/datasets.hpp"
#include "kflow/error.hpp"
#include "kflow/io.hpp"
#include "kflow/koopman.hpp"
#include "kflow/nn.hpp"
#include "kflow/tensor.hpp"

namespace kflow {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[] = "KFLOWCK1";
inline constexpr std::size_t kMagicLen = 8;

struct Checkpoint {
  json meta;
  std::vector<Tensor> tensors;

  std::string kind() const { return meta.value("kind", ""); }
};

/// Creation time: SOURCE_DATE_EPOCH when set (reproducible builds), else now.
inline std::string creation_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
    try {
      t = static_cast<std::time_t>(std::stoll(env));
    } catch (...) {
    }
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string serialize_checkpoint(Checkpoint ck) {
  std::vector<const Tensor*> ptrs;
  json shapes = json::array();
  for (const auto& t : ck.tensors) {
    ptrs.push_back(&t);
    shapes.push_back(t.shape());
  }
  const std::string blob = encode_blob(ptrs);
  ck.meta["tensor_shapes"] = shapes;
  ck.meta["blob_bytes"] = blob.size();
  ck.meta["checksum"] = crc32_bytes(blob);
  if (!ck.meta.contains("created")) ck.meta["created"] = creation_timestamp();
  const std::string meta = ck.meta.dump();
  std::string out(kCheckpointMagic, kMagicLen);
  append_u64_le(out, meta.size());
  out += meta;
  out += blob;
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  if (bytes.size() < kMagicLen + 8) throw IoError(origin + ": file too short to be a checkpoint");
  const std::string magic = bytes.substr(0, kMagicLen);
  if (magic != std::string(kCheckpointMagic, kMagicLen)) {
    if (magic.rfind("KFLOWCK", 0) == 0)
      throw IoError(origin + ": unsupported checkpoint version tag '" + magic + "' (expected KFLOWCK1)");
    throw IoError(origin + ": not a kflow checkpoint (bad magic)");
  }
  const std::uint64_t meta_len = read_u64_le(bytes.data() + kMagicLen);
  if (meta_len > bytes.size() - kMagicLen - 8) throw IoError(origin + ": truncated metadata");
  Checkpoint ck;
  try {
    ck.meta = json::parse(bytes.substr(kMagicLen + 8, meta_len));
  } catch (const json::exception& e) {
    throw IoError(origin + ": corrupt metadata: " + e.what());
  }
  const std::string blob = bytes.substr(kMagicLen + 8 + meta_len);
  try {
    if (blob.size() != ck.meta.at("blob_bytes").get<std::size_t>())
      throw IoError(origin + ": blob is " + std::to_string(blob.size()) + " bytes, metadata says " +
                    ck.meta.at("blob_bytes").dump());
    if (crc32_bytes(blob) != ck.meta.at("checksum").get<std::uint32_t>())
      throw IoError(origin + ": checksum mismatch (file corrupted)");
    std::size_t off = 0;
    for (const auto& js : ck.meta.at("tensor_shapes")) {
      const Shape shape = js.get<Shape>();
      const std::size_t n = shape_size(shape);
      if (off + 8 * n > blob.size()) throw IoError(origin + ": blob shorter than declared tensors");
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i) data[i] = read_f64_le(blob.data() + off + 8 * i);
      off += 8 * n;
      ck.tensors.emplace_back(shape, std::move(data));
    }
    if (off != blob.size()) throw IoError(origin + ": trailing bytes after declared tensors");
  } catch (const json::exception& e) {
    throw IoError(origin + ": malformed metadata: " + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path), path); }

// ---------------------------------------------------------------------------
// Model <-> checkpoint

inline json to_json(const MlpSpec& s) {
  return {{"input_dim", s.input_dim},
          {"hidden_dim", s.hidden_dim},
          {"depth", s.depth},
          {"output_dim", s.output_dim},
          {"activation", "silu"}};
}

inline MlpSpec mlp_spec_from_json(const json& j) {
  MlpSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  s.depth = j.at("depth").get<std::size_t>();
  s.output_dim = j.at("output_dim").get<std::size_t>();
  if (j.value("activation", "silu") != "silu") throw IoError("unsupported activation " + j.at("activation").dump());
  s.validate();
  return s;
}

inline json to_json(const Distribution2D& d) {
  return {{"kind", to_string(d.kind)}, {"radius", d.radius}, {"noise", d.noise}, {"scale", d.scale}};
}

inline Distribution2D distribution_from_json(const json& j) {
  Distribution2D d;
  d.kind = dist_kind_from_string(j.at("kind").get<std::string>());
  d.radius = j.at("radius").get<double>();
  d.noise = j.at("noise").get<double>();
  d.scale = j.at("scale").get<double>();
  return d;
}

/// Task description stored alongside a model.
struct TaskInfo {
  Distribution2D prior = Distribution2D::standard(DistKind::Gauss);
  Distribution2D target = Distribution2D::standard(DistKind::EightGauss);
  ConditionalPath path = ConditionalPath::standard(PathKind::OT);
  std::uint64_t seed = 0;
};

inline json to_json(const TaskInfo& t) {
  return {{"prior", to_json(t.prior)},
          {"target", to_json(t.target)},
          {"path", to_string(t.path.kind)},
          {"sigma", t.path.sigma},
          {"seed", t.seed}};
}

inline TaskInfo task_from_json(const json& j) {
  TaskInfo t;
  t.prior = distribution_from_json(j.at("prior"));
  t.target = distribution_from_json(j.at("target"));
  t.path.kind = path_kind_from_string(j.at("path").get<std::string>());
  t.path.sigma = j.at("sigma").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

inline Checkpoint to_checkpoint(const VectorFieldModel& m, const TaskInfo& task) {
  Checkpoint ck;
  ck.meta = {{"kind", "vector_field"}, {"format_version", 1}, {"spec", to_json(m.spec)}, {"task", to_json(task)},
             {"seed", task.seed}};
  ck.tensors = m.params;
  return ck;
}

inline VectorFieldModel vector_field_from_checkpoint(const Checkpoint& ck, TaskInfo* task = nullptr) {
  if (ck.kind() != "vector_field") throw IoError("checkpoint holds a '" + ck.kind() + "' model, not a vector field");
  try {
    VectorFieldModel m;
    m.spec = mlp_spec_from_json(ck.meta.at("spec"));
    m.params = ck.tensors;
    check_params(m.spec, m.params);
    if (task) *task = task_from_json(ck.meta.at("task"));
    return m;
  } catch (const json::exception& e) {
    throw IoError(std::string("vector field checkpoint: ") + e.what());
  } catch (const ContractViolation& e) {
    throw IoError(std::string("vector field checkpoint: ") + e.what());
  }
}

inline json koopman_layout(std::size_t p_learned) {
  json l = json::array({"x1", "x2", "t", "1"});
  for (std::size_t i = 1; i <= p_learned; ++i) l.push_back("g" + std::to_string(i));
  return l;
}

inline Checkpoint to_checkpoint(const KoopmanModel& m, const TaskInfo& task, std::uint32_t vf_checksum = 0) {
  Checkpoint ck;
  ck.meta = {{"kind", "koopman"},
             {"format_version", 1},
             {"encoder_spec", to_json(m.encoder_spec)},
             {"p_learned", m.p_learned()},
             {"p_total", m.p_total()},
             {"layout", koopman_layout(m.p_learned())},
             {"task", to_json(task)},
             {"seed", task.seed},
             {"vector_field_checksum", vf_checksum}};
  ck.tensors = m.encoder_params;
  ck.tensors.push_back(m.generator);
  return ck;
}

inline KoopmanModel koopman_from_checkpoint(const Checkpoint& ck, TaskInfo* task = nullptr) {
  if (ck.kind() != "koopman") throw IoError("checkpoint holds a '" + ck.kind() + "' model, not a Koopman model");
  try {
    KoopmanModel m;
    m.encoder_spec = mlp_spec_from_json(ck.meta.at("encoder_spec"));
    const auto p_learned = ck.meta.at("p_learned").get<std::size_t>();
    if (ck.tensors.empty()) throw IoError("koopman checkpoint has no tensors");
    m.encoder_params.assign(ck.tensors.begin(), ck.tensors.end() - 1);
    m.generator = ck.tensors.back();
    if ((p_learned == 0) != m.encoder_params.empty()) throw IoError("koopman checkpoint: encoder/p_learned mismatch");
    m.validate();
    if (m.p_total() != ck.meta.at("p_total").get<std::size_t>()) throw IoError("koopman checkpoint: p_total mismatch");
    if (task) *task = task_from_json(ck.meta.at("task"));
    return m;
  } catch (const json::exception& e) {
    throw IoError(std::string("koopman checkpoint: ") + e.what());
  } catch (const ContractViolation& e) {
    throw IoError(std::string("koopman checkpoint: ") + e.what());
  }
}

/// CRC-32 of a model's parameter blob (used to tie derived artifacts to it).
inline std::uint32_t model_checksum(const VectorFieldModel& m) {
  std::vector<const Tensor*> ptrs;
  for (const auto& p : m.params) ptrs.push_back(&p);
  return crc32_bytes(encode_blob(ptrs));
}

// ---------------------------------------------------------------------------
// Trajectory corpus: <base>.json manifest + <base>.bin blob
// (states -> times -> velocities -> terminals, LE float64).

inline void save_trajectories(const std::string& base, const TrajectorySet& set, std::uint32_t vf_checksum) {
  const std::string blob = encode_blob({&set.states, &set.times, &set.velocities, &set.terminals});
  const std::string bin_path = base + ".bin";
  json manifest = {{"kind", "trajectory_set"},
                   {"n_traj", set.n_traj()},
                   {"n_points", set.n_points()},
                   {"seed", set.seed},
                   {"model_checksum", vf_checksum},
                   {"order", {"states", "times", "velocities", "terminals"}},
                   {"shapes",
                    {set.states.shape(), set.times.shape(), set.velocities.shape(), set.terminals.shape()}},
                   {"blob", bin_path.substr(bin_path.find_last_of('/') + 1)},
                   {"blob_bytes", blob.size()},
                   {"checksum", crc32_bytes(blob)}};
  write_file(bin_path, blob);
  write_file(base + ".json", manifest.dump(2) + "\n");
}

inline TrajectorySet load_trajectories(const std::string& base, std::uint32_t* model_checksum = nullptr) {
  json manifest;
  try {
    manifest = json::parse(read_file(base + ".json"));
  } catch (const json::exception& e) {
    throw IoError(base + ".json: " + e.what());
  }
  const std::string blob = read_file(base + ".bin");
  try {
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>() ||
        crc32_bytes(blob) != manifest.at("checksum").get<std::uint32_t>())
      throw IoError(base + ".bin: checksum mismatch (file corrupted)");
    TrajectorySet set;
    set.seed = manifest.at("seed").get<std::uint64_t>();
    if (model_checksum) *model_checksum = manifest.at("model_checksum").get<std::uint32_t>();
    Tensor* dst[4] = {&set.states, &set.times, &set.velocities, &set.terminals};
    std::size_t off = 0;
    for (int i = 0; i < 4; ++i) {
      const Shape shape = manifest.at("shapes").at(i).get<Shape>();
      std::vector<double> data(shape_size(shape));
      for (std::size_t k = 0; k < data.size(); ++k) data[k] = read_f64_le(blob.data() + off + 8 * k);
      off += 8 * data.size();
      *dst[i] = Tensor(shape, std::move(data));
    }
    return set;
  } catch (const json::exception& e) {
    throw IoError(base + ".json: " + e.what());
  }
}

}  // namespace kflow
