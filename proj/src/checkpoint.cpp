#include "gmflow/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <vector>

#include "gmflow/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace gmflow {

namespace {

constexpr std::array<char, 8> kMagic = {'G', 'M', 'F', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("truncated checkpoint: " + path.string());
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     std::uint64_t config_hash) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  put<std::uint64_t>(out, config_hash);
  for (ParamId id = 0; id < params.size(); ++id) {
    const auto& name = params.name(id);
    const auto& t = params.value(id);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto dim : t.shape()) put<std::uint64_t>(out, dim);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

std::uint64_t load_checkpoint(const std::filesystem::path& path, ParameterStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw CheckpointError("not a checkpoint file: " + path.string());
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get<std::uint32_t>(in, path);
  const auto hash = get<std::uint64_t>(in, path);
  std::set<ParamId> seen;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = get<std::uint32_t>(in, path);
    std::vector<std::size_t> shape(rank);
    for (auto& dim : shape) dim = static_cast<std::size_t>(get<std::uint64_t>(in, path));
    if (!params.contains(name)) throw CheckpointError("checkpoint has unknown parameter " + name);
    const ParamId id = params.id(name);
    Tensor& t = params.value(id);
    if (t.shape() != shape) {
      throw CheckpointError("shape mismatch for " + name + ": checkpoint " +
                            Tensor(shape).shape_string() + " vs model " + t.shape_string());
    }
    in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw CheckpointError("truncated checkpoint: " + path.string());
    seen.insert(id);
  }
  if (seen.size() != params.size()) throw CheckpointError("checkpoint is missing parameters");
  return hash;
}

}  // namespace gmflow
