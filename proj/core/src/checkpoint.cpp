#include "hardaware/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "hardaware/errors.hpp"

namespace hardaware {

namespace {

constexpr const char* kFormat = "hardaware-checkpoint";
constexpr int kVersion = 1;

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

const Tensor& Checkpoint::at(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  throw FormatError("checkpoint has no tensor named '" + name + "'", 0);
}

void save_checkpoint(const std::filesystem::path& manifest, const Checkpoint& checkpoint) {
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  const std::filesystem::path blob = std::filesystem::path(manifest).replace_extension(".bin");

  nlohmann::json entries = nlohmann::json::array();
  std::ofstream out(blob, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + blob.string());
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    entries.push_back({{"name", name}, {"shape", tensor.shape()}, {"offset", offset}});
    for (double v : tensor.data()) {
      const std::uint64_t le = to_little_endian(std::bit_cast<std::uint64_t>(v));
      out.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
    offset += tensor.size() * sizeof(double);
  }
  if (!out) throw std::runtime_error("failed writing " + blob.string());

  nlohmann::json doc{{"format", kFormat},
                     {"version", kVersion},
                     {"blob", blob.filename().string()},
                     {"blob_bytes", offset},
                     {"tensors", std::move(entries)},
                     {"meta", checkpoint.meta}};
  std::ofstream mf(manifest, std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write " + manifest.string());
  mf << doc.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream mf(manifest);
  if (!mf) throw std::runtime_error("cannot open checkpoint manifest " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint manifest is not JSON: " + std::string(e.what()), e.byte);
  }
  if (doc.value("format", "") != kFormat) throw FormatError("not a hardaware checkpoint manifest", 0);

  const std::filesystem::path blob = manifest.parent_path() / doc.at("blob").get<std::string>();
  std::ifstream in(blob, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint blob " + blob.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint cp;
  cp.meta = doc.value("meta", nlohmann::json::object());
  for (const auto& e : doc.at("tensors")) {
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const std::size_t count = shape_size(shape);
    if (offset + count * sizeof(double) > bytes.size()) {
      throw FormatError("checkpoint blob truncated while reading '" + e.at("name").get<std::string>() + "'",
                        bytes.size());
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t le = 0;
      std::memcpy(&le, bytes.data() + offset + i * sizeof(double), sizeof le);
      values[i] = std::bit_cast<double>(to_little_endian(le));
    }
    cp.tensors.push_back({e.at("name").get<std::string>(), Tensor(shape, std::move(values))});
  }
  return cp;
}

}  // namespace hardaware
