#include "veil/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include <json.hpp>

#include "veil/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "weights.bin is little-endian; byte swapping is not implemented");

namespace veil {

using nlohmann::ordered_json;

void save_weights(const std::filesystem::path& directory, const std::vector<NamedTensor>& tensors) {
  std::filesystem::create_directories(directory);
  ordered_json header;
  header["tensors"] = ordered_json::array();

  std::ofstream bin(directory / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw DataError("save_weights: cannot open " + (directory / "weights.bin").string());

  std::uint64_t offset = 0;
  for (const NamedTensor& nt : tensors) {
    ordered_json entry;
    entry["name"] = nt.name;
    entry["shape"] = nt.tensor.shape();
    entry["offset"] = offset;
    header["tensors"].push_back(entry);
    const std::size_t bytes = nt.tensor.size() * sizeof(double);
    bin.write(reinterpret_cast<const char*>(nt.tensor.data()), static_cast<std::streamsize>(bytes));
    offset += bytes;
  }
  if (!bin) throw DataError("save_weights: short write to weights.bin");
  bin.close();

  std::ofstream hdr(directory / "header.json", std::ios::trunc);
  if (!hdr) throw DataError("save_weights: cannot open " + (directory / "header.json").string());
  hdr << header.dump(2) << "\n";
}

std::vector<NamedTensor> load_weights(const std::filesystem::path& directory) {
  std::ifstream hdr(directory / "header.json");
  if (!hdr) throw DataError("load_weights: missing " + (directory / "header.json").string());
  ordered_json header;
  try {
    hdr >> header;
  } catch (const std::exception& e) {
    throw DataError("load_weights: malformed header.json: " + std::string(e.what()));
  }

  std::ifstream bin(directory / "weights.bin", std::ios::binary);
  if (!bin) throw DataError("load_weights: missing " + (directory / "weights.bin").string());

  std::vector<NamedTensor> out;
  for (const auto& entry : header.at("tensors")) {
    NamedTensor nt;
    nt.name = entry.at("name").get<std::string>();
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    bin.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!bin) {
      throw DataError("load_weights: weights.bin truncated while reading tensor '" + nt.name + "'");
    }
    nt.tensor = t;
    out.push_back(std::move(nt));
  }
  return out;
}

}  // namespace veil
