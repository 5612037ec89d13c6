#include "magicvid/checkpoint.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <vector>

#include "magicvid/errors.hpp"
#include "magicvid/raw_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace magicvid {

void save_checkpoint(const ParamStore<float>& params, const json& meta, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);

  json tensors = json::array();
  std::vector<unsigned char> blob;
  int64_t offset = 0;
  for (const auto& name : params.names()) {
    const TensorF& t = params.get(name);
    const int64_t bytes = t.numel() * 4;
    json entry;
    entry["name"] = name;
    entry["dtype"] = "f32";
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    entry["length"] = bytes;
    tensors.push_back(std::move(entry));
    std::vector<unsigned char> packed;
    pack_f32_le(t.data(), t.numel(), packed);
    blob.insert(blob.end(), packed.begin(), packed.end());
    offset += bytes;
  }

  json manifest;
  manifest["format"] = "magicvid-checkpoint-v1";
  manifest["meta"] = meta;
  manifest["tensors"] = std::move(tensors);
  {
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot write checkpoint manifest: " + dir);
    f << manifest.dump(1) << "\n";
  }
  {
    std::ofstream f(dir + "/weights.bin", std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint blob: " + dir);
    f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("checkpoint blob write failed: " + dir);
  }
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  json manifest;
  {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot open checkpoint manifest: " + dir + "/manifest.json");
    try {
      f >> manifest;
    } catch (const json::exception& e) {
      throw IoError("checkpoint manifest parse error: " + std::string(e.what()));
    }
  }
  if (manifest.value("format", "") != "magicvid-checkpoint-v1") {
    throw IoError("checkpoint manifest: unknown format field");
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw IoError("checkpoint manifest: missing tensors array");
  }

  std::ifstream blob(dir + "/weights.bin", std::ios::binary | std::ios::ate);
  if (!blob) throw IoError("cannot open checkpoint blob: " + dir + "/weights.bin");
  const int64_t blob_size = static_cast<int64_t>(blob.tellg());

  struct Entry {
    std::string name;
    std::vector<int> shape;
    int64_t offset, length;
  };
  std::vector<Entry> entries;
  for (const auto& j : manifest["tensors"]) {
    Entry e;
    try {
      e.name = j.at("name").get<std::string>();
      if (j.at("dtype").get<std::string>() != "f32") {
        throw IoError("checkpoint tensor " + e.name + ": unsupported dtype");
      }
      e.shape = j.at("shape").get<std::vector<int>>();
      e.offset = j.at("offset").get<int64_t>();
      e.length = j.at("length").get<int64_t>();
    } catch (const json::exception& ex) {
      throw IoError("checkpoint manifest entry malformed: " + std::string(ex.what()));
    }
    int64_t numel = 1;
    for (int d : e.shape) {
      if (d < 0) throw IoError("checkpoint tensor " + e.name + ": negative dimension");
      numel *= d;
    }
    if (e.length != numel * 4) {
      throw IoError("checkpoint tensor " + e.name + ": length " + std::to_string(e.length) +
                    " does not match shape (expected " + std::to_string(numel * 4) + " bytes)");
    }
    if (e.offset < 0 || e.offset + e.length > blob_size) {
      throw IoError("checkpoint tensor " + e.name + ": offset " + std::to_string(e.offset) +
                    " + length " + std::to_string(e.length) + " exceeds blob of " +
                    std::to_string(blob_size) + " bytes");
    }
    entries.push_back(std::move(e));
  }

  // overlap check over offset-sorted spans
  std::vector<const Entry*> sorted;
  for (const auto& e : entries) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(),
            [](const Entry* a, const Entry* b) { return a->offset < b->offset; });
  for (size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->offset < sorted[i - 1]->offset + sorted[i - 1]->length) {
      throw IoError("checkpoint tensors " + sorted[i - 1]->name + " and " + sorted[i]->name +
                    " overlap in the blob");
    }
  }

  blob.seekg(0);
  std::vector<unsigned char> bytes(static_cast<size_t>(blob_size));
  blob.read(reinterpret_cast<char*>(bytes.data()), blob_size);
  if (!blob) throw IoError("checkpoint blob read failed: " + dir);

  LoadedCheckpoint out;
  out.meta = manifest.value("meta", json::object());
  for (const auto& e : entries) {
    TensorF t(e.shape);
    unpack_f32_le(bytes.data() + e.offset, t.numel(), t.data());
    out.params.add(e.name, std::move(t));
  }
  return out;
}

}  // namespace magicvid
