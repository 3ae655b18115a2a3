#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "presage/errors.hpp"
#include "presage/tensor.hpp"

namespace presage {

// A checkpoint is a directory holding manifest.json (scalar values plus the
// ordered list of tensor names and shapes) and tensors.stf (the STF1 records
// in manifest order).
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::ordered_json scalars = nlohmann::ordered_json::object();

  void add(const std::string& name, Tensor t) {
    tensors.emplace_back(name, std::move(t));
  }

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw FormatError("checkpoint: missing tensor '" + name + "'");
  }

  bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return true;
    }
    return false;
  }

  double scalar(const std::string& name) const {
    if (!scalars.contains(name)) {
      throw FormatError("checkpoint: missing scalar '" + name + "'");
    }
    return scalars[name].get<double>();
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    nlohmann::ordered_json manifest;
    manifest["scalars"] = scalars;
    auto list = nlohmann::ordered_json::array();
    for (const auto& [name, t] : tensors) {
      nlohmann::ordered_json entry;
      entry["name"] = name;
      entry["dims"] = t.dims();
      list.push_back(entry);
    }
    manifest["tensors"] = list;
    {
      std::ofstream os(dir + "/manifest.json");
      if (!os) throw IoError("cannot write checkpoint manifest in " + dir);
      os << manifest.dump(2) << "\n";
    }
    {
      std::ofstream os(dir + "/tensors.stf", std::ios::binary);
      if (!os) throw IoError("cannot write checkpoint tensors in " + dir);
      for (const auto& [name, t] : tensors) write_stf1(os, t);
    }
  }

  static Checkpoint load(const std::string& dir) {
    std::ifstream ms(dir + "/manifest.json");
    if (!ms) throw IoError("cannot open checkpoint manifest: " + dir);
    nlohmann::ordered_json manifest;
    try {
      ms >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("checkpoint manifest " + dir + ": " + e.what());
    }
    Checkpoint ck;
    ck.scalars = manifest.value("scalars", nlohmann::ordered_json::object());
    std::ifstream ts(dir + "/tensors.stf", std::ios::binary);
    if (!ts) throw IoError("cannot open checkpoint tensors: " + dir);
    for (const auto& entry : manifest["tensors"]) {
      auto t = read_stf1(ts);
      if (!t) throw FormatError("checkpoint " + dir + ": tensor file shorter than manifest");
      const std::string name = entry["name"].get<std::string>();
      const auto dims = entry["dims"].get<std::vector<uint32_t>>();
      if (t->dims() != dims) {
        throw FormatError("checkpoint " + dir + ": tensor '" + name + "' shape mismatch");
      }
      ck.add(name, std::move(*t));
    }
    return ck;
  }
};

}  // namespace presage
