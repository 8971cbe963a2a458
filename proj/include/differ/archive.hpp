#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "differ/types.hpp"

namespace differ {

// Flat binary container: magic, little-endian u64 header length, a JSON
// header listing {name, shape, offset} per array plus free-form metadata,
// then raw little-endian float32 data in row-major order.
class ArrayArchive {
 public:
  void put(const std::string& name, const MatrixF& values);
  void put(const std::string& name, const VectorF& values);

  bool has(const std::string& name) const;
  std::vector<std::string> names() const;
  // Arrays round-trip as matrices; a rank-1 array comes back as n x 1.
  const MatrixF& array(const std::string& name) const;
  VectorF vector(const std::string& name) const;
  const std::vector<Index>& shape(const std::string& name) const;

  void set_meta(const std::string& key, const nlohmann::json& value);
  bool has_meta(const std::string& key) const;
  const nlohmann::json& meta(const std::string& key) const;

  void save(const std::filesystem::path& path) const;
  static ArrayArchive load(const std::filesystem::path& path);

 private:
  struct Entry {
    std::vector<Index> shape;
    MatrixF data;  // rank-1 arrays stored as n x 1
  };
  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
  nlohmann::json meta_ = nlohmann::json::object();
};

}  // namespace differ
