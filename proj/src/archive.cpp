#include "differ/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "differ/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "archive format assumes a little-endian host");

namespace differ {
namespace {

constexpr char kMagic[8] = {'D', 'I', 'F', 'A', 'R', 'C', 'H', '1'};

}  // namespace

void ArrayArchive::put(const std::string& name, const MatrixF& values) {
  auto it = entries_.find(name);
  if (it == entries_.end()) order_.push_back(name);
  entries_[name] = Entry{{values.rows(), values.cols()}, values};
}

void ArrayArchive::put(const std::string& name, const VectorF& values) {
  auto it = entries_.find(name);
  if (it == entries_.end()) order_.push_back(name);
  entries_[name] = Entry{{values.size()}, values};
}

bool ArrayArchive::has(const std::string& name) const { return entries_.count(name) > 0; }

std::vector<std::string> ArrayArchive::names() const { return order_; }

const MatrixF& ArrayArchive::array(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("archive: no array named '" + name + "'");
  return it->second.data;
}

VectorF ArrayArchive::vector(const std::string& name) const {
  const MatrixF& m = array(name);
  if (m.cols() != 1) throw IoError("archive: array '" + name + "' is not rank-1");
  return m.col(0);
}

const std::vector<Index>& ArrayArchive::shape(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("archive: no array named '" + name + "'");
  return it->second.shape;
}

void ArrayArchive::set_meta(const std::string& key, const nlohmann::json& value) {
  meta_[key] = value;
}

bool ArrayArchive::has_meta(const std::string& key) const { return meta_.contains(key); }

const nlohmann::json& ArrayArchive::meta(const std::string& key) const {
  if (!meta_.contains(key)) throw IoError("archive: no metadata key '" + key + "'");
  return meta_.at(key);
}

void ArrayArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& name : order_) {
    const Entry& e = entries_.at(name);
    nlohmann::json j;
    j["name"] = name;
    j["shape"] = e.shape;
    j["offset"] = offset;
    header["arrays"].push_back(j);
    offset += std::uint64_t(e.data.size()) * sizeof(float);
  }
  header["meta"] = meta_;
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("archive: cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& name : order_) {
    const Entry& e = entries_.at(name);
    // Row-major on disk regardless of Eigen's in-memory layout.
    for (Index r = 0; r < e.data.rows(); ++r) {
      for (Index c = 0; c < e.data.cols(); ++c) {
        const float v = e.data(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
    }
  }
  if (!out) throw IoError("archive: write failed for '" + path.string() + "'");
}

ArrayArchive ArrayArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("archive: cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("archive: '" + path.string() + "' has an unrecognized header");
  }
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) throw IoError("archive: truncated header in '" + path.string() + "'");
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("archive: truncated header in '" + path.string() + "'");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("archive: malformed header JSON in '" + path.string() + "': " + e.what());
  }

  ArrayArchive archive;
  archive.meta_ = header.value("meta", nlohmann::json::object());
  const std::streampos data_start = in.tellg();
  for (const auto& j : header.at("arrays")) {
    const std::string name = j.at("name").get<std::string>();
    const auto shape = j.at("shape").get<std::vector<Index>>();
    const std::uint64_t offset = j.at("offset").get<std::uint64_t>();
    if (shape.empty() || shape.size() > 2) {
      throw IoError("archive: array '" + name + "' has unsupported rank");
    }
    const Index rows = shape[0];
    const Index cols = shape.size() == 2 ? shape[1] : 1;
    MatrixF data(rows, cols);
    in.seekg(data_start + std::streampos(offset));
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) {
        float v;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        data(r, c) = v;
      }
    }
    if (!in) throw IoError("archive: truncated data for array '" + name + "'");
    archive.order_.push_back(name);
    archive.entries_[name] = Entry{shape, std::move(data)};
  }
  return archive;
}

}  // namespace differ
