#pragma once

// Single-file checkpoint archive:
//
//   bytes 0..7   magic "TEICKPT1"
//   bytes 8..15  header length L (uint64, little endian)
//   next L bytes UTF-8 JSON header
//   remainder    tensor payload, float64 little endian, column-major
//
// The header carries free-form metadata plus a "tensors" array of
// {"name", "shape": [rows, cols], "dtype": "f64", "offset", "count"} entries,
// so the payload can be read without this library.

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "tei/datasets.hpp"
#include "tei/errors.hpp"
#include "tei/types.hpp"

namespace tei {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

struct Archive {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Matrix> tensors;
};

inline constexpr char archive_magic[8] = {'T', 'E', 'I', 'C', 'K', 'P', 'T', '1'};

inline void write_archive(const std::string& path, const Archive& a) {
  nlohmann::json header = a.header;
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : a.tensors) {
    const auto count = static_cast<std::uint64_t>(m.size());
    index.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"dtype", "f64"}, {"offset", offset}, {"count", count}});
    offset += count;
  }
  header["tensors"] = index;
  const std::string h = header.dump();
  detail::write_atomically(path, [&](std::ostream& out) {
    out.write(archive_magic, sizeof(archive_magic));
    const std::uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, m] : a.tensors)
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  });
}

inline Archive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, archive_magic, sizeof(magic)) != 0) throw ParseError("'" + path + "' is not a checkpoint archive");
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError("'" + path + "': truncated header");
  Archive a;
  try {
    a.header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("'" + path + "': corrupt header: " + e.what());
  }
  const auto payload_start = in.tellg();
  for (const auto& t : a.header.at("tensors")) {
    const auto rows = t.at("shape").at(0).get<Eigen::Index>();
    const auto cols = t.at("shape").at(1).get<Eigen::Index>();
    if (t.at("dtype").get<std::string>() != "f64") throw ParseError("'" + path + "': unsupported dtype");
    Matrix m(rows, cols);
    in.seekg(payload_start + static_cast<std::streamoff>(sizeof(double) * t.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw ParseError("'" + path + "': truncated tensor '" + t.at("name").get<std::string>() + "'");
    a.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  a.header.erase("tensors");
  return a;
}

}  // namespace tei
