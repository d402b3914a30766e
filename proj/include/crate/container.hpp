#pragma once

#include "crate/numerics.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace crate {

static_assert(std::endian::native == std::endian::little,
              "container payloads are little-endian");

using json = nlohmann::json;

template <class S>
constexpr const char* precision_name() {
  if constexpr (sizeof(S) == 4) return "f32";
  else return "f64";
}

/// One named tensor: dims plus a raw little-endian payload whose scalar width
/// comes from the container header's "precision" field.
struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::string payload;

  std::uint64_t elem_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct Container {
  json header;
  std::vector<TensorRecord> tensors;

  const TensorRecord& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw DataError("container: missing tensor " + name);
  }
};

namespace detail {

inline constexpr char kMagic[4] = {'C', 'R', 'A', '1'};
inline constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(std::istream& in, const std::string& what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (in.gcount() != sizeof(T)) throw DataError("container: truncated " + what);
  return v;
}

}  // namespace detail

inline std::string serialize_container(const json& header,
                                       const std::vector<TensorRecord>& tensors) {
  const std::string htext = header.dump();
  std::string out;
  out.append(detail::kMagic, 4);
  detail::put(out, detail::kVersion);
  detail::put(out, static_cast<std::uint64_t>(htext.size()));
  out += htext;
  for (const auto& t : tensors) {
    detail::put(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put(out, d);
    out += t.payload;
  }
  return out;
}

inline void write_container(const std::string& path, const json& header,
                            const std::vector<TensorRecord>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("container: cannot write " + path);
  const std::string bytes = serialize_container(header, tensors);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("container: short write to " + path);
}

inline Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("container: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, detail::kMagic, 4) != 0)
    throw DataError("container: bad magic in " + path);
  const auto version = detail::take<std::uint32_t>(in, "version");
  if (version != detail::kVersion)
    throw DataError("container: unsupported version " + std::to_string(version));
  const auto hlen = detail::take<std::uint64_t>(in, "header length");
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<std::uint64_t>(in.gcount()) != hlen)
    throw DataError("container: truncated header");
  Container c;
  c.header = json::parse(htext, nullptr, false);
  if (c.header.is_discarded()) throw DataError("container: corrupt header JSON");
  const std::string prec = c.header.value("precision", "f32");
  const std::uint64_t width = prec == "f64" ? 8 : 4;

  for (;;) {
    std::uint32_t nlen;
    in.read(reinterpret_cast<char*>(&nlen), sizeof nlen);
    if (in.gcount() == 0) break;
    if (in.gcount() != sizeof nlen) throw DataError("container: truncated record");
    TensorRecord t;
    t.name.resize(nlen);
    in.read(t.name.data(), nlen);
    if (static_cast<std::uint32_t>(in.gcount()) != nlen)
      throw DataError("container: truncated tensor name");
    const auto rank = detail::take<std::uint32_t>(in, "rank");
    t.dims.resize(rank);
    for (auto& d : t.dims) d = detail::take<std::uint64_t>(in, "dim");
    const std::uint64_t bytes = t.elem_count() * width;
    t.payload.resize(bytes);
    in.read(t.payload.data(), static_cast<std::streamsize>(bytes));
    if (static_cast<std::uint64_t>(in.gcount()) != bytes)
      throw DataError("container: truncated payload for " + t.name);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

/// Matrices serialize row by row regardless of in-memory layout.
template <class S>
TensorRecord to_record(const std::string& name, const Mat<S>& m) {
  TensorRecord t;
  t.name = name;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.payload.resize(static_cast<std::size_t>(m.size()) * sizeof(S));
  auto* p = reinterpret_cast<S*>(t.payload.data());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) *p++ = m(i, j);
  return t;
}

template <class S>
TensorRecord to_record(const std::string& name, std::vector<std::uint64_t> dims,
                       const std::vector<S>& flat) {
  TensorRecord t;
  t.name = name;
  t.dims = std::move(dims);
  if (t.elem_count() != flat.size())
    throw ShapeError("to_record: dims do not match payload for " + name);
  t.payload.resize(flat.size() * sizeof(S));
  std::memcpy(t.payload.data(), flat.data(), t.payload.size());
  return t;
}

template <class S>
Mat<S> record_to_mat(const TensorRecord& t) {
  require_shape(t.dims.size() <= 2, "record_to_mat: rank must be <= 2");
  const auto rows = t.dims.empty() ? 1 : static_cast<Eigen::Index>(t.dims[0]);
  const auto cols = t.dims.size() < 2 ? 1 : static_cast<Eigen::Index>(t.dims[1]);
  if (t.payload.size() != static_cast<std::size_t>(rows * cols) * sizeof(S))
    throw DataError("record_to_mat: payload width mismatch for " + t.name);
  Mat<S> m(rows, cols);
  const auto* p = reinterpret_cast<const S*>(t.payload.data());
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = *p++;
  return m;
}

template <class S>
std::vector<S> record_to_flat(const TensorRecord& t) {
  if (t.payload.size() != t.elem_count() * sizeof(S))
    throw DataError("record_to_flat: payload width mismatch for " + t.name);
  std::vector<S> v(t.elem_count());
  std::memcpy(v.data(), t.payload.data(), t.payload.size());
  return v;
}

}  // namespace crate
