#pragma once

// SEGT v1 tensor files, label mappings and detection record files.
//
// SEGT v1 layout (all integers little-endian):
//   bytes 0..3   "SEGT"
//   byte  4      version = 0x01
//   byte  5      dtype: 1 = float32, 2 = int32, 3 = uint8
//   byte  6      rank
//   then rank x uint64 dims (slowest-varying first), then the row-major payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "segscope/core.hpp"

namespace segscope {

enum class DType : std::uint8_t { Float32 = 1, Int32 = 2, UInt8 = 3 };

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::Float32: return "float32";
    case DType::Int32: return "int32";
    case DType::UInt8: return "uint8";
  }
  return "unknown";
}

namespace detail {
template <typename T> struct DTypeOf;
template <> struct DTypeOf<float> { static constexpr DType value = DType::Float32; };
template <> struct DTypeOf<std::int32_t> { static constexpr DType value = DType::Int32; };
template <> struct DTypeOf<std::uint8_t> { static constexpr DType value = DType::UInt8; };
}  // namespace detail

/// Generic n-dimensional numeric array.
class TensorBlob {
 public:
  using Dims = std::vector<std::uint64_t>;
  using Payload =
      std::variant<std::vector<float>, std::vector<std::int32_t>, std::vector<std::uint8_t>>;

  TensorBlob() : dims_{1}, payload_(std::vector<float>(1, 0.0f)) {}

  TensorBlob(Dims dims, Payload payload) : dims_(std::move(dims)), payload_(std::move(payload)) {
    if (dims_.empty()) throw ValidationError("tensor dims must be non-empty");
    if (dims_.size() > 255) throw ValidationError("tensor rank exceeds 255");
    std::uint64_t count = 1;
    for (auto d : dims_) {
      if (d == 0) throw ValidationError("tensor dims must be >= 1");
      count *= d;
    }
    const auto len = std::visit([](const auto& v) { return v.size(); }, payload_);
    if (len != count) {
      throw ValidationError("tensor payload length " + std::to_string(len) +
                            " does not match product of dims " + std::to_string(count));
    }
  }

  template <typename T>
  static TensorBlob of(Dims dims, std::vector<T> values) {
    return TensorBlob(std::move(dims), Payload(std::move(values)));
  }

  DType dtype() const {
    switch (payload_.index()) {
      case 0: return DType::Float32;
      case 1: return DType::Int32;
      default: return DType::UInt8;
    }
  }
  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const {
    return std::visit([](const auto& v) { return v.size(); }, payload_);
  }

  template <typename T>
  const std::vector<T>& values() const {
    if (const auto* p = std::get_if<std::vector<T>>(&payload_)) return *p;
    throw ValidationError(std::string("tensor has dtype ") + dtype_name(dtype()) + ", expected " +
                          dtype_name(detail::DTypeOf<T>::value));
  }
  const Payload& payload() const { return payload_; }

  /// Bitwise equality (float payloads compared by representation).
  friend bool operator==(const TensorBlob& a, const TensorBlob& b) {
    if (a.dims_ != b.dims_ || a.payload_.index() != b.payload_.index()) return false;
    return std::visit(
        [&](const auto& va) {
          using V = std::decay_t<decltype(va)>;
          const auto& vb = std::get<V>(b.payload_);
          return va.empty() ||
                 std::memcmp(va.data(), vb.data(), va.size() * sizeof(typename V::value_type)) == 0;
        },
        a.payload_);
  }

 private:
  Dims dims_;
  Payload payload_;
};

// ---------------------------------------------------------------------------
// Encoding

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline constexpr std::uint8_t kMagic[4] = {'S', 'E', 'G', 'T'};
inline constexpr std::uint8_t kVersion = 0x01;

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const TensorBlob& blob) {
  std::vector<std::uint8_t> out(detail::kMagic, detail::kMagic + 4);
  out.push_back(detail::kVersion);
  out.push_back(static_cast<std::uint8_t>(blob.dtype()));
  out.push_back(static_cast<std::uint8_t>(blob.rank()));
  for (auto d : blob.dims()) detail::put_le<std::uint64_t>(out, d);
  std::visit(
      [&](const auto& values) {
        using T = typename std::decay_t<decltype(values)>::value_type;
        out.reserve(out.size() + values.size() * sizeof(T));
        for (const T& v : values) {
          if constexpr (std::is_same_v<T, float>) {
            detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
          } else if constexpr (std::is_same_v<T, std::int32_t>) {
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
          } else {
            out.push_back(v);
          }
        }
      },
      blob.payload());
  return out;
}

inline TensorBlob decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), detail::kMagic, 4) != 0) {
    throw FormatError("SEGT format error: magic");
  }
  if (bytes.size() < 5 || bytes[4] != detail::kVersion) throw FormatError("SEGT format error: version");
  if (bytes.size() < 6 || bytes[5] < 1 || bytes[5] > 3) throw FormatError("SEGT format error: dtype");
  if (bytes.size() < 7 || bytes[6] == 0) throw FormatError("SEGT format error: rank");
  const auto dtype = static_cast<DType>(bytes[5]);
  const std::size_t rank = bytes[6];
  std::size_t offset = 7;
  if (bytes.size() < offset + 8 * rank) throw FormatError("SEGT format error: dims");
  TensorBlob::Dims dims(rank);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = detail::get_le<std::uint64_t>(bytes.data() + offset);
    offset += 8;
    if (dims[i] == 0) throw FormatError("SEGT format error: dims");
    if (count > std::numeric_limits<std::uint64_t>::max() / dims[i]) {
      throw FormatError("SEGT format error: dims");
    }
    count *= dims[i];
  }
  const std::size_t elem = dtype == DType::UInt8 ? 1 : 4;
  const std::size_t remaining = bytes.size() - offset;
  if (count > remaining / elem || remaining != count * elem) {
    throw FormatError("SEGT format error: payload length (expected " + std::to_string(count * elem) +
                      " bytes, found " + std::to_string(remaining) + ")");
  }
  const std::uint8_t* p = bytes.data() + offset;
  switch (dtype) {
    case DType::Float32: {
      std::vector<float> v(count);
      for (std::size_t i = 0; i < count; ++i) v[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i));
      return TensorBlob::of(std::move(dims), std::move(v));
    }
    case DType::Int32: {
      std::vector<std::int32_t> v(count);
      for (std::size_t i = 0; i < count; ++i) {
        v[i] = static_cast<std::int32_t>(detail::get_le<std::uint32_t>(p + 4 * i));
      }
      return TensorBlob::of(std::move(dims), std::move(v));
    }
    case DType::UInt8:
      return TensorBlob::of(std::move(dims), std::vector<std::uint8_t>(p, p + count));
  }
  throw FormatError("SEGT format error: dtype");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

inline void write_tensor(const TensorBlob& blob, const std::filesystem::path& path) {
  write_file_bytes(path, encode_tensor(blob));
}

inline TensorBlob read_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Raster views

inline LabelRaster to_label_raster(const TensorBlob& blob) {
  if (blob.rank() != 2 || blob.dtype() != DType::Int32) {
    throw ValidationError("label tensor must be int32 (H,W)");
  }
  return LabelRaster(blob.dims()[0], blob.dims()[1], blob.values<std::int32_t>());
}

inline TensorBlob from_label_raster(const LabelRaster& r) {
  return TensorBlob::of<std::int32_t>({r.rows(), r.cols()}, r.data());
}

inline TensorBlob from_double_raster(const Raster<double>& r) {
  std::vector<float> v(r.data().begin(), r.data().end());
  return TensorBlob::of<float>({r.rows(), r.cols()}, std::move(v));
}

// ---------------------------------------------------------------------------
// Label mapping

struct LabelMapping {
  std::map<std::int32_t, std::int32_t> entries;
  std::set<std::int32_t> ignore_ids;

  /// Checks that targets form 0..T-1 (plus the ignore sentinel) and that no
  /// id is both mapped and ignored.
  void validate() const {
    std::set<std::int32_t> targets;
    for (const auto& [src, dst] : entries) {
      if (ignore_ids.count(src)) {
        throw ValidationError("label id " + std::to_string(src) + " is both mapped and ignored");
      }
      if (dst != kIgnoreLabel) {
        if (dst < 0) throw ValidationError("negative target id " + std::to_string(dst));
        targets.insert(dst);
      }
    }
    std::int32_t expected = 0;
    for (auto t : targets) {
      if (t != expected) throw ValidationError("target ids are not contiguous from 0 (missing " + std::to_string(expected) + ")");
      ++expected;
    }
  }

  static LabelMapping identity(std::int32_t num_classes) {
    LabelMapping m;
    for (std::int32_t c = 0; c < num_classes; ++c) m.entries[c] = c;
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["entries"] = nlohmann::json::object();
    for (const auto& [src, dst] : entries) j["entries"][std::to_string(src)] = dst;
    j["ignore"] = std::vector<std::int32_t>(ignore_ids.begin(), ignore_ids.end());
    return j;
  }

  static LabelMapping from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("entries") || !j["entries"].is_object()) {
      throw FormatError("label mapping: entries");
    }
    LabelMapping m;
    for (const auto& [key, value] : j["entries"].items()) {
      std::size_t pos = 0;
      std::int32_t src = 0;
      try {
        src = std::stoi(key, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != key.size() || !value.is_number_integer()) {
        throw FormatError("label mapping: entries[" + key + "]");
      }
      m.entries[src] = value.get<std::int32_t>();
    }
    if (j.contains("ignore")) {
      if (!j["ignore"].is_array()) throw FormatError("label mapping: ignore");
      for (const auto& v : j["ignore"]) {
        if (!v.is_number_integer()) throw FormatError("label mapping: ignore");
        m.ignore_ids.insert(v.get<std::int32_t>());
      }
    }
    m.validate();
    return m;
  }
};

inline LabelRaster apply_label_mapping(const LabelRaster& labels, const LabelMapping& mapping) {
  LabelRaster out(labels.rows(), labels.cols());
  std::set<std::int32_t> unmapped;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto src = labels[i];
    if (auto it = mapping.entries.find(src); it != mapping.entries.end()) {
      out[i] = it->second;
    } else if (mapping.ignore_ids.count(src)) {
      out[i] = kIgnoreLabel;
    } else {
      unmapped.insert(src);
    }
  }
  if (!unmapped.empty()) {
    std::string ids;
    for (auto id : unmapped) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
    throw ValidationError("unmapped id " + ids);
  }
  return out;
}

inline TensorBlob apply_label_mapping(const TensorBlob& labels, const LabelMapping& mapping) {
  return from_label_raster(apply_label_mapping(to_label_raster(labels), mapping));
}

// ---------------------------------------------------------------------------
// Detection records (JSON Lines)

struct DetectionRecord {
  std::string image_key;
  std::int64_t segment_id = 0;
  std::int32_t predicted_class = 0;
  double predicted_iou = 0.0;
  BBox bbox;
  std::int64_t area = 1;

  SegmentKey key() const { return {image_key, segment_id}; }

  void validate() const {
    if (segment_id < 0) throw ValidationError("segment_id must be non-negative");
    if (bbox.row_min > bbox.row_max || bbox.col_min > bbox.col_max) throw ValidationError("bbox corners out of order");
    if (area < 1 || area > bbox.area()) throw ValidationError("area must be in [1, bbox area]");
    if (!(predicted_iou >= 0.0 && predicted_iou <= 1.0)) throw ValidationError("predicted_iou outside [0,1]");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["image_key"] = image_key;
    j["segment_id"] = segment_id;
    j["predicted_class"] = predicted_class;
    j["predicted_iou"] = predicted_iou;
    j["bbox"] = {bbox.row_min, bbox.col_min, bbox.row_max, bbox.col_max};
    j["area"] = area;
    return j;
  }

  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

namespace detail {

template <typename T>
T record_field(const nlohmann::json& j, const char* name, std::size_t line) {
  const std::string where = "line " + std::to_string(line) + ": " + name;
  if (!j.contains(name)) throw FormatError(where);
  const auto& v = j[name];
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw FormatError(where);
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw FormatError(where);
  } else {
    if (!v.is_number()) throw FormatError(where);
  }
  return v.get<T>();
}

}  // namespace detail

inline DetectionRecord record_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) throw FormatError("line " + std::to_string(line) + ": not an object");
  DetectionRecord r;
  r.image_key = detail::record_field<std::string>(j, "image_key", line);
  r.segment_id = detail::record_field<std::int64_t>(j, "segment_id", line);
  r.predicted_class = detail::record_field<std::int32_t>(j, "predicted_class", line);
  r.predicted_iou = detail::record_field<double>(j, "predicted_iou", line);
  const std::string bbox_where = "line " + std::to_string(line) + ": bbox";
  if (!j.contains("bbox") || !j["bbox"].is_array() || j["bbox"].size() != 4) throw FormatError(bbox_where);
  for (const auto& v : j["bbox"]) {
    if (!v.is_number_integer()) throw FormatError(bbox_where);
  }
  r.bbox = {j["bbox"][0].get<std::int64_t>(), j["bbox"][1].get<std::int64_t>(), j["bbox"][2].get<std::int64_t>(),
            j["bbox"][3].get<std::int64_t>()};
  r.area = detail::record_field<std::int64_t>(j, "area", line);
  try {
    r.validate();
  } catch (const ValidationError& e) {
    throw FormatError("line " + std::to_string(line) + ": " + e.what());
  }
  return r;
}

inline std::string encode_records(const std::vector<DetectionRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    r.validate();
    out += r.to_json().dump();
    out += '\n';
  }
  return out;
}

inline std::vector<DetectionRecord> decode_records(const std::string& text) {
  std::vector<DetectionRecord> records;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw FormatError("line " + std::to_string(number) + ": malformed JSON");
    }
    records.push_back(record_from_json(j, number));
  }
  return records;
}

inline void write_records(const std::vector<DetectionRecord>& records, const std::filesystem::path& path) {
  write_text_file(path, encode_records(records));
}

inline std::vector<DetectionRecord> read_records(const std::filesystem::path& path) {
  try {
    return decode_records(read_text_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// JSON helpers shared by the sidecar formats

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const auto text = read_text_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

inline nlohmann::json key_to_json(const SegmentKey& k) {
  return {{"image_key", k.image_key}, {"segment_id", k.segment_id}};
}

inline SegmentKey key_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("image_key") || !j["image_key"].is_string() || !j.contains("segment_id") ||
      !j["segment_id"].is_number_integer()) {
    throw FormatError("key must be {image_key, segment_id}");
  }
  return {j["image_key"].get<std::string>(), j["segment_id"].get<std::int64_t>()};
}

}  // namespace segscope
