#pragma once

// Binary tensor container (.msb) and JSON dataset manifests.
//
// TensorFile layout, all integers and values little-endian:
//
//   offset  size        field
//   0       4           magic "MSB1"
//   4       4           dtype (u32): 0 = f32, 1 = f64, 2 = i64
//   8       4           ndim (u32), >= 1
//   12      8 * ndim    shape (u64 each)
//   ...     numel * sz  payload, row-major
//
// Manifest schema:
//   {"kind": "latents"|"neural"|"judgements", "d": int?, "subsample": int?,
//    "bin_width_ms": int?, "items": [{"id": str, "path": str, "scenario": str?, "label": int?}]}
// Neural manifests may carry "animals": [{"name": str, "n_units": int}];
// judgement items carry "p_hit": number in [0, 1].

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "msim/array3.hpp"
#include "msim/error.hpp"

namespace msim {

namespace fs = std::filesystem;

/// Shortest decimal text that parses back to the same double; "nan" for NaN.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

enum class DType : std::uint32_t { f32 = 0, f64 = 1, i64 = 2 };

inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i64: return "i64";
  }
  return "?";
}

template <class T>
concept TensorScalar = std::is_same_v<T, float> || std::is_same_v<T, double> || std::is_same_v<T, std::int64_t>;

template <TensorScalar T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else return DType::i64;
}

/// Dense n-dimensional array with one of three element types.
class Tensor {
 public:
  using Storage = std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>>;

  Tensor() : shape_{0}, data_(std::vector<double>{}) {}

  template <TensorScalar T>
  Tensor(std::vector<std::uint64_t> shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    validate();
  }

  DType dtype() const { return static_cast<DType>(data_.index()); }
  const std::vector<std::uint64_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }

  std::uint64_t numel() const {
    return std::accumulate(shape_.begin(), shape_.end(), std::uint64_t{1}, std::multiplies<>{});
  }

  template <TensorScalar T>
  std::span<const T> values() const {
    if (dtype() != dtype_of<T>())
      throw FormatError(std::string("tensor holds ") + dtype_name(dtype()) + ", requested " +
                        dtype_name(dtype_of<T>()));
    return std::get<std::vector<T>>(data_);
  }

  /// Explicit widening to f64 (i64 values convert exactly up to 2^53).
  std::vector<double> to_f64() const {
    return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
  }

  const Storage& storage() const { return data_; }

  /// Bitwise equality of dtype, shape and payload (NaN payloads compare equal to themselves).
  bool bit_equal(const Tensor& o) const {
    if (dtype() != o.dtype() || shape_ != o.shape_) return false;
    return std::visit(
        [&](const auto& a) {
          using V = std::decay_t<decltype(a)>;
          const auto& b = std::get<V>(o.data_);
          return a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(typename V::value_type)) == 0;
        },
        data_);
  }

 private:
  void validate() const {
    if (shape_.empty()) throw FormatError("tensor must have ndim >= 1");
    auto n = std::visit([](const auto& v) { return v.size(); }, data_);
    if (n != numel())
      throw DimensionMismatch("tensor payload has " + std::to_string(n) + " values, shape implies " +
                              std::to_string(numel()));
  }

  std::vector<std::uint64_t> shape_;
  Storage data_;
};

namespace detail {

template <class U>
U byteswap(U v) {
  static_assert(std::is_unsigned_v<U>);
  U r = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    r = static_cast<U>((r << 8) | (v & 0xff));
    v >>= 8;
  }
  return r;
}

template <class T>
void put_le(std::vector<char>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) bits = byteswap(bits);
  char buf[sizeof(T)];
  std::memcpy(buf, &bits, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <class T>
T get_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits;
  std::memcpy(&bits, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) bits = byteswap(bits);
  T value;
  std::memcpy(&value, &bits, sizeof(T));
  return value;
}

inline constexpr char kMagic[4] = {'M', 'S', 'B', '1'};

}  // namespace detail

/// Serializes to the exact on-disk byte sequence.
inline std::vector<char> encode_tensor(const Tensor& t) {
  std::vector<char> out(std::begin(detail::kMagic), std::end(detail::kMagic));
  out.reserve(12 + 8 * t.ndim() + t.numel() * dtype_size(t.dtype()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dtype()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (auto s : t.shape()) detail::put_le<std::uint64_t>(out, s);
  std::visit(
      [&](const auto& v) {
        for (auto x : v) detail::put_le(out, x);
      },
      t.storage());
  return out;
}

inline Tensor decode_tensor(std::span<const char> bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& msg) { return FormatError(origin + ": " + msg); };
  if (bytes.size() < 12) throw fail("file too short for header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), detail::kMagic, 4) != 0) throw fail("bad magic, expected \"MSB1\"");
  auto code = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (code > 2) throw fail("unknown dtype code " + std::to_string(code));
  auto dtype = static_cast<DType>(code);
  auto ndim = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (ndim == 0) throw fail("ndim must be >= 1");
  std::size_t header = 12 + 8 * std::size_t{ndim};
  if (bytes.size() < header) throw fail("truncated shape header");
  std::vector<std::uint64_t> shape(ndim);
  std::uint64_t numel = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    shape[i] = detail::get_le<std::uint64_t>(bytes.data() + 12 + 8 * i);
    numel *= shape[i];
  }
  std::uint64_t expected = numel * dtype_size(dtype);
  std::uint64_t actual = bytes.size() - header;
  if (actual != expected)
    throw fail("payload is " + std::to_string(actual) + " bytes, expected " + std::to_string(expected) + " (" +
               (actual < expected ? "short by " + std::to_string(expected - actual)
                                  : "excess of " + std::to_string(actual - expected)) +
               " bytes)");
  const char* p = bytes.data() + header;
  auto read_all = [&]<class T>() {
    std::vector<T> v(numel);
    for (std::uint64_t i = 0; i < numel; ++i) v[i] = detail::get_le<T>(p + i * sizeof(T));
    return Tensor(std::move(shape), std::move(v));
  };
  switch (dtype) {
    case DType::f32: return read_all.template operator()<float>();
    case DType::f64: return read_all.template operator()<double>();
    case DType::i64: return read_all.template operator()<std::int64_t>();
  }
  throw fail("unreachable dtype");
}

inline void write_tensor(const Tensor& t, const fs::path& path) {
  auto bytes = encode_tensor(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

inline Tensor read_tensor(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes, path.string());
}

/// [rows x cols] f64 tensor, row-major.
inline Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  Eigen::Map<RowMatrixXd>(v.data(), m.rows(), m.cols()) = m;
  return Tensor({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, std::move(v));
}

inline Tensor vector_tensor(const Eigen::VectorXd& x) {
  return Tensor({static_cast<std::uint64_t>(x.size())}, std::vector<double>(x.data(), x.data() + x.size()));
}

/// Reads a 1-d or 2-d tensor of any float dtype as a matrix (1-d becomes a column).
inline Eigen::MatrixXd tensor_matrix(const Tensor& t, const std::string& origin = "<tensor>") {
  if (t.dtype() == DType::i64) throw FormatError(origin + ": expected floating-point tensor, got i64");
  if (t.ndim() > 2) throw DimensionMismatch(origin + ": expected ndim <= 2, got " + std::to_string(t.ndim()));
  auto v = t.to_f64();
  Eigen::Index r = static_cast<Eigen::Index>(t.shape()[0]);
  Eigen::Index c = t.ndim() == 2 ? static_cast<Eigen::Index>(t.shape()[1]) : 1;
  return Eigen::Map<const RowMatrixXd>(v.data(), r, c);
}

inline Tensor array3_tensor(const Array3& a) {
  return Tensor({a.dim(0), a.dim(1), a.dim(2)}, a.data());
}

// ---------------------------------------------------------------------------
// Datasets

/// Per-stimulus encoder latents, each [frames x d].
struct LatentDataset {
  std::vector<std::string> stimuli;
  std::vector<Eigen::MatrixXd> latents;
  std::vector<std::string> scenario;  // empty string when unlabeled
  std::vector<std::optional<int>> label;
  int subsample = 1;
  std::size_t d = 0;
  /// Element type found on disk; values are widened to f64 on load.
  DType source_dtype = DType::f64;

  std::size_t size() const { return stimuli.size(); }
  std::size_t min_frames() const {
    std::size_t m = latents.empty() ? 0 : static_cast<std::size_t>(latents.front().rows());
    for (const auto& l : latents) m = std::min(m, static_cast<std::size_t>(l.rows()));
    return m;
  }
};

struct Animal {
  std::string name;
  std::size_t n_units = 0;
};

/// Binned responses per condition, each [trials x bins x units]; a missing
/// trial is all-NaN for the affected units.
struct NeuralDataset {
  std::vector<Animal> animals;
  std::vector<Array3> responses;
  double bin_width_ms = 50.0;
  std::vector<std::string> condition_ids;
  std::vector<std::size_t> missing_trials;  // fully-NaN trial rows per condition

  std::size_t n_units() const {
    std::size_t n = 0;
    for (const auto& a : animals) n += a.n_units;
    return n;
  }
  /// First unit column of the named animal.
  std::size_t unit_offset(const std::string& animal) const {
    std::size_t off = 0;
    for (const auto& a : animals) {
      if (a.name == animal) return off;
      off += a.n_units;
    }
    throw DataError("unknown animal '" + animal + "'");
  }
};

struct HumanJudgements {
  std::vector<std::string> stimuli;
  std::vector<double> p_hit;
  std::vector<int> label;  // 1 = hit
  std::vector<std::string> scenario;
  /// Scenario name and stimulus count w_i, in order of first appearance.
  std::vector<std::pair<std::string, std::size_t>> scenario_counts;

  std::size_t size() const { return stimuli.size(); }
};

namespace detail {

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed for " + path.string());
}

inline const nlohmann::json& items_of(const nlohmann::json& m, const fs::path& path, const char* kind) {
  if (!m.is_object() || !m.contains("kind") || m["kind"] != kind)
    throw FormatError(path.string() + ": field 'kind' must be \"" + kind + "\"");
  if (!m.contains("items") || !m["items"].is_array())
    throw FormatError(path.string() + ": field 'items' must be an array");
  if (m["items"].empty()) throw EmptyDataset(path.string() + ": 'items' is empty");
  return m["items"];
}

template <class T>
T field(const nlohmann::json& obj, const char* name, const fs::path& path, std::size_t item) {
  if (!obj.contains(name)) throw FormatError(path.string() + ": items[" + std::to_string(item) + "] lacks '" + name + "'");
  try {
    return obj[name].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(path.string() + ": items[" + std::to_string(item) + "]." + name + " has the wrong type");
  }
}

}  // namespace detail

inline LatentDataset load_latent_dataset(const fs::path& manifest_path) {
  auto m = detail::read_json(manifest_path);
  const auto& items = detail::items_of(m, manifest_path, "latents");
  const auto base = manifest_path.parent_path();
  LatentDataset ds;
  ds.subsample = m.value("subsample", 1);
  if (ds.subsample < 1) throw FormatError(manifest_path.string() + ": 'subsample' must be >= 1");
  std::optional<std::size_t> declared_d;
  if (m.contains("d")) declared_d = m["d"].get<std::size_t>();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    auto id = detail::field<std::string>(it, "id", manifest_path, i);
    auto rel = detail::field<std::string>(it, "path", manifest_path, i);
    auto path = base / rel;
    if (!fs::exists(path)) throw IoError(manifest_path.string() + ": tensor file for '" + id + "' missing: " + path.string());
    auto t = read_tensor(path);
    if (t.ndim() != 2)
      throw DimensionMismatch(path.string() + ": latents must be [frames x d], got ndim " + std::to_string(t.ndim()));
    if (i == 0) ds.source_dtype = t.dtype();
    else if (t.dtype() != ds.source_dtype)
      throw FormatError(path.string() + ": dtype " + dtype_name(t.dtype()) + " differs from " + dtype_name(ds.source_dtype));
    auto mat = tensor_matrix(t, path.string());
    std::size_t d = static_cast<std::size_t>(mat.cols());
    std::size_t ref = declared_d.value_or(ds.latents.empty() ? d : ds.d);
    if (d != ref)
      throw DimensionMismatch(path.string() + ": stimulus '" + id + "' has d=" + std::to_string(d) + ", expected d=" +
                              std::to_string(ref));
    ds.d = d;
    if (mat.rows() < 2)
      throw DataError(path.string() + ": stimulus '" + id + "' has " + std::to_string(mat.rows()) + " frames, need >= 2");
    ds.stimuli.push_back(id);
    ds.latents.push_back(std::move(mat));
    ds.scenario.push_back(it.value("scenario", std::string{}));
    ds.label.push_back(it.contains("label") ? std::optional<int>(it["label"].get<int>()) : std::nullopt);
  }
  return ds;
}

/// Writes one f64 tensor per stimulus plus `<name>.json` into dir; returns the manifest path.
inline fs::path save_latent_dataset(const LatentDataset& ds, const fs::path& dir, const std::string& name = "latents") {
  fs::create_directories(dir / name);
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto rel = fs::path(name) / (ds.stimuli[i] + ".msb");
    write_tensor(matrix_tensor(ds.latents[i]), dir / rel);
    nlohmann::json it{{"id", ds.stimuli[i]}, {"path", rel.generic_string()}};
    if (i < ds.scenario.size() && !ds.scenario[i].empty()) it["scenario"] = ds.scenario[i];
    if (i < ds.label.size() && ds.label[i]) it["label"] = *ds.label[i];
    items.push_back(std::move(it));
  }
  nlohmann::json m{{"kind", "latents"}, {"d", ds.d}, {"subsample", ds.subsample}, {"items", items}};
  auto path = dir / (name + ".json");
  detail::write_json(m, path);
  return path;
}

inline NeuralDataset load_neural_dataset(const fs::path& manifest_path) {
  auto m = detail::read_json(manifest_path);
  const auto& items = detail::items_of(m, manifest_path, "neural");
  const auto base = manifest_path.parent_path();
  NeuralDataset ds;
  if (!m.contains("bin_width_ms")) throw FormatError(manifest_path.string() + ": 'bin_width_ms' is required");
  ds.bin_width_ms = m["bin_width_ms"].get<double>();
  if (!(ds.bin_width_ms > 0)) throw FormatError(manifest_path.string() + ": 'bin_width_ms' must be > 0");
  if (m.contains("animals")) {
    for (const auto& a : m["animals"]) ds.animals.push_back({a.at("name").get<std::string>(), a.at("n_units").get<std::size_t>()});
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    auto id = detail::field<std::string>(it, "id", manifest_path, i);
    auto path = base / detail::field<std::string>(it, "path", manifest_path, i);
    if (!fs::exists(path)) throw IoError(manifest_path.string() + ": tensor file for condition '" + id + "' missing: " + path.string());
    auto t = read_tensor(path);
    if (t.ndim() != 3)
      throw DimensionMismatch(path.string() + ": responses must be [trials x bins x units], got ndim " +
                              std::to_string(t.ndim()));
    if (t.dtype() == DType::i64) throw FormatError(path.string() + ": responses must be f32 or f64");
    Array3 a(t.shape()[0], t.shape()[1], t.shape()[2], t.to_f64());
    if (ds.animals.empty()) ds.animals.push_back({"A", a.dim(2)});
    if (a.dim(2) != ds.n_units())
      throw DimensionMismatch(path.string() + ": condition '" + id + "' has " + std::to_string(a.dim(2)) +
                              " units, animals declare " + std::to_string(ds.n_units()));
    std::size_t missing = 0;
    bool any_finite = false;
    for (std::size_t tr = 0; tr < a.dim(0); ++tr) {
      auto s = a.slab(tr);
      bool all_nan = s.array().isNaN().all();
      missing += all_nan;
      any_finite = any_finite || !all_nan;
    }
    if (!any_finite) throw DataError(path.string() + ": condition '" + id + "' has no non-NaN trials");
    ds.condition_ids.push_back(id);
    ds.responses.push_back(std::move(a));
    ds.missing_trials.push_back(missing);
  }
  return ds;
}

inline fs::path save_neural_dataset(const NeuralDataset& ds, const fs::path& dir, const std::string& name = "neural") {
  fs::create_directories(dir / name);
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.responses.size(); ++i) {
    auto rel = fs::path(name) / ("cond_" + ds.condition_ids[i] + ".msb");
    write_tensor(array3_tensor(ds.responses[i]), dir / rel);
    items.push_back({{"id", ds.condition_ids[i]}, {"path", rel.generic_string()}});
  }
  nlohmann::json animals = nlohmann::json::array();
  for (const auto& a : ds.animals) animals.push_back({{"name", a.name}, {"n_units", a.n_units}});
  nlohmann::json m{{"kind", "neural"}, {"bin_width_ms", ds.bin_width_ms}, {"animals", animals}, {"items", items}};
  auto path = dir / (name + ".json");
  detail::write_json(m, path);
  return path;
}

inline HumanJudgements load_judgements(const fs::path& manifest_path) {
  auto m = detail::read_json(manifest_path);
  const auto& items = detail::items_of(m, manifest_path, "judgements");
  HumanJudgements hj;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    auto p = detail::field<double>(it, "p_hit", manifest_path, i);
    if (!(p >= 0.0 && p <= 1.0))
      throw FormatError(manifest_path.string() + ": items[" + std::to_string(i) + "].p_hit outside [0, 1]");
    auto label = detail::field<int>(it, "label", manifest_path, i);
    if (label != 0 && label != 1)
      throw FormatError(manifest_path.string() + ": items[" + std::to_string(i) + "].label must be 0 or 1");
    auto sc = it.value("scenario", std::string{"all"});
    hj.stimuli.push_back(detail::field<std::string>(it, "id", manifest_path, i));
    hj.p_hit.push_back(p);
    hj.label.push_back(label);
    hj.scenario.push_back(sc);
    auto [pos, inserted] = index.try_emplace(sc, hj.scenario_counts.size());
    if (inserted) hj.scenario_counts.emplace_back(sc, 0);
    ++hj.scenario_counts[pos->second].second;
  }
  return hj;
}

inline fs::path save_judgements(const HumanJudgements& hj, const fs::path& path) {
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < hj.size(); ++i)
    items.push_back({{"id", hj.stimuli[i]}, {"scenario", hj.scenario[i]}, {"label", hj.label[i]}, {"p_hit", hj.p_hit[i]}});
  detail::write_json({{"kind", "judgements"}, {"items", items}}, path);
  return path;
}

}  // namespace msim
