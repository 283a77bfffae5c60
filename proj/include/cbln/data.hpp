#pragma once

// Synthetic grounding tasks and the on-disk dataset format.
//
// Dataset = JSON manifest + one raw payload of little-endian float32 frame
// features, record-major (each record is T x D_v, row-major). See README for
// the field list.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbln/errors.hpp"
#include "cbln/layers.hpp"
#include "cbln/segment.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

struct GroundingExample {
  Matrix features;  // T x D_v
  std::vector<int> tokens;
  Segment gt;
  double duration_s = 0.0;

  bool operator==(const GroundingExample&) const = default;
};

struct SyntheticSpec {
  std::size_t T = 32;
  std::size_t D_v = 16;
  std::size_t vocab_size = 64;
  double noise = 0.3;
  std::size_t N_min = 3;
  std::size_t N_max = 6;
  std::size_t seg_min = 4;
  std::size_t seg_max = 12;
  double seconds_per_frame = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (T < 2) throw ConfigError("synthetic T must be at least 2");
    if (D_v == 0) throw ConfigError("synthetic D_v must be positive");
    if (N_min == 0 || N_min > N_max) throw ConfigError("query length range must satisfy 1 <= N_min <= N_max");
    if (vocab_size < N_max + 1) throw ConfigError("vocabulary must exceed N_max to leave a distractor word");
    if (seg_min == 0 || seg_min > seg_max) throw ConfigError("segment length range must satisfy 1 <= min <= max");
    if (seg_max > T) {
      throw ConfigError("segment length up to " + std::to_string(seg_max) + " does not fit in T=" + std::to_string(T));
    }
    if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
    if (!(seconds_per_frame > 0.0)) throw ConfigError("seconds_per_frame must be positive");
  }
};

enum class Split : std::uint64_t { Train = 1, Test = 2 };

inline constexpr std::uint64_t kMotifStream = 0x3071f;

// One fixed random direction per vocabulary word: vocab_size x D_v, N(0, 1).
inline Matrix motif_dictionary(const SyntheticSpec& spec) {
  std::mt19937_64 rng = derive_rng(spec.seed, kMotifStream);
  std::normal_distribution<double> unit(0.0, 1.0);
  Matrix motifs(spec.vocab_size, spec.D_v);
  for (double& v : motifs.data) v = unit(rng);
  return motifs;
}

// Frames inside the ground truth carry the mean motif of the query words,
// frames outside carry the motif of one distractor word absent from the query;
// both get N(0, noise) per entry. Features are rounded to float32 so they
// survive the on-disk format unchanged.
inline GroundingExample generate_example(const SyntheticSpec& spec, const Matrix& motifs, std::mt19937_64& rng) {
  spec.validate();
  if (motifs.rows != spec.vocab_size || motifs.cols != spec.D_v) {
    throw DimensionError("motif dictionary " + motifs.shape_str() + " does not match the synthetic spec");
  }
  const auto pick = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  const std::size_t N = pick(spec.N_min, spec.N_max);
  std::vector<int> pool(spec.vocab_size);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < N; ++i) std::swap(pool[i], pool[pick(i, spec.vocab_size - 1)]);
  GroundingExample ex;
  ex.tokens.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(N));
  const int distractor = pool[pick(N, spec.vocab_size - 1)];

  const std::size_t length = pick(spec.seg_min, spec.seg_max);
  const std::size_t start = pick(0, spec.T - length);
  ex.gt = Segment{start, start + length - 1};
  ex.duration_s = static_cast<double>(spec.T) * spec.seconds_per_frame;

  std::vector<double> query_motif(spec.D_v, 0.0);
  for (int tok : ex.tokens) {
    for (std::size_t d = 0; d < spec.D_v; ++d) query_motif[d] += motifs(static_cast<std::size_t>(tok), d);
  }
  for (double& v : query_motif) v /= static_cast<double>(N);

  std::normal_distribution<double> noise(0.0, 1.0);
  ex.features = Matrix(spec.T, spec.D_v);
  for (std::size_t t = 0; t < spec.T; ++t) {
    const bool inside = t >= ex.gt.start && t <= ex.gt.end;
    for (std::size_t d = 0; d < spec.D_v; ++d) {
      const double base = inside ? query_motif[d] : motifs(static_cast<std::size_t>(distractor), d);
      const double jitter = spec.noise > 0.0 ? spec.noise * noise(rng) : 0.0;
      ex.features(t, d) = static_cast<double>(static_cast<float>(base + jitter));
    }
  }
  return ex;
}

// Record i of a split draws from its own stream (seed, split, i), so any
// subset can be regenerated independently.
inline std::vector<GroundingExample> generate_dataset(const SyntheticSpec& spec, std::size_t count, Split split) {
  spec.validate();
  const Matrix motifs = motif_dictionary(spec);
  std::vector<GroundingExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng = derive_rng(spec.seed, static_cast<std::uint64_t>(split), i);
    out.push_back(generate_example(spec, motifs, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr int kDatasetVersion = 1;

namespace detail {

inline void put_f32_le(std::string& buf, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

inline float get_f32_le(const char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<float>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

inline nlohmann::json parse_json(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

template <typename T>
T field(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": field '" + key + "' has the wrong type: " + e.what());
  }
}

}  // namespace detail

// The payload path is the manifest path with its extension replaced by .f32.
inline std::filesystem::path payload_path_for(const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  p.replace_extension(".f32");
  return p;
}

inline void save_dataset(const std::vector<GroundingExample>& examples, const std::filesystem::path& manifest_path) {
  const std::size_t D_v = examples.empty() ? 0 : examples.front().features.cols;
  std::size_t max_T = 0;
  std::string payload;
  nlohmann::json records = nlohmann::json::array();
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const GroundingExample& ex = examples[i];
    if (ex.features.cols != D_v) throw DataError("record " + std::to_string(i) + " has a different feature width");
    nlohmann::json rec;
    rec["feature_offset"] = payload.size();
    rec["T"] = ex.features.rows;
    rec["N"] = ex.tokens.size();
    rec["tokens"] = ex.tokens;
    rec["gt_s"] = ex.gt.start;
    rec["gt_e"] = ex.gt.end;
    rec["duration_s"] = ex.duration_s;
    records.push_back(std::move(rec));
    for (double v : ex.features.data) detail::put_f32_le(payload, static_cast<float>(v));
    max_T = std::max(max_T, ex.features.rows);
  }
  const std::filesystem::path payload_path = payload_path_for(manifest_path);
  nlohmann::json manifest;
  manifest["version"] = kDatasetVersion;
  manifest["count"] = examples.size();
  manifest["T"] = max_T;
  manifest["D_v"] = D_v;
  manifest["payload"] = payload_path.filename().string();
  manifest["records"] = std::move(records);
  detail::write_file(payload_path, payload);
  detail::write_file(manifest_path, manifest.dump(1) + "\n");
}

inline std::vector<GroundingExample> load_dataset(const std::filesystem::path& manifest_path) {
  const std::string where = manifest_path.string();
  const nlohmann::json manifest = detail::parse_json(detail::read_file(manifest_path), where);
  const int version = detail::field<int>(manifest, "version", where);
  if (version != kDatasetVersion) {
    throw FormatError(where + ": version mismatch, file has " + std::to_string(version) + ", reader supports " +
                      std::to_string(kDatasetVersion));
  }
  const auto count = detail::field<std::size_t>(manifest, "count", where);
  const auto D_v = detail::field<std::size_t>(manifest, "D_v", where);
  const auto default_T = detail::field<std::size_t>(manifest, "T", where);
  const auto payload_name = detail::field<std::string>(manifest, "payload", where);
  const auto& records = manifest.at("records");
  if (!records.is_array() || records.size() != count) {
    throw FormatError(where + ": count " + std::to_string(count) + " does not match the record list");
  }
  const std::filesystem::path payload_path = manifest_path.parent_path() / payload_name;
  const std::string payload = detail::read_file(payload_path);

  std::vector<GroundingExample> out;
  out.reserve(count);
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const nlohmann::json& rec = records[i];
    const std::string rw = where + " record " + std::to_string(i);
    const auto offset = detail::field<std::size_t>(rec, "feature_offset", rw);
    const std::size_t T = rec.contains("T") ? detail::field<std::size_t>(rec, "T", rw) : default_T;
    const std::size_t bytes = T * D_v * 4;
    if (offset != expected_offset) {
      throw FormatError(rw + ": feature_offset " + std::to_string(offset) + " but previous records end at byte " +
                        std::to_string(expected_offset));
    }
    if (offset + bytes > payload.size()) {
      throw FormatError(rw + ": payload length mismatch, needs bytes [" + std::to_string(offset) + ", " +
                        std::to_string(offset + bytes) + ") but " + payload_path.string() + " has " +
                        std::to_string(payload.size()) + " bytes");
    }
    GroundingExample ex;
    ex.features = Matrix(T, D_v);
    for (std::size_t k = 0; k < T * D_v; ++k) {
      ex.features.data[k] = static_cast<double>(detail::get_f32_le(payload.data() + offset + 4 * k));
    }
    ex.tokens = detail::field<std::vector<int>>(rec, "tokens", rw);
    if (ex.tokens.size() != detail::field<std::size_t>(rec, "N", rw)) {
      throw FormatError(rw + ": N does not match the token list");
    }
    ex.gt = Segment{detail::field<std::size_t>(rec, "gt_s", rw), detail::field<std::size_t>(rec, "gt_e", rw)};
    if (!ex.gt.valid() || ex.gt.end >= T) throw DataError(rw + ": ground truth " + ex.gt.str() + " outside the video");
    ex.duration_s = detail::field<double>(rec, "duration_s", rw);
    out.push_back(std::move(ex));
    expected_offset = offset + bytes;
  }
  if (expected_offset != payload.size()) {
    throw FormatError(where + ": payload length mismatch, records end at byte " + std::to_string(expected_offset) +
                      " but the payload has " + std::to_string(payload.size()) + " bytes");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pre-extracted features
//
// Manifest: {"D_v": int, "samples": [{"id": str, "features": path to raw
// float32-LE T x D_v, "tokens": [int], "gt_start_s": s, "gt_end_s": s,
// "duration_s": s}]}. Relative feature paths resolve against the manifest.

// Keeps rows floor(i * T / target) for i < target.
inline Matrix subsample_rows(const Matrix& m, std::size_t target) {
  if (m.rows <= target) return m;
  Matrix out(target, m.cols);
  for (std::size_t i = 0; i < target; ++i) {
    const std::size_t src = i * m.rows / target;
    std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(src * m.cols), m.cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
  }
  return out;
}

inline std::vector<GroundingExample> ingest_real_features(const std::filesystem::path& manifest_path, std::size_t max_T) {
  const std::string where = manifest_path.string();
  const nlohmann::json manifest = detail::parse_json(detail::read_file(manifest_path), where);
  const auto D_v = detail::field<std::size_t>(manifest, "D_v", where);
  if (D_v == 0) throw FormatError(where + ": D_v must be positive");
  if (!manifest.contains("samples") || !manifest.at("samples").is_array()) {
    throw FormatError(where + ": missing sample list");
  }
  std::vector<GroundingExample> out;
  for (const nlohmann::json& sample : manifest.at("samples")) {
    const std::string id = sample.contains("id") ? sample.at("id").dump() : std::to_string(out.size());
    const std::string sw = where + " sample " + id;
    std::filesystem::path feature_path = detail::field<std::string>(sample, "features", sw);
    if (feature_path.is_relative()) feature_path = manifest_path.parent_path() / feature_path;
    const std::string raw = detail::read_file(feature_path);
    if (raw.empty() || raw.size() % (4 * D_v) != 0) {
      throw FormatError(sw + ": feature file of " + std::to_string(raw.size()) + " bytes is not a whole number of " +
                        std::to_string(D_v) + "-wide float32 rows");
    }
    const std::size_t T = raw.size() / (4 * D_v);
    Matrix features(T, D_v);
    for (std::size_t k = 0; k < T * D_v; ++k) features.data[k] = detail::get_f32_le(raw.data() + 4 * k);

    GroundingExample ex;
    ex.features = subsample_rows(features, max_T);
    ex.tokens = detail::field<std::vector<int>>(sample, "tokens", sw);
    ex.duration_s = detail::field<double>(sample, "duration_s", sw);
    const double start_s = detail::field<double>(sample, "gt_start_s", sw);
    const double end_s = detail::field<double>(sample, "gt_end_s", sw);
    try {
      ex.gt = timestamps_to_segment(start_s, end_s, ex.features.rows, ex.duration_s);
    } catch (const DataError& e) {
      throw DataError(sw + ": " + e.what());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace cbln
