#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "deelbo/errors.hpp"
#include "deelbo/nnet.hpp"
#include "deelbo/types.hpp"

#include <json.hpp>

namespace deelbo {

struct Dataset {
  Eigen::MatrixXd features;  // N x P
  IndexVector labels;        // N, values in {0..C-1}
  int num_classes = 0;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index feature_dim() const { return features.cols(); }
};

/// Per-feature standardization statistics, fit on one split and applied to
/// the others; test statistics are never computed.
struct NormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
};

NormStats compute_norm_stats(const Dataset& data);
void apply_normalization(Dataset& data, const NormStats& stats);
NormStats normalize_fit(Dataset& data);

/// CSV with header `f0,...,f{P-1},label`. When `expected_classes` > 0,
/// labels at or above it are rejected with the offending line number;
/// otherwise the class count is inferred as max label + 1.
Dataset load_csv(const std::string& path, int expected_classes = 0);
void write_csv(const std::string& path, const Dataset& data);

/// Exactly `per_class` examples of every class, order shuffled.
Dataset balanced_subsample(const Dataset& data, int per_class, std::uint64_t seed);

/// Gaussian class clusters: class means are `separation`-scaled random unit
/// vectors, points are unit-variance draws around them.
struct SyntheticSpec {
  int num_classes = 2;
  int feature_dim = 2;
  int num_examples = 100;
  double separation = 3.0;
};

Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// Target-task variant: reuses the class means of make_synthetic(spec,
/// mean_seed), displaces each by `shift` along directions drawn from
/// `shift_seed`, and samples points with `sample_seed`. Fixing (mean_seed,
/// shift_seed) pins the target distribution across independent draws.
Dataset make_synthetic_shifted(const SyntheticSpec& spec, std::uint64_t mean_seed,
                               double shift, std::uint64_t shift_seed,
                               std::uint64_t sample_seed);

Batch<double> make_batch(const Dataset& data, const std::vector<Eigen::Index>& rows);
Batch<double> full_batch(const Dataset& data);

/// FNV-1a over the raw feature bytes, labels, and dims; stable across runs.
std::uint64_t fingerprint(const Dataset& data);
std::string fingerprint_hex(const Dataset& data);

// ---------------------------------------------------------------------------
// Checkpoints: magic "DEEL", u32 format version, then length-prefixed
// (name, dtype, shape, little-endian payload) entries.
// ---------------------------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  enum class DType : std::uint8_t { F64 = 0, I64 = 1 };

  struct Entry {
    std::string name;
    DType dtype = DType::F64;
    std::vector<std::uint64_t> shape;
    std::vector<double> f64;
    std::vector<std::int64_t> i64;
  };

  std::uint32_t version = kCheckpointVersion;
  std::vector<Entry> entries;

  bool has(const std::string& name) const;
  const Entry& get(const std::string& name) const;

  void put_vector(const std::string& name, const Eigen::VectorXd& v);
  void put_matrix(const std::string& name, const Eigen::MatrixXd& m);  // row-major payload
  void put_scalar(const std::string& name, double x);
  void put_ints(const std::string& name, const std::vector<std::int64_t>& v);
  void put_int(const std::string& name, std::int64_t x);

  Eigen::VectorXd get_vector(const std::string& name) const;
  Eigen::MatrixXd get_matrix(const std::string& name) const;
  double get_scalar(const std::string& name) const;
  std::vector<std::int64_t> get_ints(const std::string& name) const;
  std::int64_t get_int(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Results: JSON lines, one object per run; appends are serialized.
// ---------------------------------------------------------------------------

void append_jsonl(const std::string& path, const nlohmann::json& record);
std::vector<nlohmann::json> read_jsonl(const std::string& path);

}  // namespace deelbo
