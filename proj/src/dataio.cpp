#include "deelbo/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

#include "deelbo/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written little-endian");

namespace deelbo {

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

NormStats compute_norm_stats(const Dataset& data) {
  if (data.size() == 0) throw ConfigError("normalize: empty dataset");
  NormStats stats;
  stats.mean = data.features.colwise().mean();
  const Eigen::MatrixXd centered = data.features.rowwise() - stats.mean.transpose();
  stats.std = (centered.array().square().colwise().mean()).sqrt();
  stats.std = stats.std.cwiseMax(1e-12);
  return stats;
}

void apply_normalization(Dataset& data, const NormStats& stats) {
  if (stats.mean.size() != data.feature_dim())
    throw ShapeError("normalize: stats dimension mismatch");
  data.features.rowwise() -= stats.mean.transpose();
  data.features.array().rowwise() /= stats.std.transpose().array();
}

NormStats normalize_fit(Dataset& data) {
  NormStats stats = compute_norm_stats(data);
  apply_normalization(data, stats);
  return stats;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_double(const std::string& cell, const std::string& where) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  const double value = std::strtod(begin, &end);
  if (end == begin || *end != '\0')
    throw ParseError(where + ": not a number: '" + cell + "'");
  return value;
}

long parse_label(const std::string& cell, const std::string& where) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  const long value = std::strtol(begin, &end, 10);
  if (end == begin || *end != '\0')
    throw ParseError(where + ": not an integer label: '" + cell + "'");
  return value;
}

}  // namespace

Dataset load_csv(const std::string& path, int expected_classes) {
  std::ifstream in(path);
  if (!in) throw ParseError("load_csv: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_line(line);
  if (header.size() < 2 || header.back() != "label")
    throw ParseError(path + ":1: header must be f0,...,f{P-1},label");
  const int feature_dim = static_cast<int>(header.size()) - 1;
  for (int j = 0; j < feature_dim; ++j)
    if (header[j] != "f" + std::to_string(j))
      throw ParseError(path + ":1: unexpected header column '" + header[j] + "'");

  std::vector<double> values;
  std::vector<int> labels;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    const auto cells = split_line(line);
    if (cells.size() != header.size())
      throw ParseError(where + ": expected " + std::to_string(header.size()) +
                       " cells, got " + std::to_string(cells.size()));
    for (int j = 0; j < feature_dim; ++j)
      values.push_back(parse_double(cells[j], where));
    const long label = parse_label(cells.back(), where);
    if (label < 0) throw ParseError(where + ": negative label");
    if (expected_classes > 0 && label >= expected_classes)
      throw ParseError(where + ": label " + std::to_string(label) +
                       " out of range for " + std::to_string(expected_classes) +
                       " classes");
    labels.push_back(static_cast<int>(label));
  }
  if (labels.empty()) throw ParseError(path + ": no data rows");

  Dataset data;
  const Eigen::Index n = static_cast<Eigen::Index>(labels.size());
  data.features.resize(n, feature_dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < feature_dim; ++j)
      data.features(i, j) = values[static_cast<std::size_t>(i) * feature_dim + j];
  data.labels = Eigen::Map<const IndexVector>(labels.data(), n);
  data.num_classes = expected_classes > 0
                         ? expected_classes
                         : data.labels.maxCoeff() + 1;
  return data;
}

void write_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw ParseError("write_csv: cannot open " + path);
  for (Eigen::Index j = 0; j < data.feature_dim(); ++j) out << "f" << j << ",";
  out << "label\n";
  char buf[40];
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    for (Eigen::Index j = 0; j < data.feature_dim(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", data.features(i, j));
      out << buf << ",";
    }
    out << data.labels[i] << "\n";
  }
}

// ---------------------------------------------------------------------------
// Sampling and synthesis
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<Eigen::Index>> rows_by_class(const Dataset& data) {
  std::vector<std::vector<Eigen::Index>> groups(data.num_classes);
  for (Eigen::Index i = 0; i < data.size(); ++i)
    groups[static_cast<std::size_t>(data.labels[i])].push_back(i);
  return groups;
}

Dataset take_rows(const Dataset& data, const std::vector<Eigen::Index>& rows) {
  Dataset out;
  out.num_classes = data.num_classes;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), data.feature_dim());
  out.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = data.features.row(rows[i]);
    out.labels[static_cast<Eigen::Index>(i)] = data.labels[rows[i]];
  }
  return out;
}

}  // namespace

Dataset balanced_subsample(const Dataset& data, int per_class, std::uint64_t seed) {
  if (per_class < 0) throw ConfigError("balanced_subsample: per_class must be >= 0");
  Rng rng(seed);
  auto groups = rows_by_class(data);
  std::vector<Eigen::Index> picked;
  for (int c = 0; c < data.num_classes; ++c) {
    auto& rows = groups[static_cast<std::size_t>(c)];
    if (static_cast<int>(rows.size()) < per_class)
      throw ConfigError("balanced_subsample: class " + std::to_string(c) + " has " +
                        std::to_string(rows.size()) + " examples, need " +
                        std::to_string(per_class));
    rng.shuffle(rows);
    picked.insert(picked.end(), rows.begin(), rows.begin() + per_class);
  }
  rng.shuffle(picked);
  return take_rows(data, picked);
}

namespace {

Eigen::MatrixXd class_means(const SyntheticSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd means(spec.num_classes, spec.feature_dim);
  for (int c = 0; c < spec.num_classes; ++c) {
    Eigen::VectorXd direction(spec.feature_dim);
    for (int j = 0; j < spec.feature_dim; ++j) direction[j] = rng.normal();
    direction.normalize();
    means.row(c) = spec.separation * direction.transpose();
  }
  return means;
}

Dataset sample_clusters(const SyntheticSpec& spec, const Eigen::MatrixXd& means,
                        Rng& rng) {
  Dataset data;
  data.num_classes = spec.num_classes;
  data.features.resize(spec.num_examples, spec.feature_dim);
  data.labels.resize(spec.num_examples);

  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(spec.num_examples));
  for (int i = 0; i < spec.num_examples; ++i) labels.push_back(i % spec.num_classes);
  rng.shuffle(labels);

  for (int i = 0; i < spec.num_examples; ++i) {
    data.labels[i] = labels[static_cast<std::size_t>(i)];
    for (int j = 0; j < spec.feature_dim; ++j)
      data.features(i, j) = means(data.labels[i], j) + rng.normal();
  }
  return data;
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw ConfigError("make_synthetic: need >= 2 classes");
  if (spec.feature_dim < 1 || spec.num_examples < 0)
    throw ConfigError("make_synthetic: bad dimensions");
  const Eigen::MatrixXd means = class_means(spec, seed);
  Rng rng(derive_seed(seed, 1));
  return sample_clusters(spec, means, rng);
}

Dataset make_synthetic_shifted(const SyntheticSpec& spec, std::uint64_t mean_seed,
                               double shift, std::uint64_t shift_seed,
                               std::uint64_t sample_seed) {
  if (spec.num_classes < 2) throw ConfigError("make_synthetic: need >= 2 classes");
  Eigen::MatrixXd means = class_means(spec, mean_seed);
  Rng shift_rng(shift_seed);
  for (int c = 0; c < spec.num_classes; ++c) {
    Eigen::VectorXd direction(spec.feature_dim);
    for (int j = 0; j < spec.feature_dim; ++j) direction[j] = shift_rng.normal();
    direction.normalize();
    means.row(c) += shift * direction.transpose();
  }
  Rng rng(sample_seed);
  return sample_clusters(spec, means, rng);
}

Batch<double> make_batch(const Dataset& data, const std::vector<Eigen::Index>& rows) {
  Batch<double> batch;
  batch.features.resize(static_cast<Eigen::Index>(rows.size()), data.feature_dim());
  batch.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    batch.features.row(static_cast<Eigen::Index>(i)) = data.features.row(rows[i]);
    batch.labels[static_cast<Eigen::Index>(i)] = data.labels[rows[i]];
  }
  return batch;
}

Batch<double> full_batch(const Dataset& data) {
  return {data.features, data.labels};
}

std::uint64_t fingerprint(const Dataset& data) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix_bytes = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ULL;
    }
  };
  const std::uint64_t dims[3] = {static_cast<std::uint64_t>(data.size()),
                                 static_cast<std::uint64_t>(data.feature_dim()),
                                 static_cast<std::uint64_t>(data.num_classes)};
  mix_bytes(dims, sizeof(dims));
  mix_bytes(data.features.data(),
            sizeof(double) * static_cast<std::size_t>(data.features.size()));
  mix_bytes(data.labels.data(),
            sizeof(int) * static_cast<std::size_t>(data.labels.size()));
  return h;
}

std::string fingerprint_hex(const Dataset& data) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fingerprint(data)));
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

bool Checkpoint::has(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return true;
  return false;
}

const Checkpoint::Entry& Checkpoint::get(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw Error("checkpoint: missing required array '" + name + "'");
}

void Checkpoint::put_vector(const std::string& name, const Eigen::VectorXd& v) {
  Entry e;
  e.name = name;
  e.dtype = DType::F64;
  e.shape = {static_cast<std::uint64_t>(v.size())};
  e.f64.assign(v.data(), v.data() + v.size());
  entries.push_back(std::move(e));
}

void Checkpoint::put_matrix(const std::string& name, const Eigen::MatrixXd& m) {
  Entry e;
  e.name = name;
  e.dtype = DType::F64;
  e.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  e.f64.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) e.f64.push_back(m(i, j));
  entries.push_back(std::move(e));
}

void Checkpoint::put_scalar(const std::string& name, double x) {
  Entry e;
  e.name = name;
  e.dtype = DType::F64;
  e.shape = {};
  e.f64 = {x};
  entries.push_back(std::move(e));
}

void Checkpoint::put_ints(const std::string& name, const std::vector<std::int64_t>& v) {
  Entry e;
  e.name = name;
  e.dtype = DType::I64;
  e.shape = {static_cast<std::uint64_t>(v.size())};
  e.i64 = v;
  entries.push_back(std::move(e));
}

void Checkpoint::put_int(const std::string& name, std::int64_t x) {
  Entry e;
  e.name = name;
  e.dtype = DType::I64;
  e.shape = {};
  e.i64 = {x};
  entries.push_back(std::move(e));
}

Eigen::VectorXd Checkpoint::get_vector(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != DType::F64 || e.shape.size() != 1)
    throw Error("checkpoint: '" + name + "' is not a float vector");
  return Eigen::Map<const Eigen::VectorXd>(e.f64.data(),
                                           static_cast<Eigen::Index>(e.f64.size()));
}

Eigen::MatrixXd Checkpoint::get_matrix(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != DType::F64 || e.shape.size() != 2)
    throw Error("checkpoint: '" + name + "' is not a float matrix");
  const auto rows = static_cast<Eigen::Index>(e.shape[0]);
  const auto cols = static_cast<Eigen::Index>(e.shape[1]);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = e.f64[static_cast<std::size_t>(i) * cols + j];
  return m;
}

double Checkpoint::get_scalar(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != DType::F64 || !e.shape.empty() || e.f64.size() != 1)
    throw Error("checkpoint: '" + name + "' is not a float scalar");
  return e.f64[0];
}

std::vector<std::int64_t> Checkpoint::get_ints(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != DType::I64 || e.shape.size() != 1)
    throw Error("checkpoint: '" + name + "' is not an integer vector");
  return e.i64;
}

std::int64_t Checkpoint::get_int(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != DType::I64 || !e.shape.empty() || e.i64.size() != 1)
    throw Error("checkpoint: '" + name + "' is not an integer scalar");
  return e.i64[0];
}

namespace {

constexpr char kMagic[4] = {'D', 'E', 'E', 'L'};

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error("checkpoint: truncated file");
  return value;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, 4);
  write_pod(out, ckpt.version);
  write_pod(out, static_cast<std::uint64_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    write_pod(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_pod(out, static_cast<std::uint8_t>(e.dtype));
    write_pod(out, static_cast<std::uint8_t>(e.shape.size()));
    for (std::uint64_t d : e.shape) write_pod(out, d);
    const std::uint64_t payload_bytes =
        e.dtype == Checkpoint::DType::F64 ? e.f64.size() * sizeof(double)
                                          : e.i64.size() * sizeof(std::int64_t);
    write_pod(out, payload_bytes);
    if (e.dtype == Checkpoint::DType::F64)
      out.write(reinterpret_cast<const char*>(e.f64.data()),
                static_cast<std::streamsize>(payload_bytes));
    else
      out.write(reinterpret_cast<const char*>(e.i64.data()),
                static_cast<std::streamsize>(payload_bytes));
  }
  if (!out) throw Error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("checkpoint: bad magic in " + path);

  Checkpoint ckpt;
  ckpt.version = read_pod<std::uint32_t>(in);
  if (ckpt.version != kCheckpointVersion)
    throw Error("checkpoint: version mismatch: file has " +
                std::to_string(ckpt.version) + ", expected " +
                std::to_string(kCheckpointVersion));
  const auto count = read_pod<std::uint64_t>(in);
  ckpt.entries.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    Checkpoint::Entry e;
    const auto name_len = read_pod<std::uint32_t>(in);
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    if (!in) throw Error("checkpoint: truncated file");
    e.dtype = static_cast<Checkpoint::DType>(read_pod<std::uint8_t>(in));
    const auto ndim = read_pod<std::uint8_t>(in);
    e.shape.resize(ndim);
    for (auto& d : e.shape) d = read_pod<std::uint64_t>(in);
    const auto payload_bytes = read_pod<std::uint64_t>(in);
    if (e.dtype == Checkpoint::DType::F64) {
      if (payload_bytes % sizeof(double) != 0)
        throw Error("checkpoint: bad payload size");
      e.f64.resize(payload_bytes / sizeof(double));
      in.read(reinterpret_cast<char*>(e.f64.data()),
              static_cast<std::streamsize>(payload_bytes));
    } else if (e.dtype == Checkpoint::DType::I64) {
      if (payload_bytes % sizeof(std::int64_t) != 0)
        throw Error("checkpoint: bad payload size");
      e.i64.resize(payload_bytes / sizeof(std::int64_t));
      in.read(reinterpret_cast<char*>(e.i64.data()),
              static_cast<std::streamsize>(payload_bytes));
    } else {
      throw Error("checkpoint: unknown dtype");
    }
    if (!in) throw Error("checkpoint: truncated file");
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// JSONL results
// ---------------------------------------------------------------------------

namespace {
std::mutex& jsonl_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

void append_jsonl(const std::string& path, const nlohmann::json& record) {
  std::lock_guard<std::mutex> lock(jsonl_mutex());
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("results: cannot open " + path);
  out << record.dump() << "\n";
  if (!out) throw Error("results: write failed for " + path);
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("results: cannot open " + path);
  std::vector<nlohmann::json> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace deelbo
