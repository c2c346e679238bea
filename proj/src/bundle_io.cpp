#include "gpcache/bundle_io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace gpcache {
namespace {

constexpr char kMatrixMagic[4] = {'G', 'P', 'C', 'B'};
constexpr char kLabelMagic[4] = {'G', 'P', 'C', 'L'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

// ---- little-endian primitives -------------------------------------------

void put_bytes(std::ostream& out, const unsigned char* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}

void put_u8(std::ostream& out, std::uint8_t v) { put_bytes(out, &v, 1); }

void put_f32(std::ostream& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

void need_bytes(std::istream& in, unsigned char* p, std::size_t n,
                const fs::path& path) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": truncated (expected " + std::to_string(n) +
                    " more bytes)");
  }
}

std::uint32_t get_u32(std::istream& in, const fs::path& path) {
  unsigned char b[4];
  need_bytes(in, b, 4, path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in, const fs::path& path) {
  unsigned char b[8];
  need_bytes(in, b, 8, path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::uint8_t get_u8(std::istream& in, const fs::path& path) {
  unsigned char b;
  need_bytes(in, &b, 1, path);
  return b;
}

float get_f32(std::istream& in, const fs::path& path) {
  return std::bit_cast<float>(get_u32(in, path));
}

std::ofstream open_for_write(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::kIo, path.string() + ": cannot open for writing");
  }
  return out;
}

std::ifstream open_for_read(const fs::path& path) {
  if (!fs::exists(path)) {
    throw Error(ErrorKind::kMissingFile, path.string() + ": no such file");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorKind::kIo, path.string() + ": cannot open for reading");
  }
  return in;
}

void check_magic(std::istream& in, const char (&magic)[4],
                 const fs::path& path) {
  unsigned char b[4];
  need_bytes(in, b, 4, path);
  if (std::memcmp(b, magic, 4) != 0) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": bad magic (not a " +
                    std::string(magic, 4) + " file)");
  }
}

void check_no_trailing(std::istream& in, const fs::path& path) {
  char extra;
  in.read(&extra, 1);
  if (in.gcount() != 0) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": trailing bytes after payload");
  }
}

// ---- synthetic generation helpers ----------------------------------------

Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols,
                                std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      m(i, j) = normal(rng);
    }
  }
  return m;
}

// `per_class` noisy unit samples around each center, class-major rows.
FeatureMatrix sample_split(const Eigen::MatrixXd& centers, int per_class,
                           double spread, std::mt19937_64& rng,
                           const std::string& context) {
  const Eigen::Index c = centers.rows();
  const Eigen::Index dim = centers.cols();
  Eigen::MatrixXd x(c * per_class, dim);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (int s = 0; s < per_class; ++s) {
      x.row(j * per_class + s) =
          centers.row(j) + spread * gaussian_matrix(1, dim, rng);
    }
  }
  normalize_rows(x, context);
  return FeatureMatrix{std::move(x)};
}

LabelVector class_major_labels(int classes, int per_class) {
  LabelVector y;
  y.num_classes = classes;
  y.labels.resize(static_cast<Eigen::Index>(classes) * per_class);
  for (int j = 0; j < classes; ++j) {
    for (int s = 0; s < per_class; ++s) {
      y.labels[static_cast<Eigen::Index>(j) * per_class + s] = j;
    }
  }
  return y;
}

// ---- manifest helpers -----------------------------------------------------

json load_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream in = open_for_read(path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": invalid JSON (" + e.what() + ")");
  }
  for (const char* key : {"dim", "num_classes", "class_names", "files"}) {
    if (!manifest.contains(key)) {
      throw Error(ErrorKind::kBadFormat,
                  path.string() + ": manifest missing key '" + key + "'");
    }
  }
  return manifest;
}

void store_manifest(const fs::path& dir, const json& manifest) {
  std::ofstream out = open_for_write(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) {
    throw Error(ErrorKind::kIo, (dir / "manifest.json").string() +
                                    ": write failed");
  }
}

fs::path role_path(const fs::path& dir, const json& files,
                   const std::string& role) {
  if (!files.contains(role) || !files.at(role).is_string()) {
    throw Error(ErrorKind::kBadFormat,
                "manifest: missing file entry for role '" + role + "'");
  }
  return dir / files.at(role).get<std::string>();
}

void check_finite(const Eigen::MatrixXd& m, const std::string& context) {
  if (!m.allFinite()) {
    throw Error(ErrorKind::kNonFinite,
                context + ": non-finite values present");
  }
}

}  // namespace

Eigen::MatrixXd quantize_f32(const Eigen::MatrixXd& m) {
  return m.cast<float>().cast<double>();
}

void write_matrix_file(const fs::path& path, const Eigen::MatrixXd& m) {
  check_finite(m, path.string());
  std::ofstream out = open_for_write(path);
  put_bytes(out, reinterpret_cast<const unsigned char*>(kMatrixMagic), 4);
  put_u32(out, kFormatVersion);
  put_u64(out, static_cast<std::uint64_t>(m.rows()));
  put_u64(out, static_cast<std::uint64_t>(m.cols()));
  put_u8(out, kDtypeF32);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      put_f32(out, static_cast<float>(m(i, j)));
    }
  }
  if (!out) {
    throw Error(ErrorKind::kIo, path.string() + ": write failed");
  }
}

Eigen::MatrixXd read_matrix_file(const fs::path& path) {
  std::ifstream in = open_for_read(path);
  check_magic(in, kMatrixMagic, path);
  const std::uint32_t version = get_u32(in, path);
  if (version != kFormatVersion) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": unsupported version " +
                    std::to_string(version));
  }
  const std::uint64_t rows = get_u64(in, path);
  const std::uint64_t cols = get_u64(in, path);
  if (rows > (1ull << 32) || cols > (1ull << 32)) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": implausible shape in header");
  }
  const std::uint8_t dtype = get_u8(in, path);
  if (dtype != kDtypeF32) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": unsupported dtype " +
                    std::to_string(dtype));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      m(i, j) = static_cast<double>(get_f32(in, path));
    }
  }
  check_no_trailing(in, path);
  check_finite(m, path.string());
  return m;
}

void write_label_file(const fs::path& path, const LabelVector& y) {
  std::ofstream out = open_for_write(path);
  put_bytes(out, reinterpret_cast<const unsigned char*>(kLabelMagic), 4);
  put_u32(out, kFormatVersion);
  put_u64(out, static_cast<std::uint64_t>(y.rows()));
  put_u64(out, static_cast<std::uint64_t>(y.num_classes));
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if (y.labels[i] < 0) {
      throw Error(ErrorKind::kInvalidArgument,
                  path.string() + ": negative label at row " +
                      std::to_string(i));
    }
    put_u32(out, static_cast<std::uint32_t>(y.labels[i]));
  }
  if (!out) {
    throw Error(ErrorKind::kIo, path.string() + ": write failed");
  }
}

LabelVector read_label_file(const fs::path& path) {
  std::ifstream in = open_for_read(path);
  check_magic(in, kLabelMagic, path);
  const std::uint32_t version = get_u32(in, path);
  if (version != kFormatVersion) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": unsupported version " +
                    std::to_string(version));
  }
  const std::uint64_t rows = get_u64(in, path);
  const std::uint64_t classes = get_u64(in, path);
  if (rows > (1ull << 32) || classes == 0 || classes > (1u << 30)) {
    throw Error(ErrorKind::kBadFormat,
                path.string() + ": implausible shape in header");
  }
  LabelVector y;
  y.num_classes = static_cast<int>(classes);
  y.labels.resize(static_cast<Eigen::Index>(rows));
  for (Eigen::Index i = 0; i < y.labels.size(); ++i) {
    const std::uint32_t v = get_u32(in, path);
    if (v >= classes) {
      throw Error(ErrorKind::kBadFormat,
                  path.string() + ": label " + std::to_string(v) +
                      " at row " + std::to_string(i) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
    y.labels[i] = static_cast<int>(v);
  }
  check_no_trailing(in, path);
  return y;
}

void write_bundle(const FeatureBundle& bundle, const fs::path& dir) {
  bundle.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw Error(ErrorKind::kIo,
                dir.string() + ": cannot create directory (" + ec.message() +
                    ")");
  }

  // Enforce the unit-norm contract on copies so what lands on disk is what
  // a loader accepts.
  auto prepared = [&](const FeatureMatrix& x,
                      const std::string& role) -> Eigen::MatrixXd {
    Eigen::MatrixXd data = x.data;
    enforce_unit_rows(data, role);
    return data;
  };

  json files;
  write_matrix_file(dir / "train_x.gpcb", prepared(bundle.train_x, "train_x"));
  files["train_x"] = "train_x.gpcb";
  write_label_file(dir / "train_y.gpcl", bundle.train_y);
  files["train_y"] = "train_y.gpcl";
  write_matrix_file(dir / "val_x.gpcb", prepared(bundle.val_x, "val_x"));
  files["val_x"] = "val_x.gpcb";
  write_label_file(dir / "val_y.gpcl", bundle.val_y);
  files["val_y"] = "val_y.gpcl";
  write_matrix_file(dir / "test_x.gpcb", prepared(bundle.test_x, "test_x"));
  files["test_x"] = "test_x.gpcb";
  write_label_file(dir / "test_y.gpcl", bundle.test_y);
  files["test_y"] = "test_y.gpcl";

  Eigen::MatrixXd wt = bundle.weights.matrix.transpose();
  enforce_unit_rows(wt, "weights");
  write_matrix_file(dir / "weights.gpcb", wt.transpose());
  files["weights"] = "weights.gpcb";

  if (bundle.unlabeled) {
    write_matrix_file(dir / "unlabeled.gpcb",
                      prepared(*bundle.unlabeled, "unlabeled"));
    files["unlabeled"] = "unlabeled.gpcb";
  }
  if (bundle.unlabeled_augmented) {
    write_matrix_file(dir / "unlabeled_aug.gpcb",
                      prepared(*bundle.unlabeled_augmented, "unlabeled_aug"));
    files["unlabeled_aug"] = "unlabeled_aug.gpcb";
  }
  if (bundle.calib_proj) {
    write_matrix_file(dir / "calib_proj.gpcb", *bundle.calib_proj);
    files["calib_proj"] = "calib_proj.gpcb";
  }
  if (bundle.calib_bias) {
    write_matrix_file(dir / "calib_bias.gpcb", bundle.calib_bias->transpose());
    files["calib_bias"] = "calib_bias.gpcb";
  }

  json manifest;
  manifest["dim"] = bundle.dim();
  manifest["num_classes"] = bundle.num_classes();
  manifest["class_names"] = bundle.class_names;
  manifest["files"] = files;
  store_manifest(dir, manifest);
}

FeatureBundle read_bundle(const fs::path& dir) {
  const json manifest = load_manifest(dir);
  const fs::path manifest_path = dir / "manifest.json";

  Eigen::Index dim = 0;
  int num_classes = 0;
  try {
    dim = manifest.at("dim").get<Eigen::Index>();
    num_classes = manifest.at("num_classes").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kBadFormat,
                manifest_path.string() + ": bad dim/num_classes (" + e.what() +
                    ")");
  }
  if (dim < 1 || num_classes < 1) {
    throw Error(ErrorKind::kBadFormat,
                manifest_path.string() + ": dim and num_classes must be >= 1");
  }
  const json& files = manifest.at("files");
  if (!files.is_object()) {
    throw Error(ErrorKind::kBadFormat,
                manifest_path.string() + ": 'files' must be an object");
  }

  FeatureBundle bundle;
  try {
    bundle.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kBadFormat,
                manifest_path.string() + ": bad class_names (" + e.what() +
                    ")");
  }

  auto load_features = [&](const std::string& role) -> FeatureMatrix {
    Eigen::MatrixXd data = read_matrix_file(role_path(dir, files, role));
    if (data.cols() != dim) {
      throw Error(ErrorKind::kBadFormat,
                  role + ": dim " + std::to_string(data.cols()) +
                      " disagrees with manifest dim " + std::to_string(dim));
    }
    enforce_unit_rows(data, role);
    return FeatureMatrix{std::move(data)};
  };
  auto load_labels = [&](const std::string& role,
                         Eigen::Index feature_rows) -> LabelVector {
    LabelVector y = read_label_file(role_path(dir, files, role));
    if (y.num_classes != num_classes) {
      throw Error(ErrorKind::kBadFormat,
                  role + ": num_classes " + std::to_string(y.num_classes) +
                      " disagrees with manifest " +
                      std::to_string(num_classes));
    }
    if (y.rows() != feature_rows) {
      throw Error(ErrorKind::kBadFormat,
                  role + ": " + std::to_string(y.rows()) + " labels for " +
                      std::to_string(feature_rows) + " feature rows");
    }
    return y;
  };

  bundle.train_x = load_features("train_x");
  bundle.train_y = load_labels("train_y", bundle.train_x.rows());
  bundle.val_x = load_features("val_x");
  bundle.val_y = load_labels("val_y", bundle.val_x.rows());
  bundle.test_x = load_features("test_x");
  bundle.test_y = load_labels("test_y", bundle.test_x.rows());

  Eigen::MatrixXd w = read_matrix_file(role_path(dir, files, "weights"));
  if (w.rows() != dim || w.cols() != num_classes) {
    throw Error(ErrorKind::kBadFormat,
                "weights: expected " + std::to_string(dim) + " x " +
                    std::to_string(num_classes) + ", got " +
                    std::to_string(w.rows()) + " x " +
                    std::to_string(w.cols()));
  }
  Eigen::MatrixXd wt = w.transpose();
  enforce_unit_rows(wt, "weights (columns)");
  bundle.weights.matrix = wt.transpose();

  if (files.contains("unlabeled")) {
    bundle.unlabeled = load_features("unlabeled");
  }
  if (files.contains("unlabeled_aug")) {
    bundle.unlabeled_augmented = load_features("unlabeled_aug");
  }
  if (files.contains("calib_proj")) {
    Eigen::MatrixXd proj = read_matrix_file(role_path(dir, files, "calib_proj"));
    if (proj.rows() != dim || proj.cols() != dim) {
      throw Error(ErrorKind::kBadFormat,
                  "calib_proj: expected " + std::to_string(dim) + " x " +
                      std::to_string(dim));
    }
    bundle.calib_proj = std::move(proj);
  }
  if (files.contains("calib_bias")) {
    Eigen::MatrixXd bias = read_matrix_file(role_path(dir, files, "calib_bias"));
    if (bias.rows() != 1 || bias.cols() != dim) {
      throw Error(ErrorKind::kBadFormat,
                  "calib_bias: expected 1 x " + std::to_string(dim));
    }
    bundle.calib_bias = bias.row(0).transpose();
  }

  bundle.validate();
  return bundle;
}

void attach_calibration(const fs::path& dir, const Eigen::MatrixXd& proj,
                        const std::optional<Eigen::VectorXd>& bias) {
  if (proj.rows() != proj.cols()) {
    throw Error(ErrorKind::kInvalidArgument,
                "attach_calibration: projection must be square");
  }
  json manifest = load_manifest(dir);
  write_matrix_file(dir / "calib_proj.gpcb", proj);
  manifest["files"]["calib_proj"] = "calib_proj.gpcb";
  if (bias) {
    write_matrix_file(dir / "calib_bias.gpcb", bias->transpose());
    manifest["files"]["calib_bias"] = "calib_bias.gpcb";
  }
  store_manifest(dir, manifest);
}

FeatureBundle generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 1 || spec.shots < 1 || spec.dim < 2) {
    throw Error(ErrorKind::kInvalidArgument,
                "generate_synthetic: need classes >= 1, shots >= 1, dim >= 2");
  }
  if (spec.spread < 0 || spec.text_noise < 0 || spec.test_per_class < 0 ||
      spec.val_per_class < 0 || spec.unlabeled_per_class < 0) {
    throw Error(ErrorKind::kInvalidArgument,
                "generate_synthetic: negative sizes/noise");
  }
  const int val_pc = spec.val_per_class > 0 ? spec.val_per_class : spec.shots;
  const int unl_pc = spec.unlabeled_per_class > 0 ? spec.unlabeled_per_class
                                                  : spec.test_per_class;

  std::mt19937_64 rng(spec.seed);

  Eigen::MatrixXd centers = gaussian_matrix(spec.classes, spec.dim, rng);
  normalize_rows(centers, "centers");

  Eigen::MatrixXd w_rows =
      centers + spec.text_noise * gaussian_matrix(spec.classes, spec.dim, rng);
  normalize_rows(w_rows, "weights");

  FeatureBundle bundle;
  bundle.weights.matrix = quantize_f32(w_rows.transpose());

  bundle.train_x = sample_split(centers, spec.shots, spec.spread, rng, "train_x");
  bundle.train_y = class_major_labels(spec.classes, spec.shots);
  bundle.val_x = sample_split(centers, val_pc, spec.spread, rng, "val_x");
  bundle.val_y = class_major_labels(spec.classes, val_pc);
  bundle.test_x =
      sample_split(centers, spec.test_per_class, spec.spread, rng, "test_x");
  bundle.test_y = class_major_labels(spec.classes, spec.test_per_class);

  if (unl_pc > 0) {
    FeatureMatrix unl = sample_split(centers, unl_pc, spec.spread, rng, "unlabeled");
    Eigen::MatrixXd aug =
        unl.data + spec.spread * gaussian_matrix(unl.data.rows(), spec.dim, rng);
    normalize_rows(aug, "unlabeled_aug");
    unl.data = quantize_f32(unl.data);
    bundle.unlabeled = std::move(unl);
    bundle.unlabeled_augmented = FeatureMatrix{quantize_f32(aug)};
  }

  bundle.train_x.data = quantize_f32(bundle.train_x.data);
  bundle.val_x.data = quantize_f32(bundle.val_x.data);
  bundle.test_x.data = quantize_f32(bundle.test_x.data);

  bundle.class_names.reserve(spec.classes);
  for (int j = 0; j < spec.classes; ++j) {
    char name[32];
    std::snprintf(name, sizeof name, "class_%03d", j);
    bundle.class_names.emplace_back(name);
  }

  bundle.validate();
  return bundle;
}

}  // namespace gpcache
