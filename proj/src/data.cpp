#include "pfedpf/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>

#include "pfedpf/errors.hpp"

namespace pfedpf {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset,
                        const std::string& what) {
  if (bytes.size() < offset + 4) throw TruncatedFile(what + ": header truncated");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace

Dataset Dataset::subset(std::span<const Eigen::Index> rows) const {
  Dataset out;
  out.class_count = class_count;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  if (labeled()) out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(rows[i]);
    if (labeled()) out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

Dataset gen_blobs(int class_count, int per_class, int input_dim, double spread, RngStream& rng,
                  double center_scale) {
  if (class_count < 2) throw Error("gen_blobs: class_count must be >= 2");
  if (input_dim < 1) throw Error("gen_blobs: input_dim must be >= 1");
  Matrix centers = Matrix::Zero(class_count, input_dim);
  for (int c = 0; c < class_count; ++c) {
    if (input_dim >= class_count) {
      centers(c, c) = center_scale;
    } else {
      const double angle = 2.0 * std::numbers::pi * c / class_count;
      centers(c, 0) = center_scale * std::cos(angle);
      if (input_dim > 1) centers(c, 1) = center_scale * std::sin(angle);
    }
  }
  Dataset out;
  out.class_count = class_count;
  out.inputs.resize(static_cast<Eigen::Index>(class_count) * per_class, input_dim);
  out.labels.reserve(static_cast<std::size_t>(class_count) * per_class);
  Eigen::Index row = 0;
  for (int c = 0; c < class_count; ++c) {
    for (int i = 0; i < per_class; ++i, ++row) {
      for (int j = 0; j < input_dim; ++j) out.inputs(row, j) = centers(c, j) + spread * rng.normal();
      out.labels.push_back(c);
    }
  }
  return out;
}

Dataset gen_noise(const NoiseConfig& cfg, RngStream& rng) {
  if (!(cfg.delta >= 0.0)) throw Error("gen_noise: delta must be >= 0");
  Dataset out;
  out.inputs.resize(cfg.count, cfg.input_dim);
  for (Eigen::Index i = 0; i < out.inputs.rows(); ++i)
    for (Eigen::Index j = 0; j < out.inputs.cols(); ++j)
      out.inputs(i, j) = cfg.delta * rng.uniform(-1.0, 1.0);
  return out;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_bytes(images_path);
  const auto labels = read_bytes(labels_path);

  const std::uint32_t image_magic = read_be32(images, 0, "images");
  if (image_magic != kIdxImagesMagic) throw BadMagic("images: unexpected magic " + hex64(image_magic));
  const std::uint32_t label_magic = read_be32(labels, 0, "labels");
  if (label_magic != kIdxLabelsMagic) throw BadMagic("labels: unexpected magic " + hex64(label_magic));

  const std::uint32_t count = read_be32(images, 4, "images");
  const std::uint32_t rows = read_be32(images, 8, "images");
  const std::uint32_t cols = read_be32(images, 12, "images");
  const std::uint32_t label_count = read_be32(labels, 4, "labels");
  if (count != label_count) {
    throw CountMismatch("idx: " + std::to_string(count) + " images vs " +
                        std::to_string(label_count) + " labels");
  }
  const std::size_t dim = std::size_t{rows} * cols;
  if (images.size() < 16 + std::size_t{count} * dim) throw TruncatedFile("images: pixel data truncated");
  if (labels.size() < 8 + std::size_t{count}) throw TruncatedFile("labels: label data truncated");

  Dataset out;
  out.inputs.resize(count, static_cast<Eigen::Index>(dim));
  out.labels.resize(count);
  int max_label = -1;
  for (std::uint32_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < dim; ++j)
      out.inputs(i, static_cast<Eigen::Index>(j)) = images[16 + i * dim + j] / 255.0;
    out.labels[i] = labels[8 + i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.class_count = max_label + 1;
  return out;
}

std::vector<std::uint8_t> encode_idx_images(const IdxImages& images) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.pixels.size());
  put_be32(out, kIdxImagesMagic);
  put_be32(out, images.count);
  put_be32(out, images.rows);
  put_be32(out, images.cols);
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  put_be32(out, kIdxLabelsMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (const auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace pfedpf
