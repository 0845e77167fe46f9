#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pfedpf/numerics.hpp"

namespace pfedpf {

// Rows of `inputs` are examples. OOD sets carry no labels.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  int class_count = 0;

  Eigen::Index size() const noexcept { return inputs.rows(); }
  Eigen::Index input_dim() const noexcept { return inputs.cols(); }
  bool labeled() const noexcept { return !labels.empty(); }

  Dataset subset(std::span<const Eigen::Index> rows) const;
};

// Gaussian blobs around class centers. Centers are scaled one-hot vertices
// (a simplex) when input_dim >= class_count, otherwise points on a circle in
// the first two coordinates.
Dataset gen_blobs(int class_count, int per_class, int input_dim, double spread, RngStream& rng,
                  double center_scale = 2.0);

struct NoiseConfig {
  double delta = 2000.0;
  int count = 500;
  int input_dim = 0;
};

// Far-field probe set: delta * u, u uniform on [-1, 1]^input_dim.
Dataset gen_noise(const NoiseConfig& cfg, RngStream& rng);

// IDX loaders (big-endian headers; magic 0x00000803 images, 0x00000801
// labels). Pixels are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

struct IdxImages {
  std::uint32_t count = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;
};

std::vector<std::uint8_t> encode_idx_images(const IdxImages& images);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

// FNV-1a 64-bit checksum, rendered as 16 hex digits.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t value);

}  // namespace pfedpf
