#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "pfedpf/flows.hpp"
#include "pfedpf/laplace.hpp"
#include "pfedpf/model.hpp"

namespace pfedpf {

// Little-endian binary writer/reader shared by all checkpoint formats.
class ByteWriter {
 public:
  void put_magic(std::string_view magic);
  void put_u32(std::uint32_t v);
  void put_u64(std::uint64_t v);
  void put_f64(double v);
  template <typename Derived>
  void put_row_major(const Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(m(r, c));
  }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
  std::vector<std::uint8_t> take() noexcept { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void expect_magic(std::string_view magic);
  bool peek_magic(std::string_view magic) const;
  std::uint32_t get_u32();
  std::uint64_t get_u64();
  double get_f64();
  Matrix get_row_major(Eigen::Index rows, Eigen::Index cols);
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline constexpr std::uint32_t kModelCheckpointVersion = 1;

// "PFPF", u32 version, u32 layer count (extractor layers + classifier),
// per layer u32 out, u32 in; then per layer weight (row-major) and bias.
std::vector<std::uint8_t> encode_model(const MlpParams& params);
MlpParams decode_model(std::span<const std::uint8_t> bytes);

// "PFPO", u64 p, mean[p], covariance[p*p] row-major, gamma; optionally
// followed by "PFFL", u32 L, u64 p, per layer x0[p], alpha_raw, beta_raw.
std::vector<std::uint8_t> encode_posterior(const GaussianPosterior& post, double prior_precision,
                                           const FlowStack* flow = nullptr);

struct PosteriorCheckpoint {
  GaussianPosterior posterior;
  double prior_precision = 0.0;
  std::optional<FlowStack> flow;
};
PosteriorCheckpoint decode_posterior(std::span<const std::uint8_t> bytes);

void append_flow(ByteWriter& out, const FlowStack& flow, Eigen::Index dim);
FlowStack read_flow(ByteReader& in);

}  // namespace pfedpf
