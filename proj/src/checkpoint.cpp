#include "pfedpf/checkpoint.hpp"

#include <bit>
#include <string>

#include "pfedpf/errors.hpp"

namespace pfedpf {

void ByteWriter::put_magic(std::string_view magic) {
  for (const char c : magic) bytes_.push_back(static_cast<std::uint8_t>(c));
}

void ByteWriter::put_u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::put_u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) throw TruncatedFile("checkpoint truncated at byte " + std::to_string(pos_));
}

bool ByteReader::peek_magic(std::string_view magic) const {
  if (bytes_.size() - pos_ < magic.size()) return false;
  for (std::size_t i = 0; i < magic.size(); ++i)
    if (bytes_[pos_ + i] != static_cast<std::uint8_t>(magic[i])) return false;
  return true;
}

void ByteReader::expect_magic(std::string_view magic) {
  need(magic.size());
  if (!peek_magic(magic)) throw BadMagic("expected magic " + std::string(magic));
  pos_ += magic.size();
}

std::uint32_t ByteReader::get_u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::get_u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::get_f64() { return std::bit_cast<double>(get_u64()); }

Matrix ByteReader::get_row_major(Eigen::Index rows, Eigen::Index cols) {
  need(static_cast<std::size_t>(rows * cols) * 8);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get_f64();
  return m;
}

std::vector<std::uint8_t> encode_model(const MlpParams& params) {
  validate(params);
  ByteWriter out;
  out.put_magic("PFPF");
  out.put_u32(kModelCheckpointVersion);
  out.put_u32(static_cast<std::uint32_t>(params.extractor.size() + 1));
  auto dims = [&out](const DenseLayer& layer) {
    out.put_u32(static_cast<std::uint32_t>(layer.out_dim()));
    out.put_u32(static_cast<std::uint32_t>(layer.in_dim()));
  };
  for (const auto& layer : params.extractor) dims(layer);
  dims(params.classifier);
  auto data = [&out](const DenseLayer& layer) {
    out.put_row_major(layer.weight);
    out.put_row_major(layer.bias);
  };
  for (const auto& layer : params.extractor) data(layer);
  data(params.classifier);
  return out.take();
}

MlpParams decode_model(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.expect_magic("PFPF");
  const std::uint32_t version = in.get_u32();
  if (version != kModelCheckpointVersion)
    throw BadMagic("PFPF: unsupported version " + std::to_string(version));
  const std::uint32_t layers = in.get_u32();
  if (layers < 1) throw Error("PFPF: checkpoint has no layers");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> dims;
  for (std::uint32_t l = 0; l < layers; ++l) {
    const auto out_dim = static_cast<Eigen::Index>(in.get_u32());
    const auto in_dim = static_cast<Eigen::Index>(in.get_u32());
    dims.emplace_back(out_dim, in_dim);
  }
  MlpParams params;
  for (std::uint32_t l = 0; l < layers; ++l) {
    DenseLayer layer;
    layer.weight = in.get_row_major(dims[l].first, dims[l].second);
    layer.bias = in.get_row_major(dims[l].first, 1);
    if (l + 1 == layers) {
      params.classifier = std::move(layer);
    } else {
      params.extractor.push_back(std::move(layer));
    }
  }
  validate(params);
  return params;
}

void append_flow(ByteWriter& out, const FlowStack& flow, Eigen::Index dim) {
  out.put_magic("PFFL");
  out.put_u32(static_cast<std::uint32_t>(flow.length()));
  out.put_u64(static_cast<std::uint64_t>(dim));
  for (const auto& layer : flow.layers) {
    if (layer.dim() != dim) throw DimensionMismatch("PFFL: layer dimension");
    out.put_row_major(layer.x0);
    out.put_f64(layer.alpha_raw);
    out.put_f64(layer.beta_raw);
  }
}

FlowStack read_flow(ByteReader& in) {
  in.expect_magic("PFFL");
  const std::uint32_t length = in.get_u32();
  const auto dim = static_cast<Eigen::Index>(in.get_u64());
  FlowStack flow;
  for (std::uint32_t l = 0; l < length; ++l) {
    RadialLayer layer;
    layer.x0 = in.get_row_major(dim, 1);
    layer.alpha_raw = in.get_f64();
    layer.beta_raw = in.get_f64();
    flow.layers.push_back(std::move(layer));
  }
  return flow;
}

std::vector<std::uint8_t> encode_posterior(const GaussianPosterior& post, double prior_precision,
                                           const FlowStack* flow) {
  ByteWriter out;
  out.put_magic("PFPO");
  out.put_u64(static_cast<std::uint64_t>(post.dim()));
  out.put_row_major(post.mean());
  out.put_row_major(post.covariance());
  out.put_f64(prior_precision);
  if (flow != nullptr) append_flow(out, *flow, post.dim());
  return out.take();
}

PosteriorCheckpoint decode_posterior(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.expect_magic("PFPO");
  const auto p = static_cast<Eigen::Index>(in.get_u64());
  Vector mean = in.get_row_major(p, 1);
  Matrix cov = in.get_row_major(p, p);
  PosteriorCheckpoint out;
  out.prior_precision = in.get_f64();
  out.posterior = cov.isZero(0.0) ? GaussianPosterior::point_mass(std::move(mean))
                                  : GaussianPosterior::from_covariance(std::move(mean), std::move(cov));
  if (!in.at_end()) out.flow = read_flow(in);
  return out;
}

}  // namespace pfedpf
