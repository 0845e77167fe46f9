#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>

namespace pfedpf {

// Counter-based random stream (Philox4x32-10). The value drawn at position
// `counter` is a pure function of (seed, stream_id, counter), so streams
// handed to concurrent tasks never interact.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0)
      : seed_(seed), stream_id_(stream_id), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t counter() const noexcept { return counter_; }

  // Raw 128-bit block at an arbitrary counter; does not advance the stream.
  std::array<std::uint32_t, 4> block(std::uint64_t counter) const noexcept;

  std::uint64_t next_u64() noexcept;
  // Uniform on the open interval (0, 1).
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;
  // Standard normal via Box-Muller; consumes one block.
  double normal() noexcept;

  // Child stream whose id mixes this stream's id with `tags`.
  RngStream derive(std::initializer_list<std::uint64_t> tags) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_;
};

// Stream id for a tuple of tags (purpose, client, round, ...).
std::uint64_t stream_id_for(std::initializer_list<std::uint64_t> tags) noexcept;

// Fisher-Yates shuffle of any random-access range.
template <typename Range>
void shuffle(Range& range, RngStream& rng) {
  const auto n = static_cast<std::uint64_t>(range.size());
  for (std::uint64_t i = n; i > 1; --i) {
    const std::uint64_t j = rng.below(i);
    using std::swap;
    swap(range[i - 1], range[j]);
  }
}

// Purpose tags for stream derivation.
namespace stream_tag {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kPartition = 2;
inline constexpr std::uint64_t kTrain = 3;
inline constexpr std::uint64_t kFlowInit = 4;
inline constexpr std::uint64_t kFineTune = 5;
inline constexpr std::uint64_t kPredict = 6;
inline constexpr std::uint64_t kDropout = 7;
inline constexpr std::uint64_t kData = 8;
inline constexpr std::uint64_t kOod = 9;
inline constexpr std::uint64_t kProbe = 10;
}  // namespace stream_tag

}  // namespace pfedpf
