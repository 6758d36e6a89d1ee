// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gdfq/nn.h"

namespace gdfq {

/// Model checkpoint layout (all integers and floats little-endian):
///
///   magic "GDFQMODL" | u32 version | u32 flags (bit 0: quantization records)
///   u64 input_dim | u64 num_classes | u64 layer_count
///   per layer: u8 kind (1 dense, 2 batchnorm, 3 relu), then
///     dense: u64 in, u64 out, f64[out*in] weight, f64[out] bias
///            [flags bit 0] u8 has_quant, and if set:
///              i32 weight_bits, i32 act_bits, u8 refresh, u8 quantize_input,
///              f64 weight_l, f64 weight_u,
///              f64 act_l, f64 act_u, f64 act_momentum,
///              u8 act_initialized, u8 act_frozen, i32 act_epochs_observed
///     batchnorm: u64 features, u8 mode, f64 momentum, f64 eps,
///                f64[] gamma, beta, running_mean, running_var
inline constexpr std::uint32_t kModelCheckpointVersion = 1;

std::vector<std::uint8_t> model_to_bytes(const Model& model);
Model model_from_bytes(std::span<const std::uint8_t> bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

/// Little-endian encoder shared by the checkpoint formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> v);
  void raw(std::span<const std::uint8_t> v) { buf_.insert(buf_.end(), v.begin(), v.end()); }
  void magic(const char (&m)[9]);

  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64();
  double f64();
  std::vector<double> f64s(std::size_t n);
  void expect_magic(const char (&m)[9]);
  std::span<const std::uint8_t> rest() const { return bytes_.subspan(pos_); }
  void skip(std::size_t n);
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace gdfq
