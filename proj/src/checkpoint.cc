// SPDX-License-Identifier: Apache-2.0
#include "gdfq/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "gdfq/errors.h"

namespace gdfq {
namespace {

constexpr std::uint8_t kDense = 1;
constexpr std::uint8_t kBatchNorm = 2;
constexpr std::uint8_t kRelu = 3;
constexpr std::uint32_t kFlagQuant = 1;

// Upper bound on any single dimension read from a file.
constexpr std::uint64_t kMaxDim = 1u << 24;

std::uint64_t checked_dim(ByteReader& r) {
  const std::uint64_t d = r.u64();
  if (d == 0 || d > kMaxDim) throw FileError("checkpoint: implausible dimension");
  return d;
}

void write_quant(ByteWriter& w, const QuantWrapper& q) {
  w.i32(q.weight_bits);
  w.i32(q.act_bits);
  w.u8(q.refresh_weight_range ? 1 : 0);
  w.u8(q.quantize_input ? 1 : 0);
  w.f64(q.weight.lower);
  w.f64(q.weight.upper);
  w.f64(q.activation.lower);
  w.f64(q.activation.upper);
  w.f64(q.activation.momentum);
  w.u8(q.activation.initialized ? 1 : 0);
  w.u8(q.activation.frozen ? 1 : 0);
  w.i32(q.activation.epochs_observed);
}

QuantWrapper read_quant(ByteReader& r) {
  QuantWrapper q;
  q.weight_bits = r.i32();
  q.act_bits = r.i32();
  q.refresh_weight_range = r.u8() != 0;
  q.quantize_input = r.u8() != 0;
  const double wl = r.f64();
  const double wu = r.f64();
  if (wu > wl) {
    q.weight = compute_quant_params(wl, wu, q.weight_bits);
  } else {
    q.weight.bits = q.weight_bits;
  }
  q.activation.lower = r.f64();
  q.activation.upper = r.f64();
  q.activation.momentum = r.f64();
  q.activation.initialized = r.u8() != 0;
  q.activation.frozen = r.u8() != 0;
  q.activation.epochs_observed = r.i32();
  if (q.act_bits < 2 || q.weight_bits < 2) throw FileError("checkpoint: bad bitwidth");
  return q;
}

}  // namespace

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::f64s(std::span<const double> v) {
  for (double x : v) f64(x);
}

void ByteWriter::magic(const char (&m)[9]) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(m[i]));
}

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) throw FileError("checkpoint: truncated data");
}

std::uint8_t ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::vector<double> ByteReader::f64s(std::size_t n) {
  need(n * 8);
  std::vector<double> out(n);
  for (auto& v : out) v = f64();
  return out;
}

void ByteReader::expect_magic(const char (&m)[9]) {
  need(8);
  if (std::memcmp(bytes_.data() + pos_, m, 8) != 0) {
    throw FileError(std::string("checkpoint: missing magic ") + m);
  }
  pos_ += 8;
}

void ByteReader::skip(std::size_t n) {
  need(n);
  pos_ += n;
}

std::vector<std::uint8_t> model_to_bytes(const Model& model) {
  ByteWriter w;
  w.magic("GDFQMODL");
  w.u32(kModelCheckpointVersion);
  const bool quant = model.quantized();
  w.u32(quant ? kFlagQuant : 0);
  w.u64(model.input_dim());
  w.u64(model.num_classes());
  w.u64(model.layers().size());
  for (const auto& layer : model.layers()) {
    if (layer.is_dense()) {
      const auto& d = layer.dense();
      w.u8(kDense);
      w.u64(d.in());
      w.u64(d.out());
      w.f64s(d.weight.data());
      w.f64s(d.bias.data());
      if (quant) {
        w.u8(layer.quant ? 1 : 0);
        if (layer.quant) write_quant(w, *layer.quant);
      }
    } else if (layer.is_batchnorm()) {
      const auto& bn = layer.batchnorm();
      w.u8(kBatchNorm);
      w.u64(bn.features());
      w.u8(static_cast<std::uint8_t>(bn.mode));
      w.f64(bn.momentum);
      w.f64(bn.eps);
      w.f64s(bn.gamma.data());
      w.f64s(bn.beta.data());
      w.f64s(bn.running_mean);
      w.f64s(bn.running_var);
    } else {
      w.u8(kRelu);
    }
  }
  return w.take();
}

Model model_from_bytes(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("GDFQMODL");
  const std::uint32_t version = r.u32();
  if (version != kModelCheckpointVersion) {
    throw FileError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t flags = r.u32();
  const std::uint64_t input_dim = checked_dim(r);
  const std::uint64_t num_classes = checked_dim(r);
  const std::uint64_t count = r.u64();
  if (count > kMaxDim) throw FileError("checkpoint: implausible layer count");
  Model model(input_dim, num_classes);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint8_t kind = r.u8();
    Layer layer{ReluLayer{}, std::nullopt};
    if (kind == kDense) {
      const std::uint64_t in = checked_dim(r), out = checked_dim(r);
      DenseLayer d;
      d.weight = Tensor::from({out, in}, r.f64s(out * in), true);
      d.bias = Tensor::from({out}, r.f64s(out), true);
      layer.impl = std::move(d);
      if (flags & kFlagQuant) {
        if (r.u8() != 0) layer.quant = read_quant(r);
      }
    } else if (kind == kBatchNorm) {
      const std::uint64_t f = checked_dim(r);
      BatchNormLayer bn;
      const std::uint8_t mode = r.u8();
      if (mode > static_cast<std::uint8_t>(BnMode::kFixed)) {
        throw FileError("checkpoint: unknown batch-norm mode");
      }
      bn.mode = static_cast<BnMode>(mode);
      bn.momentum = r.f64();
      bn.eps = r.f64();
      bn.gamma = Tensor::from({f}, r.f64s(f), true);
      bn.beta = Tensor::from({f}, r.f64s(f), true);
      bn.running_mean = r.f64s(f);
      bn.running_var = r.f64s(f);
      layer.impl = std::move(bn);
    } else if (kind != kRelu) {
      throw FileError("checkpoint: unknown layer kind " + std::to_string(kind));
    }
    model.add_layer(std::move(layer));
  }
  if (!r.done()) throw FileError("checkpoint: trailing bytes");
  try {
    model.validate();
  } catch (const DimensionError& e) {
    throw FileError(std::string("checkpoint: ") + e.what());
  }
  return model;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError("short write to " + path.string());
}

void save_model(const Model& model, const std::filesystem::path& path) {
  write_file_bytes(path, model_to_bytes(model));
}

Model load_model(const std::filesystem::path& path) {
  return model_from_bytes(read_file_bytes(path));
}

}  // namespace gdfq
