#include "atseg/segnet.hpp"

#include <cmath>
#include <random>

#include "atseg/errors.hpp"
#include "atseg/ops.hpp"
#include "binary_io.hpp"

namespace atseg {

namespace {

constexpr char kCheckpointMagic[6] = {'A', 'T', 'S', 'E', 'G', '1'};
constexpr std::size_t kCheckpointHeader = 6 + 4 * 4;

struct ConvSpec {
  std::string name;
  std::size_t in, out, k;
};

std::vector<ConvSpec> layout(std::uint32_t base, std::uint32_t levels, std::uint32_t classes) {
  if (base < 2) throw ParameterError("segnet needs at least 2 base channels");
  if (levels < 2) throw ParameterError("segnet needs at least 2 levels");
  if (classes < 2) throw ParameterError("segnet needs at least 2 classes");
  auto width = [base](std::uint32_t level) { return std::size_t{base} << level; };

  std::vector<ConvSpec> convs;
  std::size_t in = 1;
  for (std::uint32_t l = 0; l < levels; ++l) {
    const std::string tag = l + 1 == levels ? "bottleneck" : "enc" + std::to_string(l);
    convs.push_back({tag + ".conv_a", in, width(l), 3});
    convs.push_back({tag + ".conv_b", width(l), width(l), 3});
    in = width(l);
  }
  for (std::uint32_t l = levels - 1; l-- > 0;) {
    const std::string tag = "dec" + std::to_string(l);
    convs.push_back({tag + ".up", width(l + 1), width(l), 3});
    convs.push_back({tag + ".merge", 2 * width(l), width(l), 3});
    convs.push_back({tag + ".conv", width(l), width(l), 3});
  }
  convs.push_back({"head", width(0), classes, 1});
  return convs;
}

}  // namespace

std::size_t segnet_parameter_count(std::uint32_t base_channels, std::uint32_t levels, std::uint32_t classes) {
  std::size_t total = 0;
  for (const auto& c : layout(base_channels, levels, classes)) total += c.out * c.in * c.k * c.k + c.out;
  return total;
}

std::size_t SegNetParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.numel();
  return total;
}

SegNetParams SegNetParams::clone() const {
  SegNetParams copy = *this;
  for (auto& t : copy.tensors) {
    const bool grad = t.requires_grad();
    t = t.clone();
    t.set_requires_grad(grad);
  }
  return copy;
}

bool SegNetParams::all_finite() const {
  for (const auto& t : tensors) {
    if (!t.all_finite()) return false;
  }
  return true;
}

void SegNetParams::zero_grad() {
  for (auto& t : tensors) t.zero_grad();
}

SegNetParams init_segnet(std::uint32_t seed, std::uint32_t base_channels, std::uint32_t levels,
                         std::uint32_t classes) {
  SegNetParams params;
  params.base_channels = base_channels;
  params.levels = levels;
  params.classes = classes;
  params.seed = seed;

  std::mt19937_64 rng(seed);
  for (const auto& conv : layout(base_channels, levels, classes)) {
    const std::size_t fan_in = conv.in * conv.k * conv.k;
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor kernel = Tensor::zeros({conv.out, conv.in, conv.k, conv.k}, true);
    for (double& v : kernel.data()) v = normal(rng);
    params.names.push_back(conv.name + ".weight");
    params.tensors.push_back(kernel);
    params.names.push_back(conv.name + ".bias");
    params.tensors.push_back(Tensor::zeros({conv.out}, true));
  }
  return params;
}

Tensor segnet_forward(Tape& tape, const SegNetParams& p, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != 1) {
    throw StructuralError("segnet expects [N,1,H,W] input, got " + shape_string(x.shape()));
  }
  const std::size_t factor = std::size_t{1} << (p.levels - 1);
  if (x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
    throw StructuralError("segnet input height and width must be divisible by " + std::to_string(factor) +
                          ", got " + shape_string(x.shape()));
  }

  std::size_t next = 0;
  auto conv = [&](const Tensor& in) {
    const Tensor& kernel = p.tensors.at(next);
    const Tensor& bias = p.tensors.at(next + 1);
    next += 2;
    return ops::conv2d(tape, in, kernel, bias, kernel.dim(2) / 2);
  };
  auto conv_relu = [&](const Tensor& in) { return ops::relu(tape, conv(in)); };

  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::uint32_t l = 0; l < p.levels; ++l) {
    if (l > 0) h = ops::maxpool2(tape, h);
    h = conv_relu(conv_relu(h));
    if (l + 1 < p.levels) skips.push_back(h);
  }
  for (std::uint32_t l = p.levels - 1; l-- > 0;) {
    h = conv_relu(ops::upsample_nearest2(tape, h));
    h = ops::concat_channels(tape, h, skips[l]);
    h = conv_relu(conv_relu(h));
  }
  return ops::softmax_channels(tape, conv(h));
}

void save_checkpoint(const SegNetParams& params, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  binio::put_u32(bytes, params.base_channels);
  binio::put_u32(bytes, params.levels);
  binio::put_u32(bytes, params.classes);
  binio::put_u32(bytes, params.seed);
  for (const auto& t : params.tensors) {
    for (double v : t.data()) binio::put_f64(bytes, v);
  }
  binio::write_file(path, bytes);
}

SegNetParams load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  if (bytes.size() < kCheckpointHeader) {
    throw FormatError("checkpoint " + path.string() + " is shorter than its header", bytes.size());
  }
  for (std::size_t i = 0; i < 6; ++i) {
    if (bytes[i] != static_cast<std::uint8_t>(kCheckpointMagic[i])) {
      throw FormatError("checkpoint " + path.string() + " has a bad magic", i);
    }
  }
  const std::uint32_t base = binio::get_u32(bytes, 6);
  const std::uint32_t levels = binio::get_u32(bytes, 10);
  const std::uint32_t classes = binio::get_u32(bytes, 14);
  const std::uint32_t seed = binio::get_u32(bytes, 18);
  if (base < 2 || base > 1024 || levels < 2 || levels > 8 || classes < 2 || classes > 1024) {
    throw FormatError("checkpoint " + path.string() + " has an implausible header", 6);
  }

  SegNetParams params = init_segnet(seed, base, levels, classes);
  const std::size_t expected = kCheckpointHeader + 8 * params.parameter_count();
  if (bytes.size() != expected) {
    throw FormatError("checkpoint " + path.string() + " has " + std::to_string(bytes.size()) +
                          " bytes, header implies " + std::to_string(expected),
                      std::min(bytes.size(), expected));
  }
  std::size_t offset = kCheckpointHeader;
  for (auto& t : params.tensors) {
    for (double& v : t.data()) {
      v = binio::get_f64(bytes, offset);
      offset += 8;
    }
  }
  return params;
}

}  // namespace atseg
