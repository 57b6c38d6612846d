#pragma once

#include <cstdint>
#include <string>

#include "crqat/ops.hpp"

namespace crqat {

/// Smallest admissible quantization step; scales are projected back above it.
inline constexpr double kScaleFloor = 1e-8;

class InvalidQuantParam : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Granularity { per_tensor, per_channel, per_head };

inline const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::per_tensor: return "per-tensor";
    case Granularity::per_channel: return "per-channel";
    case Granularity::per_head: return "per-head";
  }
  return "?";
}

/// Bit-width, sign, symmetry and grouping of one quantizer.
/// Per-channel and per-head group along `axis`; per-head additionally pins the
/// extent of that axis to `heads`.
struct QuantSpec {
  int bits = 8;
  bool is_signed = true;
  bool symmetric = true;
  Granularity granularity = Granularity::per_tensor;
  std::size_t axis = 0;
  std::size_t heads = 0;
  bool learnable = false;

  std::int32_t qmin() const { return is_signed ? -(std::int32_t{1} << (bits - 1)) : 0; }
  std::int32_t qmax() const { return is_signed ? (std::int32_t{1} << (bits - 1)) - 1 : (std::int32_t{1} << bits) - 1; }

  void validate() const {
    if (bits < 2 || bits > 8) throw InvalidQuantParam("bit-width must lie in [2, 8], got " + std::to_string(bits));
    if (granularity == Granularity::per_head && heads == 0) throw InvalidQuantParam("per-head quantizer needs a head count");
  }

  bool operator==(const QuantSpec&) const = default;
};

/// Weights: signed symmetric, one scale per output channel.
inline QuantSpec weight_spec(int bits, bool learnable = true) {
  return QuantSpec{bits, true, true, Granularity::per_channel, 0, 0, learnable};
}

/// Activations: unsigned asymmetric, per tensor or per channel along `channel_axis`.
inline QuantSpec activation_spec(int bits, bool per_channel, std::size_t channel_axis, bool learnable = true) {
  return QuantSpec{bits, false, false, per_channel ? Granularity::per_channel : Granularity::per_tensor,
                   channel_axis, 0, learnable};
}

/// Attention tensors [H x R x N]: unsigned asymmetric, one group per head.
inline QuantSpec attention_spec(int bits, std::size_t heads, bool learnable = true) {
  return QuantSpec{bits, false, false, Granularity::per_head, 0, heads, learnable};
}

/// Scale per group (a trainable tensor when the spec is learnable) and integer zero-points.
struct QuantParams {
  Tensor scale;
  std::vector<std::int32_t> zero_point;

  std::size_t groups() const { return zero_point.size(); }

  static QuantParams make(std::vector<double> scales, std::vector<std::int32_t> zero_points, bool learnable) {
    if (scales.size() != zero_points.size()) throw InvalidQuantParam("scale/zero-point group count mismatch");
    const std::size_t g = scales.size();
    return QuantParams{Tensor(Shape{g}, std::move(scales), learnable), std::move(zero_points)};
  }

  void validate(const QuantSpec& spec) const {
    if (!scale.defined() || scale.size() != zero_point.size()) throw InvalidQuantParam("malformed quant params");
    for (std::size_t g = 0; g < groups(); ++g) {
      if (!(scale[g] > 0) || !std::isfinite(scale[g])) throw InvalidQuantParam("scale must be positive, got " + std::to_string(scale[g]));
      if (zero_point[g] < spec.qmin() || zero_point[g] > spec.qmax()) throw InvalidQuantParam("zero-point outside integer range");
      if (spec.symmetric && zero_point[g] != 0) throw InvalidQuantParam("symmetric quantizer with nonzero zero-point");
    }
  }

  /// Clamp every scale to at least kScaleFloor (after an optimizer step).
  void project() {
    for (double& s : scale.values_mut()) s = std::max(s, kScaleFloor);
  }
};

/// Number of parameter groups `spec` implies for a tensor of `shape`.
inline std::size_t group_count(const Shape& shape, const QuantSpec& spec) {
  if (spec.granularity == Granularity::per_tensor) return 1;
  if (spec.axis >= shape.size()) throw ShapeError("quant axis " + std::to_string(spec.axis) + " out of range for " + shape_str(shape));
  if (spec.granularity == Granularity::per_head && shape[spec.axis] != spec.heads) {
    throw ShapeError("per-head quantizer expects " + std::to_string(spec.heads) + " heads along axis " +
                     std::to_string(spec.axis) + ", got " + shape_str(shape));
  }
  return shape[spec.axis];
}

/// Maps flat element indices to group indices for one tensor layout.
struct GroupIndexer {
  std::size_t inner = 1, extent = 1;
  GroupIndexer(const Shape& shape, const QuantSpec& spec) {
    if (spec.granularity == Granularity::per_tensor) {
      inner = shape_numel(shape);
      extent = 1;
      return;
    }
    extent = group_count(shape, spec);
    for (std::size_t d = spec.axis + 1; d < shape.size(); ++d) inner *= shape[d];
  }
  std::size_t operator()(std::size_t flat) const { return inner == 0 ? 0 : (flat / inner) % extent; }
};

/// code = round(clip(w / s + z, l, u)), rounding half away from zero.
inline std::int32_t quantize(double w, double s, std::int32_t z, const QuantSpec& spec) {
  if (!(s > 0)) throw InvalidQuantParam("quantize: scale must be positive");
  if (!std::isfinite(w)) throw NumericError("quantize: non-finite input");
  const double v = std::clamp(w / s + z, static_cast<double>(spec.qmin()), static_cast<double>(spec.qmax()));
  return static_cast<std::int32_t>(std::round(v));
}

inline double dequantize(std::int32_t code, double s, std::int32_t z) {
  return static_cast<double>(code - z) * s;
}

/// d(dequantize(quantize(x)))/ds under the straight-through rounding rule.
/// Interior: round(v) - v with v = x/s + z; clipped: (l - z) or (u - z).
inline double learnable_scale_grad(double x, double s, const QuantSpec& spec, std::int32_t z = 0) {
  if (!(s > 0)) throw InvalidQuantParam("learnable_scale_grad: scale must be positive");
  const double v = x / s + z;
  const double l = spec.qmin(), u = spec.qmax();
  if (v <= l) return l - z;
  if (v >= u) return u - z;
  return std::round(v) - v;
}

/// Per-group multiplier applied to accumulated scale gradients: 1 / sqrt(N_group * u).
inline double scale_grad_factor(std::size_t group_elements, const QuantSpec& spec) {
  return 1.0 / std::sqrt(static_cast<double>(group_elements) * static_cast<double>(spec.qmax()));
}

/// Quantize-dequantize in the forward pass. Backward: straight-through with a clip
/// mask for x; learnable-step-size gradient for the scale when the spec is learnable.
/// Zero-points are held fixed.
inline Tensor fake_quant(const Tensor& x, const QuantParams& params, const QuantSpec& spec) {
  spec.validate();
  const std::size_t groups = group_count(x.shape(), spec);
  if (params.groups() != groups) {
    throw ShapeError("fake_quant: " + std::to_string(params.groups()) + " parameter groups for " + std::to_string(groups) +
                     " tensor groups (" + granularity_name(spec.granularity) + ", shape " + shape_str(x.shape()) + ")");
  }
  params.validate(spec);
  const GroupIndexer group(x.shape(), spec);
  const double l = spec.qmin(), u = spec.qmax();
  std::vector<double> out(x.size());
  std::vector<std::uint8_t> region(x.size());  // 0 interior, 1 below, 2 above
  const auto& xv = x.vec();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t g = group(i);
    const double s = params.scale[g];
    const std::int32_t z = params.zero_point[g];
    const double v = xv[i] / s + z;
    region[i] = v <= l ? 1 : (v >= u ? 2 : 0);
    out[i] = dequantize(quantize(xv[i], s, z, spec), s, z);
  }
  const bool learn_scale = spec.learnable && params.scale.requires_grad();
  const Tensor scale_input = learn_scale ? params.scale : params.scale.detach();
  return make_op(x.shape(), std::move(out), {x, scale_input},
                 [region = std::move(region), group, spec, zps = params.zero_point, groups](GraphNode& n) {
                   if (double* gx = n.input_grad(0)) {
                     for (std::size_t i = 0; i < n.grad.size(); ++i)
                       if (region[i] == 0) gx[i] += n.grad[i];
                   }
                   if (double* gs = n.input_grad(1)) {
                     const auto& xv = n.input_value(0);
                     const auto& sv = n.input_value(1);
                     std::vector<double> acc(groups, 0.0);
                     std::vector<std::size_t> count(groups, 0);
                     for (std::size_t i = 0; i < n.grad.size(); ++i) {
                       const std::size_t g = group(i);
                       acc[g] += n.grad[i] * learnable_scale_grad(xv[i], sv[g], spec, zps[g]);
                       ++count[g];
                     }
                     for (std::size_t g = 0; g < groups; ++g)
                       if (count[g]) gs[g] += acc[g] * scale_grad_factor(count[g], spec);
                   }
                 });
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Values of a sample stream split by quantizer group.
inline std::vector<std::vector<double>> group_samples(std::span<const Tensor> batches, const QuantSpec& spec) {
  if (batches.empty()) throw std::invalid_argument("calibration: empty sample stream");
  std::vector<std::vector<double>> out;
  for (const auto& t : batches) {
    const std::size_t groups = group_count(t.shape(), spec);
    if (out.empty()) out.resize(groups);
    if (out.size() != groups) throw ShapeError("calibration: inconsistent group count across batches");
    const GroupIndexer group(t.shape(), spec);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (std::isfinite(t[i])) out[group(i)].push_back(t[i]);
    }
  }
  for (const auto& g : out)
    if (g.empty()) throw std::invalid_argument("calibration: a group has no finite samples");
  return out;
}

/// (s, z) covering [lo, hi] with the integer range of `spec`.
inline std::pair<double, std::int32_t> range_to_params(double lo, double hi, const QuantSpec& spec) {
  const double l = spec.qmin(), u = spec.qmax();
  if (spec.symmetric) {
    return {std::max(std::max(std::abs(lo), std::abs(hi)) / u, kScaleFloor), 0};
  }
  const double s = std::max((hi - lo) / (u - l), kScaleFloor);
  const double z = std::clamp(std::round(l - lo / s), l, u);
  return {s, static_cast<std::int32_t>(z)};
}

namespace detail {
inline QuantParams params_from_ranges(const std::vector<std::pair<double, double>>& ranges, const QuantSpec& spec) {
  std::vector<double> scales;
  std::vector<std::int32_t> zps;
  for (const auto& [lo, hi] : ranges) {
    auto [s, z] = range_to_params(lo, hi, spec);
    scales.push_back(s);
    zps.push_back(z);
  }
  return QuantParams::make(std::move(scales), std::move(zps), spec.learnable);
}

/// Linearly interpolated q-th percentile (q in [0, 100]) of sorted data.
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double fq_mse(const std::vector<double>& xs, double s, std::int32_t z, const QuantSpec& spec) {
  double acc = 0.0;
  for (double x : xs) {
    const double d = x - dequantize(quantize(x, s, z, spec), s, z);
    acc += d * d;
  }
  return acc / static_cast<double>(xs.size());
}
}  // namespace detail

inline QuantParams calibrate_minmax(std::span<const Tensor> batches, const QuantSpec& spec) {
  spec.validate();
  std::vector<std::pair<double, double>> ranges;
  for (const auto& g : group_samples(batches, spec)) {
    const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
    ranges.emplace_back(*lo, *hi);
  }
  return detail::params_from_ranges(ranges, spec);
}

/// Min/max replaced by the (100-p)-th and p-th percentiles, p in (50, 100].
inline QuantParams calibrate_percentile(std::span<const Tensor> batches, double p, const QuantSpec& spec) {
  spec.validate();
  if (!(p > 50.0 && p <= 100.0)) throw std::invalid_argument("calibrate_percentile: p must lie in (50, 100]");
  std::vector<std::pair<double, double>> ranges;
  for (auto& g : group_samples(batches, spec)) {
    std::sort(g.begin(), g.end());
    ranges.emplace_back(detail::percentile_sorted(g, 100.0 - p), detail::percentile_sorted(g, p));
  }
  return detail::params_from_ranges(ranges, spec);
}

/// Scans clip ranges at fractions 0.3..1.0 of the minmax range and keeps the one
/// with the lowest quantize-dequantize MSE; ties go to the larger range.
inline QuantParams calibrate_mse(std::span<const Tensor> batches, const QuantSpec& spec, std::size_t grid_points = 64) {
  spec.validate();
  if (grid_points == 0) throw std::invalid_argument("calibrate_mse: grid_points must be positive");
  std::vector<double> scales;
  std::vector<std::int32_t> zps;
  for (const auto& g : group_samples(batches, spec)) {
    const auto [lo_it, hi_it] = std::minmax_element(g.begin(), g.end());
    const double lo = *lo_it, hi = *hi_it;
    double best_err = std::numeric_limits<double>::infinity();
    std::pair<double, std::int32_t> best{};
    for (std::size_t k = grid_points; k-- > 0;) {
      const double f = grid_points == 1 ? 1.0 : 0.3 + 0.7 * static_cast<double>(k) / static_cast<double>(grid_points - 1);
      const auto cand = range_to_params(f * lo, f * hi, spec);
      const double err = detail::fq_mse(g, cand.first, cand.second, spec);
      if (err < best_err) {
        best_err = err;
        best = cand;
      }
    }
    scales.push_back(best.first);
    zps.push_back(best.second);
  }
  return QuantParams::make(std::move(scales), std::move(zps), spec.learnable);
}

/// Mean squared quantize-dequantize error of a sample stream under fixed params.
inline double quantization_mse(std::span<const Tensor> batches, const QuantParams& params, const QuantSpec& spec) {
  auto groups = group_samples(batches, spec);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    acc += detail::fq_mse(groups[g], params.scale[g], params.zero_point[g], spec) * static_cast<double>(groups[g].size());
    n += groups[g].size();
  }
  return acc / static_cast<double>(n);
}

}  // namespace crqat
