// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "condflow/tensor.hpp"

namespace condflow {

// One (conditioning input, target) pair. y_levels describes the target's
// value domain: 0 for continuous, 2 for binary masks, 2^bits for quantized
// images. Every generator is a pure function of (seed, index).
template <typename T>
struct PairedSample {
  TensorT<T> x;
  TensorT<T> y;
  std::uint64_t seed = 0;
  int y_levels = 0;
};

// Downsampled smooth-field pairs: y is a quantized random field (sinusoid
// mixture plus a random step edge, stretched to full range per sample) and
// x is its exact box-filter downsample.
template <typename T>
std::vector<PairedSample<T>> gen_toy_sr(std::uint64_t seed, int n,
                                        int hr_size = 16, int factor = 2,
                                        int bits = 5);

// Binary masks of a few smooth curves with a blurred, noise-corrupted
// grayscale rendering as the conditioning input.
template <typename T>
std::vector<PairedSample<T>> gen_toy_vessels(std::uint64_t seed, int n,
                                             int size = 64);

// 2-D conditional density testbed: x = 0 draws from a rotated anisotropic
// Gaussian blob with a closed-form density; x = 1 draws from a bimodal
// two-crescent distribution mirrored across the horizontal axis.
template <typename T>
std::vector<PairedSample<T>> gen_2d_conditional(std::uint64_t seed, int n);

// Closed-form log-density of the x = 0 blob at a point.
double blob_logpdf(double y0, double y1);
// Differential entropy of the blob in nats.
double blob_entropy();

struct AugmentParams {
  double rotation = 0.0;  // radians
  double scale = 1.0;
  double shear = 0.0;     // radians
};

// Same affine warp applied to x and y about their image centers (bilinear,
// zero fill outside). Binary masks are re-thresholded at 0.5 and quantized
// targets re-rounded to their integer levels.
template <typename T>
PairedSample<T> augment_with(const PairedSample<T>& s, const AugmentParams& p);

// Draws rotation ~ U[0, 2pi), scale ~ U[0.8, 1.2], shear ~ N(0, 10 degrees).
template <typename T>
PairedSample<T> augment(const PairedSample<T>& s, std::uint64_t seed);

// Flat container: text header (generator, seed, count, shapes, levels)
// followed by raw little-endian f32 tensors, x then y per sample.
template <typename T>
void save_dataset(const std::string& path, const std::string& generator,
                  std::uint64_t seed, const std::vector<PairedSample<T>>& data);

template <typename T>
std::vector<PairedSample<T>> load_dataset(const std::string& path,
                                          std::string* generator = nullptr,
                                          std::uint64_t* seed = nullptr);

// Stacks per-sample tensors into one batch along a new leading axis.
template <typename T>
TensorT<T> stack_batch(const std::vector<const TensorT<T>*>& items);

}  // namespace condflow
