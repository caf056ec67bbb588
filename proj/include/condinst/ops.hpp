#pragma once

#include "condinst/feature_map.hpp"

namespace condinst {

enum class Pointwise { relu, sigmoid, softmax_channelwise };

// Forward kernels. All are pure functions: stride-1 convolution with same
// padding, bilinear resampling under the half-pixel-center convention, and
// elementwise nonlinearities. Spatial sizes are preserved by conv2d and
// pointwise; bilinear_upsample multiplies H and W by `factor` and divides
// the map stride accordingly.
FeatureMap conv2d(const FeatureMap& input, const ConvSpec& spec);
FeatureMap bilinear_upsample(const FeatureMap& input, int factor);
FeatureMap pointwise(const FeatureMap& input, Pointwise kind);
FeatureMap avg_pool2(const FeatureMap& input);

/// Resampling to an arbitrary size, same alignment convention as
/// bilinear_upsample. Inference-only (no backward counterpart).
FeatureMap bilinear_resize(const FeatureMap& input, int out_h, int out_w);

// Backward kernels. Each accumulates (+=) into the provided gradient
// buffers so callers can fan in multiple downstream gradients. Null
// destinations are skipped.
void conv2d_backward(const FeatureMap& input, const ConvSpec& spec, const FeatureMap& grad_out,
                     FeatureMap* grad_input, std::vector<double>* grad_weights,
                     std::vector<double>* grad_bias);
void bilinear_upsample_backward(const FeatureMap& grad_out, int factor, FeatureMap& grad_input);
void pointwise_backward(const FeatureMap& output, Pointwise kind, const FeatureMap& grad_out,
                        FeatureMap& grad_input);
void avg_pool2_backward(const FeatureMap& grad_out, FeatureMap& grad_input);

inline double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// log(sigmoid(x)) without overflow for large |x|.
inline double log_sigmoid(double x) {
    return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

namespace detail {

// Pointer-level conv cores shared by the public ops and the autograd tape
// (the tape reads weights in place instead of copying them into a ConvSpec).
void conv2d_into(const FeatureMap& input, const double* weights, const double* bias, int in_c,
                 int out_c, int k, FeatureMap& out);
void conv2d_backward_raw(const FeatureMap& input, const double* weights, int in_c, int out_c, int k,
                         const FeatureMap& grad_out, FeatureMap* grad_input, double* grad_weights,
                         double* grad_bias);

}  // namespace detail

}  // namespace condinst
