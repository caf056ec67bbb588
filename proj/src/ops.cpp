#include "condinst/ops.hpp"

#include <algorithm>
#include <cstring>

namespace condinst {

namespace {

void check_conv_args(const FeatureMap& input, const ConvSpec& spec) {
    require(spec.kernel == 1 || spec.kernel == 3, ErrorKind::usage, "conv2d: kernel must be 1 or 3");
    require(input.channels == spec.in_channels, ErrorKind::usage,
            "conv2d: channel mismatch, input has " + std::to_string(input.channels) +
                ", spec expects " + std::to_string(spec.in_channels));
    require(spec.weights.size() == spec.weight_count(), ErrorKind::usage, "conv2d: bad weight length");
    require(spec.bias.size() == static_cast<size_t>(spec.out_channels), ErrorKind::usage,
            "conv2d: bad bias length");
    for (double w : spec.weights)
        require(std::isfinite(w), ErrorKind::numeric, "conv2d: non-finite weight");
    for (double b : spec.bias)
        require(std::isfinite(b), ErrorKind::numeric, "conv2d: non-finite bias");
}

// Bilinear sample position for output index i at integer scale `factor`,
// half-pixel centers: src = (i + 0.5) / factor - 0.5, clamped to the valid
// range. Returns (lo, hi, frac) with value = (1-frac)*in[lo] + frac*in[hi].
struct Lerp {
    int lo, hi;
    double frac;
};

Lerp lerp_coord(int i, double scale, int in_extent) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    double last = in_extent - 1;
    if (src > last) src = last;
    int lo = static_cast<int>(src);
    int hi = std::min(lo + 1, in_extent - 1);
    return {lo, hi, src - lo};
}

}  // namespace

namespace detail {

void conv2d_into(const FeatureMap& input, const double* weights, const double* bias, int in_c,
                 int out_c, int k, FeatureMap& out) {
    const int H = input.height, W = input.width;
    for (int oc = 0; oc < out_c; ++oc) {
        double* op = out.channel_ptr(oc);
        std::fill(op, op + out.plane(), bias[oc]);
        for (int ic = 0; ic < in_c; ++ic) {
            const double* in = input.channel_ptr(ic);
            const double* wk = weights + (static_cast<size_t>(oc) * in_c + ic) * k * k;
            if (k == 1) {
                const double w = wk[0];
                for (size_t i = 0; i < out.plane(); ++i) op[i] += w * in[i];
            } else {
                for (int ky = 0; ky < 3; ++ky) {
                    for (int kx = 0; kx < 3; ++kx) {
                        const double w = wk[ky * 3 + kx];
                        const int dy = ky - 1, dx = kx - 1;
                        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                        for (int y = y0; y < y1; ++y) {
                            double* orow = op + static_cast<size_t>(y) * W;
                            const double* irow = in + static_cast<size_t>(y + dy) * W + dx;
                            for (int x = x0; x < x1; ++x) orow[x] += w * irow[x];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_raw(const FeatureMap& input, const double* weights, int in_c, int out_c, int k,
                         const FeatureMap& grad_out, FeatureMap* grad_input, double* grad_weights,
                         double* grad_bias) {
    const int H = input.height, W = input.width;
    for (int oc = 0; oc < out_c; ++oc) {
        const double* go = grad_out.channel_ptr(oc);
        if (grad_bias) {
            double s = 0;
            for (size_t i = 0; i < grad_out.plane(); ++i) s += go[i];
            grad_bias[oc] += s;
        }
        for (int ic = 0; ic < in_c; ++ic) {
            const size_t wbase = (static_cast<size_t>(oc) * in_c + ic) * k * k;
            const double* in = input.channel_ptr(ic);
            double* gi = grad_input ? grad_input->channel_ptr(ic) : nullptr;
            if (k == 1) {
                if (grad_weights) {
                    double s = 0;
                    for (size_t i = 0; i < grad_out.plane(); ++i) s += go[i] * in[i];
                    grad_weights[wbase] += s;
                }
                if (gi) {
                    const double w = weights[wbase];
                    for (size_t i = 0; i < grad_out.plane(); ++i) gi[i] += w * go[i];
                }
            } else {
                for (int ky = 0; ky < 3; ++ky) {
                    for (int kx = 0; kx < 3; ++kx) {
                        const int dy = ky - 1, dx = kx - 1;
                        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                        if (grad_weights) {
                            double s = 0;
                            for (int y = y0; y < y1; ++y) {
                                const double* grow = go + static_cast<size_t>(y) * W;
                                const double* irow = in + static_cast<size_t>(y + dy) * W + dx;
                                for (int x = x0; x < x1; ++x) s += grow[x] * irow[x];
                            }
                            grad_weights[wbase + ky * 3 + kx] += s;
                        }
                        if (gi) {
                            const double w = weights[wbase + ky * 3 + kx];
                            for (int y = y0; y < y1; ++y) {
                                const double* grow = go + static_cast<size_t>(y) * W;
                                double* irow = gi + static_cast<size_t>(y + dy) * W + dx;
                                for (int x = x0; x < x1; ++x) irow[x] += w * grow[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

FeatureMap conv2d(const FeatureMap& input, const ConvSpec& spec) {
    check_conv_args(input, spec);
    FeatureMap out(spec.out_channels, input.height, input.width, input.stride);
    detail::conv2d_into(input, spec.weights.data(), spec.bias.data(), spec.in_channels,
                        spec.out_channels, spec.kernel, out);
    return out;
}

void conv2d_backward(const FeatureMap& input, const ConvSpec& spec, const FeatureMap& grad_out,
                     FeatureMap* grad_input, std::vector<double>* grad_weights,
                     std::vector<double>* grad_bias) {
    check_conv_args(input, spec);
    detail::conv2d_backward_raw(input, spec.weights.data(), spec.in_channels, spec.out_channels,
                                spec.kernel, grad_out, grad_input,
                                grad_weights ? grad_weights->data() : nullptr,
                                grad_bias ? grad_bias->data() : nullptr);
}

FeatureMap bilinear_upsample(const FeatureMap& input, int factor) {
    require(factor == 2 || factor == 4, ErrorKind::usage,
            "bilinear_upsample: factor must be 2 or 4, got " + std::to_string(factor));
    const int OH = input.height * factor, OW = input.width * factor;
    FeatureMap out(input.channels, OH, OW, std::max(1, input.stride / factor));
    const double scale = 1.0 / factor;
    std::vector<Lerp> xs(OW), ys(OH);
    for (int x = 0; x < OW; ++x) xs[x] = lerp_coord(x, scale, input.width);
    for (int y = 0; y < OH; ++y) ys[y] = lerp_coord(y, scale, input.height);
    for (int c = 0; c < input.channels; ++c) {
        const double* in = input.channel_ptr(c);
        double* op = out.channel_ptr(c);
        for (int y = 0; y < OH; ++y) {
            const double* r0 = in + static_cast<size_t>(ys[y].lo) * input.width;
            const double* r1 = in + static_cast<size_t>(ys[y].hi) * input.width;
            const double fy = ys[y].frac;
            for (int x = 0; x < OW; ++x) {
                const Lerp& lx = xs[x];
                double top = r0[lx.lo] + lx.frac * (r0[lx.hi] - r0[lx.lo]);
                double bot = r1[lx.lo] + lx.frac * (r1[lx.hi] - r1[lx.lo]);
                op[static_cast<size_t>(y) * OW + x] = top + fy * (bot - top);
            }
        }
    }
    return out;
}

void bilinear_upsample_backward(const FeatureMap& grad_out, int factor, FeatureMap& grad_input) {
    const int OH = grad_out.height, OW = grad_out.width;
    const double scale = 1.0 / factor;
    std::vector<Lerp> xs(OW), ys(OH);
    for (int x = 0; x < OW; ++x) xs[x] = lerp_coord(x, scale, grad_input.width);
    for (int y = 0; y < OH; ++y) ys[y] = lerp_coord(y, scale, grad_input.height);
    for (int c = 0; c < grad_out.channels; ++c) {
        const double* go = grad_out.channel_ptr(c);
        double* gi = grad_input.channel_ptr(c);
        for (int y = 0; y < OH; ++y) {
            const double fy = ys[y].frac;
            double* r0 = gi + static_cast<size_t>(ys[y].lo) * grad_input.width;
            double* r1 = gi + static_cast<size_t>(ys[y].hi) * grad_input.width;
            for (int x = 0; x < OW; ++x) {
                const Lerp& lx = xs[x];
                const double g = go[static_cast<size_t>(y) * OW + x];
                r0[lx.lo] += (1 - fy) * (1 - lx.frac) * g;
                r0[lx.hi] += (1 - fy) * lx.frac * g;
                r1[lx.lo] += fy * (1 - lx.frac) * g;
                r1[lx.hi] += fy * lx.frac * g;
            }
        }
    }
}

FeatureMap bilinear_resize(const FeatureMap& input, int out_h, int out_w) {
    require(out_h > 0 && out_w > 0, ErrorKind::usage, "bilinear_resize: bad output size");
    FeatureMap out(input.channels, out_h, out_w, 1);
    const double sy = static_cast<double>(input.height) / out_h;
    const double sx = static_cast<double>(input.width) / out_w;
    std::vector<Lerp> xs(out_w), ys(out_h);
    for (int x = 0; x < out_w; ++x) xs[x] = lerp_coord(x, sx, input.width);
    for (int y = 0; y < out_h; ++y) ys[y] = lerp_coord(y, sy, input.height);
    for (int c = 0; c < input.channels; ++c) {
        const double* in = input.channel_ptr(c);
        double* op = out.channel_ptr(c);
        for (int y = 0; y < out_h; ++y) {
            const double* r0 = in + static_cast<size_t>(ys[y].lo) * input.width;
            const double* r1 = in + static_cast<size_t>(ys[y].hi) * input.width;
            const double fy = ys[y].frac;
            for (int x = 0; x < out_w; ++x) {
                const Lerp& lx = xs[x];
                double top = r0[lx.lo] + lx.frac * (r0[lx.hi] - r0[lx.lo]);
                double bot = r1[lx.lo] + lx.frac * (r1[lx.hi] - r1[lx.lo]);
                op[static_cast<size_t>(y) * out_w + x] = top + fy * (bot - top);
            }
        }
    }
    return out;
}

FeatureMap pointwise(const FeatureMap& input, Pointwise kind) {
    FeatureMap out(input.channels, input.height, input.width, input.stride);
    switch (kind) {
        case Pointwise::relu:
            for (size_t i = 0; i < input.size(); ++i) out.data[i] = std::max(0.0, input.data[i]);
            break;
        case Pointwise::sigmoid:
            for (size_t i = 0; i < input.size(); ++i) out.data[i] = sigmoid(input.data[i]);
            break;
        case Pointwise::softmax_channelwise: {
            require(input.channels >= 1, ErrorKind::usage, "softmax: need at least one channel");
            const size_t plane = input.plane();
            for (size_t p = 0; p < plane; ++p) {
                double mx = input.data[p];
                for (int c = 1; c < input.channels; ++c)
                    mx = std::max(mx, input.data[c * plane + p]);
                double denom = 0;
                for (int c = 0; c < input.channels; ++c) {
                    double e = std::exp(input.data[c * plane + p] - mx);
                    out.data[c * plane + p] = e;
                    denom += e;
                }
                for (int c = 0; c < input.channels; ++c) out.data[c * plane + p] /= denom;
            }
            break;
        }
    }
    return out;
}

void pointwise_backward(const FeatureMap& output, Pointwise kind, const FeatureMap& grad_out,
                        FeatureMap& grad_input) {
    switch (kind) {
        case Pointwise::relu:
            for (size_t i = 0; i < output.size(); ++i)
                if (output.data[i] > 0) grad_input.data[i] += grad_out.data[i];
            break;
        case Pointwise::sigmoid:
            for (size_t i = 0; i < output.size(); ++i) {
                const double s = output.data[i];
                grad_input.data[i] += grad_out.data[i] * s * (1 - s);
            }
            break;
        case Pointwise::softmax_channelwise: {
            const size_t plane = output.plane();
            for (size_t p = 0; p < plane; ++p) {
                double dot = 0;
                for (int c = 0; c < output.channels; ++c)
                    dot += grad_out.data[c * plane + p] * output.data[c * plane + p];
                for (int c = 0; c < output.channels; ++c)
                    grad_input.data[c * plane + p] +=
                        output.data[c * plane + p] * (grad_out.data[c * plane + p] - dot);
            }
            break;
        }
    }
}

FeatureMap avg_pool2(const FeatureMap& input) {
    require(input.height % 2 == 0 && input.width % 2 == 0, ErrorKind::usage,
            "avg_pool2: spatial size must be even");
    const int OH = input.height / 2, OW = input.width / 2;
    FeatureMap out(input.channels, OH, OW, input.stride * 2);
    for (int c = 0; c < input.channels; ++c) {
        const double* in = input.channel_ptr(c);
        double* op = out.channel_ptr(c);
        for (int y = 0; y < OH; ++y) {
            const double* r0 = in + static_cast<size_t>(2 * y) * input.width;
            const double* r1 = r0 + input.width;
            for (int x = 0; x < OW; ++x)
                op[static_cast<size_t>(y) * OW + x] =
                    0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
        }
    }
    return out;
}

void avg_pool2_backward(const FeatureMap& grad_out, FeatureMap& grad_input) {
    const int OH = grad_out.height, OW = grad_out.width;
    for (int c = 0; c < grad_out.channels; ++c) {
        const double* go = grad_out.channel_ptr(c);
        double* gi = grad_input.channel_ptr(c);
        for (int y = 0; y < OH; ++y) {
            double* r0 = gi + static_cast<size_t>(2 * y) * grad_input.width;
            double* r1 = r0 + grad_input.width;
            for (int x = 0; x < OW; ++x) {
                const double g = 0.25 * go[static_cast<size_t>(y) * OW + x];
                r0[2 * x] += g;
                r0[2 * x + 1] += g;
                r1[2 * x] += g;
                r1[2 * x + 1] += g;
            }
        }
    }
}

double box_iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double box_giou(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) *
                        (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
    double giou = uni > 0 ? inter / uni : 0.0;
    if (hull > 0) giou -= (hull - uni) / hull;
    return giou;
}

}  // namespace condinst
