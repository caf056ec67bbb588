#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace condinst {

// Error taxonomy mirrored by the C API status codes and the CLI exit codes.
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) throw Error(kind, msg);
}

/// Dense C x H x W activation map, row-major per channel.
/// `stride` is the number of input-image pixels per cell of this map.
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    int stride = 1;
    std::vector<double> data;

    FeatureMap() = default;
    FeatureMap(int c, int h, int w, int stride_ = 1, double fill = 0.0)
        : channels(c), height(h), width(w), stride(stride_),
          data(static_cast<size_t>(c) * h * w, fill) {}

    size_t size() const { return data.size(); }
    size_t plane() const { return static_cast<size_t>(height) * width; }

    double& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }

    double* channel_ptr(int c) { return data.data() + static_cast<size_t>(c) * plane(); }
    const double* channel_ptr(int c) const { return data.data() + static_cast<size_t>(c) * plane(); }

    bool same_shape(const FeatureMap& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

/// Weights for a stride-1 convolution, kernel 1x1 or 3x3 (same padding).
/// Weight layout is [out][in][ky][kx]; bias layout is [out].
struct ConvSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;  // 1 or 3
    std::vector<double> weights;
    std::vector<double> bias;

    ConvSpec() = default;
    ConvSpec(int in_c, int out_c, int k)
        : in_channels(in_c), out_channels(out_c), kernel(k),
          weights(static_cast<size_t>(out_c) * in_c * k * k, 0.0), bias(out_c, 0.0) {}

    int padding() const { return kernel == 3 ? 1 : 0; }
    size_t weight_count() const { return static_cast<size_t>(out_channels) * in_channels * kernel * kernel; }
};

/// Dense binary mask at full image resolution, row-major, values 0 or 1.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> data;

    BinaryMask() = default;
    BinaryMask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

    uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }

    size_t area() const {
        size_t n = 0;
        for (uint8_t v : data) n += v != 0;
        return n;
    }

    bool same_shape(const BinaryMask& o) const { return height == o.height && width == o.width; }
    bool operator==(const BinaryMask& o) const = default;
};

/// Continuous axis-aligned box, x2/y2 exclusive.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    bool well_formed() const { return x1 < x2 && y1 < y2; }
};

double box_iou(const Box& a, const Box& b);
double box_giou(const Box& a, const Box& b);

}  // namespace condinst
