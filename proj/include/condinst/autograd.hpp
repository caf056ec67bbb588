#pragma once
// Define-by-run reverse-mode autodiff over FeatureMap values.
//
// A Tape records nodes in creation order, which is already a valid topological
// order, so backward() simply walks the list in reverse and lets each node's
// closure push its gradient into its inputs.  Trainable parameters live outside
// the tape in a flat ParamStore; convolution nodes reach them through raw
// value/grad pointers so no weights are copied per step.  The dynamically
// generated mask-head convolutions instead read their weights from another
// node's value (the controller output), which is what routes mask gradients
// back into the detector.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "condinst/feature_map.hpp"

namespace condinst {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    FeatureMap value;
    FeatureMap grad;  // same shape as value, zero-initialised
    // True when a backward closure exists somewhere downstream of a tracked
    // quantity; constants and all nodes of a non-recording tape have false.
    bool needs_grad = false;
    // Accumulates d(root)/d(inputs) given d(root)/d(this node).  Null for
    // constants; invoked exactly once per backward pass.
    std::function<void(const FeatureMap& grad_out)> backward;
};

// Flat storage for trainable parameters with named segments.  Keeping every
// weight in one contiguous array makes the SGD update, checkpoint I/O and
// finite-difference probing trivial.  Raw pointers into values()/grads() are
// invalidated by add(), so register every segment before taking any.
class ParamStore {
public:
    struct Segment {
        std::string name;
        std::size_t offset = 0;
        std::size_t size = 0;
        bool decay = true;  // false exempts the segment from weight decay
    };

    // Registers a named segment and returns its offset into the flat array.
    std::size_t add(const std::string& name, std::size_t size, bool decay);

    std::size_t size() const { return values_.size(); }
    double* values() { return values_.data(); }
    const double* values() const { return values_.data(); }
    double* grads() { return grads_.data(); }
    const double* grads() const { return grads_.data(); }

    const std::vector<Segment>& segments() const { return segments_; }
    // Returns the segment registered under `name`, or null when absent.
    const Segment* find(const std::string& name) const;

    void zero_grads();

private:
    std::vector<double> values_;
    std::vector<double> grads_;
    std::vector<Segment> segments_;
};

class Tape {
public:
    // A non-recording tape runs forward passes only: no closures are built and
    // backward() is rejected.  Inference shares the model code this way.
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    std::size_t node_count() const { return nodes_.size(); }

    // Leaf that is constant with respect to differentiation (images, coordinate
    // maps, precomputed targets).
    Var input(FeatureMap value);
    Var scalar(double v);
    // Leaf over an external parameter segment, exposed as an (n,1,1) node:
    // values are copied in, gradients accumulate out through `grads`.
    Var leaf(const double* values, double* grads, int count);
    // Same, but shaped as a full feature map.
    Var leaf_map(const double* values, double* grads, int channels, int height, int width,
                 int stride = 1);

    // 2D convolution with weights held outside the tape.  `gw`/`gb` may be null
    // to freeze the parameters; `w` is laid out [out][in][ky][kx] as in ConvSpec.
    Var conv(Var x, const double* w, const double* b, double* gw, double* gb, int in_c, int out_c,
             int kernel);
    // 1x1 convolution whose weights and biases are slices of another node's
    // value, read at the given flat offsets.  This is the dynamic mask head.
    Var dyn_conv1x1(Var x, Var theta, std::size_t w_offset, std::size_t b_offset, int in_c,
                    int out_c);

    Var relu(Var x);
    Var sigmoid(Var x);
    Var upsample(Var x, int factor);
    Var avg_pool(Var x);
    Var add(Var a, Var b);
    Var concat(const std::vector<Var>& xs);
    // Extracts the channel vector at pixel (y, x) as a (C, 1, 1) node.
    Var pixel_vector(Var x, int y, int x_col);
    // Scalar linear combination sum_i coeffs[i] * xs[i]; all xs must be (1,1,1).
    Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& coeffs);

    // Node with caller-supplied value and backward; used by the fused loss
    // terms, whose closures accumulate analytic gradients into `parents`.
    // The closure is dropped when the tape is not recording.
    Var custom(FeatureMap value, const std::vector<Var>& parents,
               std::function<void(const FeatureMap& grad_out)> backward);

    // Seeds d(root)/d(root) = 1 and propagates to every recorded node.  `root`
    // must be scalar.  Call at most once per tape.
    void backward(const Var& root);

private:
    Var make(FeatureMap value, bool needs_grad, std::function<void(const FeatureMap&)> backward);

    bool recording_;
    std::vector<Var> nodes_;
};

}  // namespace condinst
