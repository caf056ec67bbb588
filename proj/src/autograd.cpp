#include "condinst/autograd.hpp"

#include <algorithm>
#include <utility>

#include "condinst/ops.hpp"

namespace condinst {

std::size_t ParamStore::add(const std::string& name, std::size_t size, bool decay) {
    require(!name.empty(), ErrorKind::usage, "parameter segment name must not be empty");
    require(find(name) == nullptr, ErrorKind::usage, "duplicate parameter segment: " + name);
    Segment seg;
    seg.name = name;
    seg.offset = values_.size();
    seg.size = size;
    seg.decay = decay;
    segments_.push_back(seg);
    values_.resize(values_.size() + size, 0.0);
    grads_.resize(values_.size(), 0.0);
    return seg.offset;
}

const ParamStore::Segment* ParamStore::find(const std::string& name) const {
    for (const Segment& seg : segments_) {
        if (seg.name == name) return &seg;
    }
    return nullptr;
}

void ParamStore::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

Var Tape::make(FeatureMap value, bool needs_grad,
               std::function<void(const FeatureMap&)> backward) {
    Var n = std::make_shared<Node>();
    n->value = std::move(value);
    n->grad = FeatureMap(n->value.channels, n->value.height, n->value.width, n->value.stride);
    n->needs_grad = needs_grad;
    if (needs_grad) n->backward = std::move(backward);
    nodes_.push_back(n);
    return n;
}

Var Tape::input(FeatureMap value) { return make(std::move(value), false, nullptr); }

Var Tape::scalar(double v) {
    FeatureMap m(1, 1, 1);
    m.data[0] = v;
    return make(std::move(m), false, nullptr);
}

Var Tape::leaf(const double* values, double* grads, int count) {
    return leaf_map(values, grads, count, 1, 1, 1);
}

Var Tape::leaf_map(const double* values, double* grads, int channels, int height, int width,
                   int stride) {
    require(channels > 0 && height > 0 && width > 0, ErrorKind::usage,
            "parameter leaf needs a positive shape");
    FeatureMap m(channels, height, width, stride);
    std::copy(values, values + m.data.size(), m.data.begin());
    const bool tracked = recording_ && grads != nullptr;
    std::function<void(const FeatureMap&)> fn;
    if (tracked) {
        const size_t count = m.data.size();
        fn = [grads, count](const FeatureMap& g) {
            for (size_t i = 0; i < count; ++i) grads[i] += g.data[i];
        };
    }
    return make(std::move(m), tracked, std::move(fn));
}

Var Tape::conv(Var x, const double* w, const double* b, double* gw, double* gb, int in_c,
               int out_c, int kernel) {
    require(x->value.channels == in_c, ErrorKind::usage,
            "conv node: input has " + std::to_string(x->value.channels) + " channels, expected " +
                std::to_string(in_c));
    require(kernel == 1 || kernel == 3, ErrorKind::usage, "conv node: kernel must be 1 or 3");
    FeatureMap out(out_c, x->value.height, x->value.width, x->value.stride);
    detail::conv2d_into(x->value, w, b, in_c, out_c, kernel, out);
    const bool tracked = recording_ && (x->needs_grad || gw != nullptr || gb != nullptr);
    Node* xp = x.get();
    auto fn = [x, xp, w, gw, gb, in_c, out_c, kernel](const FeatureMap& g) {
        FeatureMap* gi = xp->needs_grad ? &xp->grad : nullptr;
        detail::conv2d_backward_raw(xp->value, w, in_c, out_c, kernel, g, gi, gw, gb);
    };
    return make(std::move(out), tracked, std::move(fn));
}

Var Tape::dyn_conv1x1(Var x, Var theta, std::size_t w_offset, std::size_t b_offset, int in_c,
                      int out_c) {
    const std::size_t need_w = w_offset + static_cast<std::size_t>(in_c) * out_c;
    const std::size_t need_b = b_offset + static_cast<std::size_t>(out_c);
    require(theta->value.data.size() >= std::max(need_w, need_b), ErrorKind::usage,
            "dynamic conv: weight vector too short for requested slices");
    require(x->value.channels == in_c, ErrorKind::usage,
            "dynamic conv: input channel count mismatch");
    FeatureMap out(out_c, x->value.height, x->value.width, x->value.stride);
    const double* w = theta->value.data.data() + w_offset;
    const double* b = theta->value.data.data() + b_offset;
    detail::conv2d_into(x->value, w, b, in_c, out_c, 1, out);
    const bool tracked = recording_ && (x->needs_grad || theta->needs_grad);
    Node* xp = x.get();
    Node* tp = theta.get();
    auto fn = [x, theta, xp, tp, w_offset, b_offset, in_c, out_c](const FeatureMap& g) {
        const double* wv = tp->value.data.data() + w_offset;
        FeatureMap* gi = xp->needs_grad ? &xp->grad : nullptr;
        double* gw = tp->needs_grad ? tp->grad.data.data() + w_offset : nullptr;
        double* gb = tp->needs_grad ? tp->grad.data.data() + b_offset : nullptr;
        detail::conv2d_backward_raw(xp->value, wv, in_c, out_c, 1, g, gi, gw, gb);
    };
    return make(std::move(out), tracked, std::move(fn));
}

Var Tape::relu(Var x) {
    // pointwise_backward differentiates from the op's *output*, so the closure
    // must capture the freshly created node; build it in two steps.
    FeatureMap out = pointwise(x->value, Pointwise::relu);
    Var n = make(std::move(out), recording_ && x->needs_grad, nullptr);
    if (n->needs_grad) {
        Node* xp = x.get();
        Node* np = n.get();
        n->backward = [x, xp, np](const FeatureMap& g) {
            pointwise_backward(np->value, Pointwise::relu, g, xp->grad);
        };
    }
    return n;
}

Var Tape::sigmoid(Var x) {
    FeatureMap out = pointwise(x->value, Pointwise::sigmoid);
    Var n = make(std::move(out), recording_ && x->needs_grad, nullptr);
    if (n->needs_grad) {
        Node* xp = x.get();
        Node* np = n.get();
        n->backward = [x, xp, np](const FeatureMap& g) {
            pointwise_backward(np->value, Pointwise::sigmoid, g, xp->grad);
        };
    }
    return n;
}

Var Tape::upsample(Var x, int factor) {
    FeatureMap out = bilinear_upsample(x->value, factor);
    Node* xp = x.get();
    auto fn = [x, xp, factor](const FeatureMap& g) {
        bilinear_upsample_backward(g, factor, xp->grad);
    };
    return make(std::move(out), recording_ && x->needs_grad, std::move(fn));
}

Var Tape::avg_pool(Var x) {
    FeatureMap out = avg_pool2(x->value);
    Node* xp = x.get();
    auto fn = [x, xp](const FeatureMap& g) { avg_pool2_backward(g, xp->grad); };
    return make(std::move(out), recording_ && x->needs_grad, std::move(fn));
}

Var Tape::add(Var a, Var b) {
    require(a->value.same_shape(b->value), ErrorKind::usage, "add node: shape mismatch");
    FeatureMap out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
    Node* ap = a.get();
    Node* bp = b.get();
    auto fn = [a, b, ap, bp](const FeatureMap& g) {
        if (ap->needs_grad)
            for (std::size_t i = 0; i < g.data.size(); ++i) ap->grad.data[i] += g.data[i];
        if (bp->needs_grad)
            for (std::size_t i = 0; i < g.data.size(); ++i) bp->grad.data[i] += g.data[i];
    };
    return make(std::move(out), recording_ && (a->needs_grad || b->needs_grad), std::move(fn));
}

Var Tape::concat(const std::vector<Var>& xs) {
    require(!xs.empty(), ErrorKind::usage, "concat node: no inputs");
    const FeatureMap& first = xs[0]->value;
    int channels = 0;
    bool any_grad = false;
    for (const Var& x : xs) {
        require(x->value.height == first.height && x->value.width == first.width &&
                    x->value.stride == first.stride,
                ErrorKind::usage, "concat node: spatial shape mismatch");
        channels += x->value.channels;
        any_grad = any_grad || x->needs_grad;
    }
    FeatureMap out(channels, first.height, first.width, first.stride);
    std::size_t pos = 0;
    for (const Var& x : xs) {
        std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin() + pos);
        pos += x->value.data.size();
    }
    std::vector<Var> parents = xs;
    auto fn = [parents](const FeatureMap& g) {
        std::size_t at = 0;
        for (const Var& x : parents) {
            const std::size_t n = x->value.data.size();
            if (x->needs_grad) {
                for (std::size_t i = 0; i < n; ++i) x->grad.data[i] += g.data[at + i];
            }
            at += n;
        }
    };
    return make(std::move(out), recording_ && any_grad, std::move(fn));
}

Var Tape::pixel_vector(Var x, int y, int x_col) {
    const FeatureMap& v = x->value;
    require(y >= 0 && y < v.height && x_col >= 0 && x_col < v.width, ErrorKind::usage,
            "pixel_vector: coordinates out of bounds");
    FeatureMap out(v.channels, 1, 1);
    for (int c = 0; c < v.channels; ++c) out.data[c] = v.at(c, y, x_col);
    Node* xp = x.get();
    auto fn = [x, xp, y, x_col](const FeatureMap& g) {
        for (int c = 0; c < xp->grad.channels; ++c) xp->grad.at(c, y, x_col) += g.data[c];
    };
    return make(std::move(out), recording_ && x->needs_grad, std::move(fn));
}

Var Tape::weighted_sum(const std::vector<Var>& xs, const std::vector<double>& coeffs) {
    require(xs.size() == coeffs.size(), ErrorKind::usage,
            "weighted_sum: term and coefficient counts differ");
    double total = 0.0;
    bool any_grad = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        require(xs[i]->value.data.size() == 1, ErrorKind::usage,
                "weighted_sum: all terms must be scalar");
        total += coeffs[i] * xs[i]->value.data[0];
        any_grad = any_grad || xs[i]->needs_grad;
    }
    FeatureMap out(1, 1, 1);
    out.data[0] = total;
    std::vector<Var> parents = xs;
    std::vector<double> cs = coeffs;
    auto fn = [parents, cs](const FeatureMap& g) {
        for (std::size_t i = 0; i < parents.size(); ++i) {
            if (parents[i]->needs_grad) parents[i]->grad.data[0] += cs[i] * g.data[0];
        }
    };
    return make(std::move(out), recording_ && any_grad, std::move(fn));
}

Var Tape::custom(FeatureMap value, const std::vector<Var>& parents,
                 std::function<void(const FeatureMap& grad_out)> backward) {
    bool any_grad = false;
    for (const Var& p : parents) any_grad = any_grad || p->needs_grad;
    // Hold the parents alive through the closure even though it only needs the
    // gradient of this node; the caller's lambda captures them as it sees fit.
    auto fn = [parents, backward = std::move(backward)](const FeatureMap& g) { backward(g); };
    return make(std::move(value), recording_ && any_grad, std::move(fn));
}

void Tape::backward(const Var& root) {
    require(recording_, ErrorKind::usage, "backward on a non-recording tape");
    require(root->value.data.size() == 1, ErrorKind::usage, "backward root must be scalar");
    root->grad.data[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.backward) n.backward(n.grad);
    }
}

}  // namespace condinst
