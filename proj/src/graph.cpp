#include "expofuse/graph.hpp"

#include "expofuse/errors.hpp"

namespace expofuse {

template <typename T>
int Graph<T>::push(Tensor<T> v, Step s) {
    s.out = static_cast<int>(values_.size());
    values_.push_back(std::move(v));
    grads_.emplace_back();
    steps_.push_back(std::move(s));
    return steps_.back().out;
}

template <typename T>
int Graph<T>::input(Tensor<T> t) {
    return push(std::move(t), Step{Op::input, {}, 0});
}

template <typename T>
int Graph<T>::conv(int x, ParamSlot<T>& slot) {
    return push(conv2d_forward(values_[x], slot.params), Step{Op::conv, {x}, 0, &slot});
}

template <typename T>
int Graph<T>::deconv(int x, ParamSlot<T>& slot) {
    return push(deconv2d_forward(values_[x], slot.params), Step{Op::deconv, {x}, 0, &slot});
}

template <typename T>
int Graph<T>::leaky_relu(int x, T slope) {
    return push(leaky_relu_forward(values_[x], slope), Step{Op::lrelu, {x}, 0, nullptr, slope});
}

template <typename T>
int Graph<T>::concat(const std::vector<int>& xs) {
    if (xs.size() == 1) return xs[0];
    std::vector<const Tensor<T>*> ptrs;
    for (int id : xs) ptrs.push_back(&values_[id]);
    return push(expofuse::concat<T>(ptrs), Step{Op::concat, xs, 0});
}

template <typename T>
int Graph<T>::resize(int x, int h, int w) {
    if (values_[x].h == h && values_[x].w == w) return x;
    return push(bilinear_resize_tensor(values_[x], h, w), Step{Op::resize, {x}, 0});
}

template <typename T>
int Graph<T>::detach(int x) {
    return push(values_[x], Step{Op::detach, {x}, 0});
}

template <typename T>
Tensor<T>& Graph<T>::grad(int id) {
    Tensor<T>& g = grads_[id];
    if (g.values.empty()) {
        const Tensor<T>& v = values_[id];
        g = Tensor<T>(v.n, v.c, v.h, v.w);
    }
    return g;
}

template <typename T>
void Graph<T>::accumulate(int id, const Tensor<T>& g) {
    Tensor<T>& dst = grad(id);
    require(dst.same_shape(g), "graph: gradient shape mismatch");
    for (std::size_t i = 0; i < g.values.size(); ++i) dst.values[i] += g.values[i];
}

template <typename T>
void Graph<T>::backward(const std::vector<std::pair<int, Tensor<T>>>& seeds) {
    for (const auto& [id, g] : seeds) accumulate(id, g);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        const Step& s = *it;
        if (grads_[s.out].values.empty()) continue; // no gradient reached this value
        const Tensor<T>& g = grads_[s.out];
        switch (s.op) {
        case Op::input:
        case Op::detach:
            break;
        case Op::conv:
        case Op::deconv: {
            ConvGrads<T> r = s.op == Op::conv ? conv2d_backward(values_[s.in[0]], s.slot->params, g)
                                              : deconv2d_backward(values_[s.in[0]], s.slot->params, g);
            auto& gw = s.slot->grad_w;
            auto& gb = s.slot->grad_b;
            if (gw.size() != r.grad_w.size()) s.slot->zero_grad();
            for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += r.grad_w[i];
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += r.grad_b[i];
            accumulate(s.in[0], r.grad_x);
            break;
        }
        case Op::lrelu:
            accumulate(s.in[0], leaky_relu_backward(values_[s.in[0]], g, s.slope));
            break;
        case Op::concat: {
            std::vector<int> channels;
            for (int id : s.in) channels.push_back(values_[id].c);
            auto parts = concat_backward<T>(g, channels);
            for (std::size_t k = 0; k < parts.size(); ++k) accumulate(s.in[k], parts[k]);
            break;
        }
        case Op::resize: {
            const Tensor<T>& x = values_[s.in[0]];
            accumulate(s.in[0], bilinear_resize_backward(g, x.h, x.w));
            break;
        }
        }
        // Gradients of intermediates are no longer needed once propagated.
        if (s.op != Op::input) grads_[s.out] = Tensor<T>();
    }
}

template class Graph<float>;
template class Graph<double>;

} // namespace expofuse
