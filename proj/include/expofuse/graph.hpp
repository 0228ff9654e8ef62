#pragma once

#include "expofuse/tensor.hpp"

#include <string>
#include <vector>

namespace expofuse {

// Learnable (de)convolution plus its gradient accumulators.
template <typename T>
struct ParamSlot {
    enum class Kind { conv, deconv };
    std::string name;
    Kind kind = Kind::conv;
    ConvParams<T> params;
    std::vector<T> grad_w;
    std::vector<T> grad_b;

    void zero_grad() {
        grad_w.assign(params.weights.size(), T(0));
        grad_b.assign(params.bias.size(), T(0));
    }
};

// Records the ops of one forward pass so backward() can replay them in
// reverse. Only the handful of ops the fusion networks use are supported.
template <typename T>
class Graph {
public:
    int input(Tensor<T> t);
    int conv(int x, ParamSlot<T>& slot);
    int deconv(int x, ParamSlot<T>& slot);
    int leaky_relu(int x, T slope);
    int concat(const std::vector<int>& xs);
    int resize(int x, int h, int w);
    // Identity forward; gradient is not propagated (staged training).
    int detach(int x);

    const Tensor<T>& value(int id) const { return values_[id]; }
    Tensor<T>& grad(int id);
    std::size_t size() const { return values_.size(); }

    // Seeds grad(id) += g for each (id, g) then runs all recorded steps in reverse.
    void backward(const std::vector<std::pair<int, Tensor<T>>>& seeds);

private:
    enum class Op { input, conv, deconv, lrelu, concat, resize, detach };
    struct Step {
        Op op;
        std::vector<int> in;
        int out;
        ParamSlot<T>* slot = nullptr;
        T slope = T(0);
    };

    int push(Tensor<T> v, Step s);
    void accumulate(int id, const Tensor<T>& g);

    std::vector<Tensor<T>> values_;
    std::vector<Tensor<T>> grads_;
    std::vector<Step> steps_;
};

} // namespace expofuse
