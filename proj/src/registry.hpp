#pragma once

#include <string>
#include <unordered_set>
#include <vector>

#include "tensor.hpp"

namespace drnet {

// Execution flags threaded through every forward pass.
struct RunMode {
    bool training = true;
    bool update_stats = true;  // fold batch statistics into running buffers

    static RunMode train() { return {true, true}; }
    static RunMode eval() { return {false, false}; }
    // Training-mode arithmetic without side effects; used by gradient checks.
    static RunMode frozen_train() { return {true, false}; }
};

// Flat registry of named tensors. Trainable entries get requires_grad;
// buffers (batchnorm running statistics) are persisted but never updated
// by the optimizer.
template <typename S>
class ParamRegistry {
public:
    void add_param(const std::string& name, Tensor<S> t) {
        check_unique(name);
        t.set_requires_grad(true);
        params_.push_back(Parameter<S>{name, t, true});
    }

    void add_buffer(const std::string& name, Tensor<S> t) {
        check_unique(name);
        params_.push_back(Parameter<S>{name, t, false});
    }

    std::vector<Parameter<S>>& all() { return params_; }
    const std::vector<Parameter<S>>& all() const { return params_; }

    std::int64_t trainable_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_)
            if (p.trainable) n += p.tensor.size();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_)
            if (p.trainable) p.tensor.zero_grad();
    }

private:
    void check_unique(const std::string& name) {
        if (!names_.insert(name).second)
            throw Error("duplicate parameter name: " + name);
    }
    std::vector<Parameter<S>> params_;
    std::unordered_set<std::string> names_;
};

}  // namespace drnet
