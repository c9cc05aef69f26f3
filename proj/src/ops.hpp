#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace drnet {

// The primitive set covers exactly what the backbone, branches, routers,
// and the loss arithmetic need. Every op takes an optional tape; a record
// is appended when the tape is present and any input requires grad.

enum class PrimitiveKind {
    identity,
    conv2d,
    linear,
    relu,
    batchnorm2d,
    maxpool2d,
    avgpool2d,
    global_avg_pool,
    softmax,
    log_softmax,
    concat_channels,
    add,
    scalar_mul,
    weighted_sum,
    mul,
    log,
    sum_all,
    sum_per_instance,
    row_renormalize,
    select_row,
    nll_loss,
    crop2d,
};

PrimitiveKind primitive_kind_from_string(const std::string& name);
const char* primitive_kind_name(PrimitiveKind kind);

struct Conv2dAttrs {
    int stride = 1;
    int pad = 0;
    int groups = 1;
};

// floor((in + 2*pad - kernel) / stride) + 1
int conv_out_extent(int in, int kernel, int stride, int pad);

template <typename S>
Tensor<S> identity(Tape<S>* tape, Tensor<S> x);

// x (N,Cin,H,W), w (Cout,Cin/groups,kh,kw), bias (Cout) optional.
template <typename S>
Tensor<S> conv2d(Tape<S>* tape, Tensor<S> x, Tensor<S> w,
                 const Tensor<S>* bias, const Conv2dAttrs& attrs);

// x (N,in), w (out,in), bias (out) optional.
template <typename S>
Tensor<S> linear(Tape<S>* tape, Tensor<S> x, Tensor<S> w, const Tensor<S>* bias);

template <typename S>
Tensor<S> relu(Tape<S>* tape, Tensor<S> x);

// Training mode normalizes with batch statistics and, when update_running
// is set, folds them into the running buffers (running <- m*running +
// (1-m)*batch, biased variance). Eval mode is a per-channel affine map.
template <typename S>
Tensor<S> batchnorm2d(Tape<S>* tape, Tensor<S> x, Tensor<S> scale,
                      Tensor<S> shift, Tensor<S>& running_mean, Tensor<S>& running_var,
                      bool training, bool update_running, S momentum, S eps);

// Ties in max pooling break toward the first window element (row-major).
template <typename S>
Tensor<S> maxpool2d(Tape<S>* tape, Tensor<S> x, int kernel, int stride, int pad);

// Average pooling divides by the number of in-bounds window elements, so
// zero padding does not dilute border values.
template <typename S>
Tensor<S> avgpool2d(Tape<S>* tape, Tensor<S> x, int kernel, int stride, int pad);

// (N,C,H,W) -> (N,C)
template <typename S>
Tensor<S> global_avg_pool(Tape<S>* tape, Tensor<S> x);

// Row-wise over the last axis, with max subtraction.
template <typename S>
Tensor<S> softmax(Tape<S>* tape, Tensor<S> x);

template <typename S>
Tensor<S> log_softmax(Tape<S>* tape, Tensor<S> x);

template <typename S>
Tensor<S> concat_channels(Tape<S>* tape, std::vector<Tensor<S>> xs);

template <typename S>
Tensor<S> add(Tape<S>* tape, Tensor<S> a, Tensor<S> b);

template <typename S>
Tensor<S> scalar_mul(Tape<S>* tape, Tensor<S> x, S s);

// xs: k equal-shape tensors with leading batch axis N; w: (N,k).
// out[n,...] = sum_b w[n,b] * xs[b][n,...]; terms accumulate in b order.
template <typename S>
Tensor<S> weighted_sum(Tape<S>* tape, std::vector<Tensor<S>> xs, Tensor<S> w);

// Elementwise product. b may match a exactly, be a single scalar, match a
// with a trailing axis of 1 (row broadcast), or match a without the batch
// axis (per-instance broadcast).
template <typename S>
Tensor<S> mul(Tape<S>* tape, Tensor<S> a, Tensor<S> b);

// Natural log; inputs must be strictly positive.
template <typename S>
Tensor<S> log_elem(Tape<S>* tape, Tensor<S> x);

template <typename S>
Tensor<S> sum_all(Tape<S>* tape, Tensor<S> x);

// (N,...) -> (N,): sums everything but the batch axis.
template <typename S>
Tensor<S> sum_per_instance(Tape<S>* tape, Tensor<S> x);

// Divides each row (last axis) by its sum. Rows must not sum to zero.
template <typename S>
Tensor<S> row_renormalize(Tape<S>* tape, Tensor<S> x);

// (N,C,K) -> (N,K), picking row c of the middle axis.
template <typename S>
Tensor<S> select_row(Tape<S>* tape, Tensor<S> x, int row);

// Mean negative log-likelihood of the labelled entries; logp is (N,K).
template <typename S>
Tensor<S> nll_loss(Tape<S>* tape, Tensor<S> logp, const std::vector<int>& labels);

// Drops `top` rows and `left` columns from the top-left of each plane:
// out[n,c,h,w] = x[n,c,h+top,w+left], shape (N,C,H-top,W-left).
template <typename S>
Tensor<S> crop2d(Tape<S>* tape, Tensor<S> x, int top, int left);

// Same data, new shape; element count must match.
template <typename S>
Tensor<S> reshape(Tape<S>* tape, Tensor<S> x, std::vector<int> new_shape);

// Uniform attribute bag for the generic dispatcher below.
struct PrimAttrs {
    Conv2dAttrs conv;
    int kernel = 3;
    int stride = 1;
    int pad = 0;
    double scalar = 1.0;
    int row = 0;
    int top = 0;
    int left = 0;
    bool training = true;
    bool update_running = false;
    double momentum = 0.9;
    double eps = 1e-5;
    std::vector<int> labels;
};

// Generic entry point: dispatches to the typed ops. Mutable state
// (batchnorm running buffers) is taken from the inputs vector in place.
template <typename S>
Tensor<S> forward_primitive(Tape<S>* tape, PrimitiveKind kind, std::vector<Tensor<S>> inputs,
                            const PrimAttrs& attrs);

// Compares the taped gradient of sum(op(inputs) * R) against central
// finite differences, element by element, for every input that requires
// grad. R is a fixed random projection drawn from rng. Returns
// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <typename S>
double finite_difference_check(PrimitiveKind kind, std::vector<Tensor<S>> inputs,
                               const PrimAttrs& attrs, double epsilon, Rng& rng);

}  // namespace drnet
