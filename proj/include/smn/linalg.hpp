// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>

#include "smn/kernels.hpp"
#include "smn/tensor.hpp"

namespace smn {

/// y = x W^T + b with W stored out x in.
template <class Real>
Tensor<Real> linear_forward(const Tensor<Real>& weights, std::span<const Real> bias,
                            const Tensor<Real>& input) {
  const std::size_t out_dim = weights.rows();
  const std::size_t in_dim = weights.cols();
  if (input.cols() != in_dim) {
    throw DimensionError("linear_forward: input has " + std::to_string(input.cols()) +
                         " columns, layer expects " + std::to_string(in_dim));
  }
  Tensor<Real> out(input.rows(), out_dim);
  for (std::size_t b = 0; b < input.rows(); ++b) {
    const auto x = input.row(b);
    auto y = out.row(b);
    for (std::size_t o = 0; o < out_dim; ++o) {
      y[o] = kernels::dot<Real>(x, weights.row(o)) + (bias.empty() ? Real(0) : bias[o]);
    }
  }
  return out;
}

/// dW += dY^T X
template <class Real>
void accumulate_weight_grad(const Tensor<Real>& grad_out, const Tensor<Real>& input,
                            Tensor<Real>& grad_weights) {
  for (std::size_t b = 0; b < input.rows(); ++b) {
    const auto x = input.row(b);
    const auto dy = grad_out.row(b);
    for (std::size_t o = 0; o < grad_out.cols(); ++o) {
      if (dy[o] != Real(0)) kernels::axpy<Real>(dy[o], x, grad_weights.row(o));
    }
  }
}

/// dX = dY W
template <class Real>
Tensor<Real> input_grad(const Tensor<Real>& grad_out, const Tensor<Real>& weights) {
  Tensor<Real> dx(grad_out.rows(), weights.cols());
  for (std::size_t b = 0; b < grad_out.rows(); ++b) {
    const auto dy = grad_out.row(b);
    auto out = dx.row(b);
    for (std::size_t o = 0; o < weights.rows(); ++o) {
      if (dy[o] != Real(0)) kernels::axpy<Real>(dy[o], weights.row(o), out);
    }
  }
  return dx;
}

}  // namespace smn
