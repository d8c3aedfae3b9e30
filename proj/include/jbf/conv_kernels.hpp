#pragma once

// Raw cross-correlation kernels shared by the tape operators and the tape-free
// evaluators. Layouts are row-major: input [cin, d, h, w], kernel
// [cout, cin, kd, kh, kw], output [cout, od, oh, ow]. Padding is zero and
// symmetric per axis; stride is always 1.

namespace jbf::kernels {

struct ConvGeometry {
  int cin = 1, d = 1, h = 1, w = 1;
  int cout = 1, kd = 1, kh = 1, kw = 1;
  int pd = 0, ph = 0, pw = 0;

  int od() const { return d + 2 * pd - kd + 1; }
  int oh() const { return h + 2 * ph - kh + 1; }
  int ow() const { return w + 2 * pw - kw + 1; }
  long input_size() const { return long(cin) * d * h * w; }
  long output_size() const { return long(cout) * od() * oh() * ow(); }
  long kernel_size() const { return long(cout) * cin * kd * kh * kw; }
};

/// out = bias + in ⋆ kernel. `bias` may be null.
template <class T>
void conv_forward(const ConvGeometry& g, const T* in, const T* kernel, const T* bias, T* out);

/// Accumulates (+=) into whichever of grad_in, grad_kernel, grad_bias is non-null.
template <class T>
void conv_backward(const ConvGeometry& g, const T* in, const T* kernel, const T* grad_out, T* grad_in,
                   T* grad_kernel, T* grad_bias);

}  // namespace jbf::kernels
