#pragma once

#include <span>
#include <vector>

#include "octc/autodiff.hpp"

namespace octc {

/// One sequence inside a row-packed batch: rows [offset, offset+length) of
/// the packed matrix, of which the first `valid` are real frames.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t valid = 0;
};
using Layout = std::vector<Segment>;

Layout make_layout(std::span<const std::size_t> lengths, std::span<const std::size_t> valids);
std::size_t layout_rows(const Layout& layout);

// Raw kernels. Row i of the output depends only on row i of A and the
// accumulation order over k is fixed, so results do not depend on how many
// rows are packed together.
namespace kernel {
/// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
/// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
/// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
}  // namespace kernel

Tensor logsumexp_lastdim(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
/// x * w + bias; pass a default Var for no bias.
Var linear(const Var& x, const Var& w, const Var& bias = {});
Var silu(const Var& x);
Var relu(const Var& x);
Var exp(const Var& x);
Var logsumexp_lastdim(const Var& x);
Var softmax_lastdim(const Var& x);
Var log_softmax_lastdim(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var sum_all(const Var& x);
Var mean_all(const Var& x);

Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t start, std::size_t count);
Var gather_rows(const Var& table, std::span<const int> ids);

/// Zeroes rows at or beyond each segment's valid length.
Var mask_rows(const Var& x, const Layout& layout);

/// Layout after one stride-2 stage: length and valid become ceil(n / 2).
Layout halve_layout(const Layout& layout);
/// Stride-2, width-3 frame stacking: output row t of a segment is
/// [x(2t-1), x(2t), x(2t+1)] with frames outside [0, valid) read as zero.
Var stack_stride2(const Var& x, const Layout& in_layout);

/// Per-channel temporal convolution, centred kernel w[K x C], zero padding
/// outside [0, valid) of each segment.
Var depthwise_conv1d(const Var& x, const Var& w, const Var& bias, const Layout& layout);

/// Scaled dot-product attention over packed sequences. Segment i of the
/// queries attends to the first `valid` rows of segment i of the keys.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
              const Layout& q_layout, const Layout& kv_layout);

/// Sinusoidal position table [rows x dim].
Tensor sinusoidal_positions(std::size_t rows, std::size_t dim);

}  // namespace octc
