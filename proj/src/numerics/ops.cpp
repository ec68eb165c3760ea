#include "octc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace octc {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " +
                                      shape_string(a.shape()));
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

void accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

Layout make_layout(std::span<const std::size_t> lengths, std::span<const std::size_t> valids) {
  if (lengths.size() != valids.size()) throw ShapeError("make_layout: size mismatch");
  Layout out;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (valids[i] > lengths[i]) throw ShapeError("make_layout: valid exceeds length");
    out.push_back({offset, lengths[i], valids[i]});
    offset += lengths[i];
  }
  return out;
}

std::size_t layout_rows(const Layout& layout) {
  return layout.empty() ? 0 : layout.back().offset + layout.back().length;
}

namespace kernel {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Plain tensor reductions

Tensor logsumexp_lastdim(const Tensor& x) {
  const std::size_t c = x.cols();
  if (c == 0 || x.rank() == 0) throw ShapeError("logsumexp_lastdim: empty last dimension");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    out[r] = m + std::log(s);
  }
  return out;
}

Tensor log_softmax_lastdim(const Tensor& x) {
  if (x.cols() == 0 || x.rank() == 0) throw ShapeError("log_softmax_lastdim: empty last dimension");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    const double lse = m + std::log(s);
    auto o = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) o[j] = row[j] - lse;
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.cols() == 0 || x.rank() == 0) throw ShapeError("softmax_lastdim: empty last dimension");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    auto o = out.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      o[j] = std::exp(row[j] - m);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (double& v : o) v *= inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  accumulate(out, b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
                           if (t.requires_grad(ib)) accumulate(t.grad(ib), g);
                         });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
                           if (t.requires_grad(ib)) {
                             Tensor& gb = t.grad(ib);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           if (t.requires_grad(ia)) {
                             Tensor& ga = t.grad(ia);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                           }
                           if (t.requires_grad(ib)) {
                             Tensor& gb = t.grad(ib);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                           }
                         });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(),
                         [ia, s](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                         });
}

Var silu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (1.0 + std::exp(-xv[i]));
  const auto ix = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double sg = 1.0 / (1.0 + std::exp(-xv[i]));
      gx[i] += g[i] * sg * (1.0 + xv[i] * (1.0 - sg));
    }
  });
}

Var relu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const auto ix = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

Var exp(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::exp(v);
  const auto ix = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " * " +
                     shape_string(bv.shape()));
  }
  Tensor out({m, n});
  kernel::gemm_nn(m, k, n, av.data(), bv.data(), out.data());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib, m, k, n](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           if (t.requires_grad(ia)) {
                             kernel::gemm_nt(m, n, k, g.data(), t.value(ib).data(),
                                             t.grad(ia).data());
                           }
                           if (t.requires_grad(ib)) {
                             kernel::gemm_tn(m, k, n, t.value(ia).data(), g.data(),
                                             t.grad(ib).data());
                           }
                         });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  Var y = matmul(x, w);
  if (!bias.valid()) return y;
  const Tensor& bv = bias.value();
  if (bv.size() != y.value().cols()) throw ShapeError("linear: bias size mismatch");
  Tensor out = y.value();
  const std::size_t c = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bv[j];
  const auto iy = y.id(), ib = bias.id();
  return x.tape().record(std::move(out), y.requires_grad() || bias.requires_grad(),
                         [iy, ib, c](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           if (t.requires_grad(iy)) accumulate(t.grad(iy), g);
                           if (t.requires_grad(ib)) {
                             Tensor& gb = t.grad(ib);
                             for (std::size_t r = 0; r < g.rows(); ++r)
                               for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Row-wise normalisations

Var logsumexp_lastdim(const Var& x) {
  Tensor out = logsumexp_lastdim(x.value());
  const auto ix = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    const std::size_t c = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r] * std::exp(xv[r * c + j] - y[r]);
  });
}

Var softmax_lastdim(const Var& x) {
  Tensor out = softmax_lastdim(x.value());
  const auto ix = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    const std::size_t c = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

Var log_softmax_lastdim(const Var& x) {
  Tensor out = log_softmax_lastdim(x.value());
  const auto ix = x.id();
  return x.tape().record(std::move(out), x.requires_grad(), [ix](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    const std::size_t c = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gs;
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols(), rows = xv.rows();
  if (gain.value().size() != c || bias.value().size() != c) {
    throw ShapeError("layer_norm: parameter size mismatch");
  }
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mean) * inv_std[r];
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return x.tape().record(
      std::move(out), rg,
      [ix, ig, ib, c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[r * c + j] * xhat[r * c + j];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
        if (t.requires_grad(ix)) {
          Tensor& gx = t.grad(ix);
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = g[r * c + j] * gv[j];
              m1 += dh;
              m2 += dh * xhat[r * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = g[r * c + j] * gv[j];
              gx[r * c + j] += inv_std[r] * (dh - m1 - xhat[r * c + j] * m2);
            }
          }
        }
      });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const auto ix = x.id();
  return x.tape().record(Tensor::scalar(s), x.requires_grad(),
                         [ix](Tape& t, std::uint32_t self) {
                           const double g = t.grad(self)[0];
                           for (double& v : t.grad(ix).values()) v += g;
                         });
}

Var mean_all(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Structural ops

Var concat_cols(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "concat_cols");
  require_matrix(bv, "concat_cols");
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row count mismatch");
  const std::size_t r = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy(av.row(i).begin(), av.row(i).end(), out.row(i).begin());
    std::copy(bv.row(i).begin(), bv.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(),
                         [ia, ib, r, ca, cb](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           const std::size_t c = ca + cb;
                           if (t.requires_grad(ia)) {
                             Tensor& ga = t.grad(ia);
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * c + j];
                           }
                           if (t.requires_grad(ib)) {
                             Tensor& gb = t.grad(ib);
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < cb; ++j)
                                 gb[i * cb + j] += g[i * c + ca + j];
                           }
                         });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  require_matrix(av, "slice_cols");
  const std::size_t c = av.cols(), r = av.rows();
  if (start + count > c) throw ShapeError("slice_cols: out of range");
  Tensor out({r, count});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * c + start + j];
  const auto ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(),
                         [ia, r, c, start, count](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& ga = t.grad(ia);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < count; ++j)
                               ga[i * c + start + j] += g[i * count + j];
                         });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().value().cols();
  std::size_t rows = 0;
  bool rg = false;
  for (const Var& p : parts) {
    require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != c) throw ShapeError("concat_rows: column mismatch");
    rows += p.value().rows();
    rg = rg || p.requires_grad();
  }
  Tensor out({rows, c});
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(off * c));
    off += p.value().rows();
    ids.push_back(p.id());
  }
  return parts.front().tape().record(std::move(out), rg,
                                     [ids = std::move(ids), c](Tape& t, std::uint32_t self) {
                                       const Tensor& g = t.grad(self);
                                       std::size_t off = 0;
                                       for (auto id : ids) {
                                         const std::size_t n = t.value(id).size();
                                         if (t.requires_grad(id)) {
                                           Tensor& gp = t.grad(id);
                                           for (std::size_t i = 0; i < n; ++i) gp[i] += g[off * c + i];
                                         }
                                         off += n / c;
                                       }
                                     });
}

Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  require_matrix(av, "slice_rows");
  Tensor out = av.slice_rows(start, count);
  const auto ia = a.id();
  const std::size_t c = av.cols();
  return a.tape().record(std::move(out), a.requires_grad(),
                         [ia, start, c](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[start * c + i] += g[i];
                         });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t c = tv.cols();
  Tensor out({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table");
    }
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const auto it = table.id();
  return table.tape().record(std::move(out), table.requires_grad(),
                             [it, c, idv = std::move(idv)](Tape& t, std::uint32_t self) {
                               const Tensor& g = t.grad(self);
                               Tensor& gt = t.grad(it);
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   gt[static_cast<std::size_t>(idv[i]) * c + j] += g[i * c + j];
                             });
}

Var mask_rows(const Var& x, const Layout& layout) {
  const Tensor& xv = x.value();
  if (layout_rows(layout) != xv.rows()) throw ShapeError("mask_rows: layout does not match rows");
  Tensor out = xv;
  const std::size_t c = xv.cols();
  std::vector<std::pair<std::size_t, std::size_t>> dead;  // [begin, end) row ranges
  for (const Segment& s : layout) {
    if (s.valid < s.length) {
      dead.emplace_back(s.offset + s.valid, s.offset + s.length);
      std::fill(out.data() + (s.offset + s.valid) * c, out.data() + (s.offset + s.length) * c, 0.0);
    }
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), x.requires_grad(),
                         [ix, c, dead = std::move(dead)](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& gx = t.grad(ix);
                           std::size_t row = 0;
                           std::size_t di = 0;
                           const std::size_t rows = g.rows();
                           for (row = 0; row < rows; ++row) {
                             while (di < dead.size() && row >= dead[di].second) ++di;
                             if (di < dead.size() && row >= dead[di].first) continue;
                             for (std::size_t j = 0; j < c; ++j) gx[row * c + j] += g[row * c + j];
                           }
                         });
}

Layout halve_layout(const Layout& layout) {
  Layout out;
  std::size_t off = 0;
  for (const Segment& s : layout) {
    const std::size_t len = (s.length + 1) / 2;
    out.push_back({off, len, (s.valid + 1) / 2});
    off += len;
  }
  return out;
}

Var stack_stride2(const Var& x, const Layout& in_layout) {
  const Tensor& xv = x.value();
  require_matrix(xv, "stack_stride2");
  if (layout_rows(in_layout) != xv.rows()) throw ShapeError("stack_stride2: layout mismatch");
  const std::size_t c = xv.cols();
  const Layout out_layout = halve_layout(in_layout);
  const std::size_t out_rows = layout_rows(out_layout);
  Tensor out({out_rows, 3 * c});
  // src[r * 3 + w] = packed input row feeding window slot w, or -1 for zero.
  std::vector<long> src(out_rows * 3, -1);
  for (std::size_t s = 0; s < in_layout.size(); ++s) {
    const Segment& in = in_layout[s];
    const Segment& o = out_layout[s];
    for (std::size_t tt = 0; tt < o.length; ++tt) {
      for (int w = 0; w < 3; ++w) {
        const long pos = static_cast<long>(2 * tt) + w - 1;
        if (pos < 0 || pos >= static_cast<long>(in.valid)) continue;
        const std::size_t r = in.offset + static_cast<std::size_t>(pos);
        src[(o.offset + tt) * 3 + static_cast<std::size_t>(w)] = static_cast<long>(r);
        std::copy(xv.row(r).begin(), xv.row(r).end(),
                  out.data() + (o.offset + tt) * 3 * c + static_cast<std::size_t>(w) * c);
      }
    }
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), x.requires_grad(),
                         [ix, c, src = std::move(src)](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& gx = t.grad(ix);
                           for (std::size_t k = 0; k < src.size(); ++k) {
                             if (src[k] < 0) continue;
                             const double* gr = g.data() + k * c;
                             double* dst = gx.data() + static_cast<std::size_t>(src[k]) * c;
                             for (std::size_t j = 0; j < c; ++j) dst[j] += gr[j];
                           }
                         });
}

Var depthwise_conv1d(const Var& x, const Var& w, const Var& bias, const Layout& layout) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_matrix(xv, "depthwise_conv1d");
  require_matrix(wv, "depthwise_conv1d");
  const std::size_t c = xv.cols(), kw = wv.rows();
  if (wv.cols() != c || bias.value().size() != c) throw ShapeError("depthwise_conv1d: channel mismatch");
  if (kw % 2 == 0) throw ShapeError("depthwise_conv1d: kernel width must be odd");
  if (layout_rows(layout) != xv.rows()) throw ShapeError("depthwise_conv1d: layout mismatch");
  const long half = static_cast<long>(kw / 2);
  Tensor out(xv.shape());
  const Tensor& bv = bias.value();
  for (const Segment& s : layout) {
    for (std::size_t tt = 0; tt < s.length; ++tt) {
      double* o = out.data() + (s.offset + tt) * c;
      for (std::size_t j = 0; j < c; ++j) o[j] = bv[j];
      for (std::size_t k = 0; k < kw; ++k) {
        const long pos = static_cast<long>(tt) + static_cast<long>(k) - half;
        if (pos < 0 || pos >= static_cast<long>(s.valid)) continue;
        const double* xr = xv.data() + (s.offset + static_cast<std::size_t>(pos)) * c;
        const double* wr = wv.data() + k * c;
        for (std::size_t j = 0; j < c; ++j) o[j] += wr[j] * xr[j];
      }
    }
  }
  const auto ix = x.id(), iw = w.id(), ib = bias.id();
  const bool rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
  return x.tape().record(std::move(out), rg,
                         [ix, iw, ib, c, kw, half, layout](Tape& t, std::uint32_t self) {
                           const Tensor& g = t.grad(self);
                           const Tensor& xv = t.value(ix);
                           const Tensor& wv = t.value(iw);
                           Tensor* gx = t.requires_grad(ix) ? &t.grad(ix) : nullptr;
                           Tensor* gw = t.requires_grad(iw) ? &t.grad(iw) : nullptr;
                           Tensor* gb = t.requires_grad(ib) ? &t.grad(ib) : nullptr;
                           for (const Segment& s : layout) {
                             for (std::size_t tt = 0; tt < s.length; ++tt) {
                               const double* gr = g.data() + (s.offset + tt) * c;
                               if (gb)
                                 for (std::size_t j = 0; j < c; ++j) (*gb)[j] += gr[j];
                               for (std::size_t k = 0; k < kw; ++k) {
                                 const long pos = static_cast<long>(tt) + static_cast<long>(k) - half;
                                 if (pos < 0 || pos >= static_cast<long>(s.valid)) continue;
                                 const std::size_t xr = (s.offset + static_cast<std::size_t>(pos)) * c;
                                 if (gw)
                                   for (std::size_t j = 0; j < c; ++j) (*gw)[k * c + j] += gr[j] * xv[xr + j];
                                 if (gx)
                                   for (std::size_t j = 0; j < c; ++j) (*gx)[xr + j] += gr[j] * wv[k * c + j];
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Attention

namespace {

// Copies columns [h*dh, (h+1)*dh) of rows [off, off+n) into a dense n x dh block.
void extract_head(const Tensor& src, std::size_t off, std::size_t n, std::size_t h, std::size_t dh,
                  double* dst) {
  const std::size_t c = src.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dh; ++j) dst[i * dh + j] = src[(off + i) * c + h * dh + j];
}

void scatter_head_add(Tensor& dst, std::size_t off, std::size_t n, std::size_t h, std::size_t dh,
                      const double* src) {
  const std::size_t c = dst.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dh; ++j) dst[(off + i) * c + h * dh + j] += src[i * dh + j];
}

}  // namespace

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const Layout& q_layout,
              const Layout& kv_layout) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix(qv, "attention");
  require_matrix(kv, "attention");
  require_matrix(vv, "attention");
  const std::size_t d = qv.cols();
  if (kv.cols() != d || vv.cols() != d) throw ShapeError("attention: width mismatch");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (q_layout.size() != kv_layout.size()) throw ShapeError("attention: segment count mismatch");
  if (layout_rows(q_layout) != qv.rows() || layout_rows(kv_layout) != kv.rows() ||
      kv.rows() != vv.rows()) {
    throw ShapeError("attention: layout mismatch");
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out(qv.shape());
  // Attention weights per (segment, head), each nq x nk over valid keys.
  std::vector<std::vector<double>> probs(q_layout.size() * heads);
  std::vector<double> qh, kh, vh, ctx;
  std::size_t cells = 0;
  for (std::size_t s = 0; s < q_layout.size(); ++s) {
    const std::size_t nq = q_layout[s].length;
    const std::size_t nk = kv_layout[s].valid;
    if (nk == 0) throw ShapeError("attention: segment with no valid keys");
    qh.assign(nq * dh, 0.0);
    kh.assign(nk * dh, 0.0);
    vh.assign(nk * dh, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      extract_head(qv, q_layout[s].offset, nq, h, dh, qh.data());
      extract_head(kv, kv_layout[s].offset, nk, h, dh, kh.data());
      extract_head(vv, kv_layout[s].offset, nk, h, dh, vh.data());
      std::vector<double>& p = probs[s * heads + h];
      p.assign(nq * nk, 0.0);
      kernel::gemm_nt(nq, dh, nk, qh.data(), kh.data(), p.data());
      for (std::size_t i = 0; i < nq; ++i) {
        double* row = p.data() + i * nk;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          row[j] *= sc;
          m = std::max(m, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          row[j] = std::exp(row[j] - m);
          z += row[j];
        }
        for (std::size_t j = 0; j < nk; ++j) row[j] /= z;
      }
      ctx.assign(nq * dh, 0.0);
      kernel::gemm_nn(nq, nk, dh, p.data(), vh.data(), ctx.data());
      scatter_head_add(out, q_layout[s].offset, nq, h, dh, ctx.data());
      cells += nq * nk;
    }
  }
  q.tape().attention_cells += cells;

  const auto iq = q.id(), ik = k.id(), iv = v.id();
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return q.tape().record(
      std::move(out), rg,
      [iq, ik, iv, heads, dh, sc, q_layout, kv_layout, probs = std::move(probs)](
          Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& qv = t.value(iq);
        const Tensor& kv = t.value(ik);
        const Tensor& vv = t.value(iv);
        Tensor* gq = t.requires_grad(iq) ? &t.grad(iq) : nullptr;
        Tensor* gk = t.requires_grad(ik) ? &t.grad(ik) : nullptr;
        Tensor* gv = t.requires_grad(iv) ? &t.grad(iv) : nullptr;
        std::vector<double> qh, kh, vh, gh, dp, tmp;
        for (std::size_t s = 0; s < q_layout.size(); ++s) {
          const std::size_t nq = q_layout[s].length;
          const std::size_t nk = kv_layout[s].valid;
          qh.assign(nq * dh, 0.0);
          kh.assign(nk * dh, 0.0);
          vh.assign(nk * dh, 0.0);
          gh.assign(nq * dh, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            const std::vector<double>& p = probs[s * heads + h];
            extract_head(qv, q_layout[s].offset, nq, h, dh, qh.data());
            extract_head(kv, kv_layout[s].offset, nk, h, dh, kh.data());
            extract_head(vv, kv_layout[s].offset, nk, h, dh, vh.data());
            extract_head(g, q_layout[s].offset, nq, h, dh, gh.data());
            if (gv) {
              tmp.assign(nk * dh, 0.0);
              kernel::gemm_tn(nq, nk, dh, p.data(), gh.data(), tmp.data());
              scatter_head_add(*gv, kv_layout[s].offset, nk, h, dh, tmp.data());
            }
            if (!gq && !gk) continue;
            dp.assign(nq * nk, 0.0);
            kernel::gemm_nt(nq, dh, nk, gh.data(), vh.data(), dp.data());
            for (std::size_t i = 0; i < nq; ++i) {
              const double* pr = p.data() + i * nk;
              double* dr = dp.data() + i * nk;
              double dot = 0.0;
              for (std::size_t j = 0; j < nk; ++j) dot += pr[j] * dr[j];
              for (std::size_t j = 0; j < nk; ++j) dr[j] = pr[j] * (dr[j] - dot) * sc;
            }
            if (gq) {
              tmp.assign(nq * dh, 0.0);
              kernel::gemm_nn(nq, nk, dh, dp.data(), kh.data(), tmp.data());
              scatter_head_add(*gq, q_layout[s].offset, nq, h, dh, tmp.data());
            }
            if (gk) {
              tmp.assign(nk * dh, 0.0);
              kernel::gemm_tn(nq, nk, dh, dp.data(), qh.data(), tmp.data());
              scatter_head_add(*gk, kv_layout[s].offset, nk, h, dh, tmp.data());
            }
          }
        }
      });
}

Tensor sinusoidal_positions(std::size_t rows, std::size_t dim) {
  Tensor out({rows, dim});
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      out[pos * dim + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < dim) out[pos * dim + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return out;
}

}  // namespace octc
