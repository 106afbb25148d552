#pragma once

// Independent nested-loop reference implementations used as test oracles.
// Plain std::vector<double> in, std::vector<double> out; nothing here touches
// the engine's kernels or ops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace rafd::oracle {

using Vec = std::vector<double>;

// x: c x h x w, w: o x c x k x k, b: o
inline Vec conv2d(const Vec& x, std::size_t c, std::size_t h, std::size_t w, const Vec& wt, std::size_t o,
                  std::size_t k, const Vec& b, std::size_t stride, std::size_t pad, std::size_t& ho, std::size_t& wo) {
  ho = (h + 2 * pad - k) / stride + 1;
  wo = (w + 2 * pad - k) / stride + 1;
  Vec y(o * ho * wo, 0.0);
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double s = b.empty() ? 0.0 : b[oc];
        for (std::size_t ic = 0; ic < c; ++ic)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              s += x[(ic * h + iy) * w + ix] * wt[((oc * c + ic) * k + ky) * k + kx];
            }
        y[(oc * ho + oy) * wo + ox] = s;
      }
  return y;
}

inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
  Vec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

// softmax(q k^T / sqrt(d)) v with triple loops.
inline Vec attention(const Vec& q, const Vec& k, const Vec& v, std::size_t nq, std::size_t nk, std::size_t d,
                     std::size_t dv) {
  Vec out(nq * dv, 0.0);
  for (std::size_t i = 0; i < nq; ++i) {
    Vec s(nk);
    double mx = -1e300;
    for (std::size_t j = 0; j < nk; ++j) {
      double dot = 0;
      for (std::size_t p = 0; p < d; ++p) dot += q[i * d + p] * k[j * d + p];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (auto& e : s) {
      e = std::exp(e - mx);
      z += e;
    }
    for (std::size_t j = 0; j < nk; ++j)
      for (std::size_t p = 0; p < dv; ++p) out[i * dv + p] += s[j] / z * v[j * dv + p];
  }
  return out;
}

// C[i,j,k,l] = sum_c Et[c,i,j] * Ep[c,k,l] / sqrt(ch)
inline Vec cost_volume(const Vec& et, const Vec& ep, std::size_t ch, std::size_t h, std::size_t w) {
  Vec c(h * w * h * w, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < h; ++k)
        for (std::size_t l = 0; l < w; ++l) {
          double s = 0;
          for (std::size_t cc = 0; cc < ch; ++cc) s += et[(cc * h + i) * w + j] * ep[(cc * h + k) * w + l];
          c[((i * w + j) * h + k) * w + l] = s / std::sqrt(static_cast<double>(ch));
        }
  return c;
}

// V[:, i, j] = (j, i) - sum_{k,l} softmax_{k,l}(C[i,j,:,:]) * (l, k); output 2 x h x w.
inline Vec flow_from_cost(const Vec& cost, std::size_t h, std::size_t w) {
  Vec v(2 * h * w, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double* row = cost.data() + (i * w + j) * h * w;
      double mx = -1e300;
      for (std::size_t t = 0; t < h * w; ++t) mx = std::max(mx, row[t]);
      double z = 0, ex = 0, ey = 0;
      for (std::size_t k = 0; k < h; ++k)
        for (std::size_t l = 0; l < w; ++l) {
          const double p = std::exp(row[k * w + l] - mx);
          z += p;
          ex += p * static_cast<double>(l);
          ey += p * static_cast<double>(k);
        }
      v[i * w + j] = static_cast<double>(j) - ex / z;
      v[h * w + i * w + j] = static_cast<double>(i) - ey / z;
    }
  return v;
}

// Penalty-reduced focal loss, alpha=2 beta=4, probabilities clamped to [1e-4, 1-1e-4].
inline double focal(const Vec& pred, const Vec& target) {
  double total = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::min(std::max(pred[i], 1e-4), 1.0 - 1e-4);
    if (target[i] == 1.0) {
      ++pos;
      total -= (1 - p) * (1 - p) * std::log(p);
    } else {
      const double q = 1 - target[i];
      total -= q * q * q * q * p * p * std::log(1 - p);
    }
  }
  return total / static_cast<double>(std::max<std::size_t>(pos, 1));
}

// Mean / foreground-mean of per-cell Euclidean error; a, b are 2 x n.
inline void epe(const Vec& a, const Vec& b, const std::vector<bool>& mask, double& all, double& fg) {
  const std::size_t n = a.size() / 2;
  double s = 0, sf = 0;
  std::size_t nf = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = a[i] - b[i], dy = a[n + i] - b[n + i];
    const double e = std::sqrt(dx * dx + dy * dy);
    s += e;
    if (mask[i]) {
      sf += e;
      ++nf;
    }
  }
  all = s / static_cast<double>(n);
  fg = nf ? sf / static_cast<double>(nf) : 0.0;
}

}  // namespace rafd::oracle
