#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "bld/image.hpp"

namespace bld::test {

/// Solves A u = b by Gaussian elimination with partial pivoting on a dense copy.
inline std::vector<double> dense_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    if (std::fabs(a[piv][col]) < 1e-300) throw std::runtime_error("dense_solve: singular system");
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r][col] / a[col][col];
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> u(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * u[c];
    u[i] = s / a[i][i];
  }
  return u;
}

/// Discrete Poisson blend written out pixel by pixel: for each masked p with in-frame 4-neighbours q,
/// sum_q (u_p - u_q) = sum_q (xh_p - xh_q), where u_q = x_q for unmasked q.
inline Image dense_poisson(const Image& x, const Image& xh, const Mask& m) {
  const int h = x.height(), w = x.width();
  std::vector<int> index(static_cast<std::size_t>(h * w), -1);
  int n = 0;
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      if (m(y, xx)) index[static_cast<std::size_t>(y * w + xx)] = n++;
  Image out = x;
  const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
  for (int c = 0; c < x.channels(); ++c) {
    std::vector<std::vector<double>> a(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
    std::vector<double> b(static_cast<std::size_t>(n));
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const int row = index[static_cast<std::size_t>(y * w + xx)];
        if (row < 0) continue;
        for (int k = 0; k < 4; ++k) {
          const int qy = y + dy[k], qx = xx + dx[k];
          if (qy < 0 || qy >= h || qx < 0 || qx >= w) continue;
          a[row][row] += 1.0;
          b[row] += static_cast<double>(xh.at(c, y, xx)) - xh.at(c, qy, qx);
          const int col = index[static_cast<std::size_t>(qy * w + qx)];
          if (col >= 0) a[row][col] -= 1.0;
          else b[row] += x.at(c, qy, qx);
        }
      }
    const std::vector<double> u = dense_solve(a, b);
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const int row = index[static_cast<std::size_t>(y * w + xx)];
        if (row >= 0) out.at(c, y, xx) = static_cast<float>(u[static_cast<std::size_t>(row)]);
      }
  }
  return out;
}

}  // namespace bld::test
