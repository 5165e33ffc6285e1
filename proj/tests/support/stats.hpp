#pragma once

#include <cstdint>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

namespace recnmp::oracle {

/// Pearson statistic of observed counts against expected counts.
inline double chi_square(const std::vector<std::uint64_t>& observed, const std::vector<double>& expected) {
  double x = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double d = static_cast<double>(observed[i]) - expected[i];
    x += d * d / expected[i];
  }
  return x;
}

/// Upper-tail critical value: P(X > c) = alpha for X ~ chi2(df).
inline double chi_square_critical(double df, double alpha = 1e-4) {
  return boost::math::quantile(boost::math::complement(boost::math::chi_squared(df), alpha));
}

}  // namespace recnmp::oracle
