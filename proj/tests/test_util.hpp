#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "recipecrit/matrix.hpp"

namespace testutil {

inline recipecrit::Matrix random_matrix(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    recipecrit::Matrix m(r, c);
    for (double& v : m.data) v = nd(rng);
    return m;
}

inline double max_abs_diff(const recipecrit::Matrix& a, const recipecrit::Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

// Central differences of a scalar function of one matrix.
inline recipecrit::Matrix numeric_gradient(const std::function<double(const recipecrit::Matrix&)>& f,
                                           recipecrit::Matrix x, double h = 1e-5) {
    recipecrit::Matrix g(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double orig = x.data[i];
        x.data[i] = orig + h;
        const double fp = f(x);
        x.data[i] = orig - h;
        const double fm = f(x);
        x.data[i] = orig;
        g.data[i] = (fp - fm) / (2 * h);
    }
    return g;
}

}  // namespace testutil
