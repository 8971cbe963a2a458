#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "differ/rng.hpp"
#include "differ/types.hpp"

namespace differ::test {

inline Matrix random_matrix(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  }
  return m;
}

// Central finite differences of a scalar function over a matrix argument.
template <typename F>
Matrix central_diff(F&& f, const Matrix& x, double h = 1e-6) {
  Matrix grad(x.rows(), x.cols());
  Matrix probe = x;
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      probe(r, c) = x(r, c) + h;
      const double up = f(probe);
      probe(r, c) = x(r, c) - h;
      const double down = f(probe);
      probe(r, c) = x(r, c);
      grad(r, c) = (up - down) / (2.0 * h);
    }
  }
  return grad;
}

inline bool close_rel(double a, double b, double rel, double abs_floor = 1e-8) {
  return std::abs(a - b) <= std::max(abs_floor, rel * std::max(std::abs(a), std::abs(b)));
}

inline bool grads_close(const Matrix& a, const Matrix& b, double rel, double abs_floor = 1e-8) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index c = 0; c < a.cols(); ++c) {
      if (!close_rel(a(r, c), b(r, c), rel, abs_floor)) return false;
    }
  }
  return true;
}

// Unique scratch directory under the system temp root.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("differ_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace differ::test
