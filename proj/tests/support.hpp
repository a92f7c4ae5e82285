#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "milal/milal.hpp"

namespace milal::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline FeatureBag random_bag(const std::string& id, int label, Eigen::Index m, Eigen::Index d, Rng& rng) {
  FeatureBag b;
  b.id = id;
  b.label = label;
  b.instances = random_matrix(m, d, rng);
  return b;
}

/// Worst entry-wise relative error between analytic and central-difference
/// gradients of `loss` over every parameter of `model`.
/// Entries where both gradients are below `floor` are compared against
/// `floor` instead of their own magnitude.
struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t entries = 0;
};

inline GradCheck check_gradients(MilModel& model, const std::function<Var(Graph&)>& loss, double h = 1e-5,
                                 double floor = 1e-6) {
  auto params = model.parameters();
  std::vector<Matrix> analytic;
  {
    Graph g;
    Var l = loss(g);
    g.backward(l);
    std::vector<const Parameter*> cp(params.begin(), params.end());
    analytic = g.gradients(cp);
  }
  auto eval = [&] {
    Graph g;
    return g.scalar(loss(g));
  };
  GradCheck out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& v = params[p]->value;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double orig = v.data()[i];
      v.data()[i] = orig + h;
      const double up = eval();
      v.data()[i] = orig - h;
      const double down = eval();
      v.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p].data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = params[p]->name + "[" + std::to_string(i) + "]";
      }
      ++out.entries;
    }
  }
  return out;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("milal-" + tag + "-" + std::to_string(fnv1a(tag) ^ reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace milal::testing
