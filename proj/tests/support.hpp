#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "patchzero/nn.hpp"
#include "patchzero/rng.hpp"
#include "patchzero/tensor.hpp"

namespace pz::test {

template <typename T>
BasicTensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  Rng rng(seed);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return BasicTensor<T>(std::move(shape), std::move(v), requires_grad);
}

// Worst |analytic - central FD| / max(1, |FD|) over every input element.
// f must build its result from the tensors it is given.
template <typename T>
double max_fd_error(const std::function<BasicTensor<T>(const std::vector<BasicTensor<T>>&)>& f,
                    std::vector<BasicTensor<T>> inputs, double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    BasicTape<T> tape;
    tape.backward(f(inputs));
  }
  double worst = 0.0;
  NoGradGuard<T> guard;
  for (auto& t : inputs) {
    const std::vector<T> g = t.has_grad() ? std::vector<T>(t.grad().begin(), t.grad().end())
                                          : std::vector<T>(t.numel(), T(0));
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T saved = d[i];
      d[i] = static_cast<T>(saved + h);
      const double up = f(inputs).item();
      d[i] = static_cast<T>(saved - h);
      const double down = f(inputs).item();
      d[i] = saved;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

struct EndToEndFd {
  double worst64 = 0.0;  // double analytic vs double central difference
  double worst32 = 0.0;  // float analytic vs the same reference
  std::size_t redrawn = 0;
};

// Gradient check of a whole network loss at 20 random parameter
// coordinates. The reference is a central difference in double with
// h = 1e-5. A coordinate whose +-h step crosses a ReLU kink has no valid
// reference; such probes are detected by disagreement with the h/10
// difference and replaced by a fresh draw.
template <typename Params, typename Loss>
EndToEndFd end_to_end_fd(const Params& p32, Loss loss_of, std::uint64_t seed) {
  auto p64 = cast_params<double>(p32);
  auto all32 = p32.tensors();
  auto all64 = p64.tensors();
  for (auto& t : all32) t.zero_grad();
  for (auto& t : all64) t.zero_grad();
  {
    BasicTape<float> tape;
    tape.backward(loss_of(p32));
  }
  {
    BasicTape<double> tape;
    tape.backward(loss_of(p64));
  }
  Rng rng(seed);
  EndToEndFd out;
  NoGradGuard<double> guard;
  auto central = [&](std::span<double> d, std::size_t i, double h) {
    const double saved = d[i];
    d[i] = saved + h;
    const double up = loss_of(p64).item();
    d[i] = saved - h;
    const double down = loss_of(p64).item();
    d[i] = saved;
    return (up - down) / (2 * h);
  };
  for (int probe = 0; probe < 20;) {
    const std::size_t ti = rng.below(all64.size());
    auto& t = all64[ti];
    const std::size_t i = rng.below(t.numel());
    auto d = t.mutable_data();
    const double fd = central(d, i, 1e-5);
    const double fine = central(d, i, 1e-6);
    if (std::abs(fd - fine) > 1e-7 * std::max(1.0, std::abs(fine))) {
      ++out.redrawn;
      if (out.redrawn > 100) break;
      continue;
    }
    const double a64 = t.has_grad() ? t.grad()[i] : 0.0;
    const double a32 = all32[ti].has_grad() ? all32[ti].grad()[i] : 0.0;
    out.worst64 = std::max(out.worst64, std::abs(a64 - fd) / std::max(1.0, std::abs(fd)));
    out.worst32 = std::max(out.worst32, std::abs(a32 - fd) / std::max(1.0, std::abs(fd)));
    ++probe;
  }
  return out;
}

template <typename T>
std::vector<T> values(const BasicTensor<T>& t) {
  return t.to_vector();
}

inline bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
           return std::memcmp(&x, &y, sizeof x) == 0;
         });
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("pz-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace pz::test
