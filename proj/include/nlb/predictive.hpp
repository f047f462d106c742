#pragma once

#include <limits>
#include <variant>
#include <vector>

#include "nlb/common.hpp"
#include "nlb/special.hpp"

namespace nlb {

struct GaussianPredictive {
  double mean;
  double variance;
  double log_density(double y) const { return log_normal_pdf(y, mean, variance); }
};

struct StudentTPredictive {
  double mean;
  double scale;  // squared-scale parameter of the t density
  double dof;
  double log_density(double y) const {
    return log_student_t_pdf(y, mean, scale, dof);
  }
  double variance() const {
    if (dof <= 2.0) return std::numeric_limits<double>::infinity();
    return scale * dof / (dof - 2.0);
  }
};

// Equal-weight mixture over slice samples (or posterior draws). Components
// are homogeneous: all Gaussian or all Student-t.
struct PredictiveMixture {
  std::variant<std::vector<GaussianPredictive>, std::vector<StudentTPredictive>>
      components;

  std::size_t size() const {
    return std::visit([](const auto& v) { return v.size(); }, components);
  }
};

struct MixtureStats {
  double log_density;
  double mean;
  double variance;
};

// Log density via logsumexp; mean and variance by the law of total variance.
inline MixtureStats mixture_predict(const PredictiveMixture& mix, double y) {
  return std::visit(
      [y](const auto& comps) -> MixtureStats {
        const std::size_t s = comps.size();
        std::vector<double> lps(s);
        double mean = 0.0;
        double second = 0.0;
        for (std::size_t i = 0; i < s; ++i) {
          lps[i] = comps[i].log_density(y);
          mean += comps[i].mean;
          double v;
          if constexpr (std::is_same_v<std::decay_t<decltype(comps[i])>,
                                       GaussianPredictive>) {
            v = comps[i].variance;
          } else {
            v = comps[i].variance();
          }
          second += v + comps[i].mean * comps[i].mean;
        }
        mean /= static_cast<double>(s);
        second /= static_cast<double>(s);
        return {logsumexp(lps) - std::log(static_cast<double>(s)), mean,
                second - mean * mean};
      },
      mix.components);
}

inline double mixture_mean(const PredictiveMixture& mix) {
  return std::visit(
      [](const auto& comps) {
        double m = 0.0;
        for (const auto& c : comps) m += c.mean;
        return m / static_cast<double>(comps.size());
      },
      mix.components);
}

}  // namespace nlb
