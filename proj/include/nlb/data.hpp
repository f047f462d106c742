#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlb/common.hpp"
#include "nlb/linalg.hpp"
#include "nlb/rng.hpp"

namespace nlb {

struct Dataset {
  std::string name;
  Matrix x;  // N x d
  Vector y;  // N
  Index n() const { return x.rows(); }
  Index dim() const { return x.cols(); }
};

enum class SplitKind { Standard, Gap, Toy };

struct Split {
  std::vector<Index> train;
  std::vector<Index> test;
  SplitKind kind = SplitKind::Standard;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::string name;
  std::string path;  // relative to the manifest's directory
  int target_col = -1;
  bool has_header = false;
  int n_splits = 20;
};

inline Manifest parse_manifest(const nlohmann::json& j) {
  Manifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.path = j.at("path").get<std::string>();
    m.target_col = j.at("target_col").get<int>();
    m.has_header = j.value("has_header", false);
    m.n_splits = j.value("n_splits", 20);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  return m;
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest ") + path + ": " + e.what());
  }
  return parse_manifest(j);
}

// Strict numeric CSV: comma-separated, '.'-decimal, no missing cells.
inline Dataset load_csv(const std::string& path, const Manifest& manifest) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path);

  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && manifest.has_header) continue;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      ++col;
      if (cell.find_first_not_of(" \t\r") == std::string::npos) {
        std::ostringstream msg;
        msg << path << ": missing value at row " << lineno << ", col " << col;
        throw MissingValue(msg.str());
      }
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      // Allow trailing whitespace only.
      if (used == 0 || cell.find_first_not_of(" \t\r", used) != std::string::npos) {
        std::ostringstream msg;
        msg << path << ": non-numeric cell '" << cell << "' at row " << lineno
            << ", col " << col;
        throw ParseError(msg.str());
      }
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      std::ostringstream msg;
      msg << path << ": row " << lineno << " has " << row.size()
          << " columns, expected " << rows.front().size();
      throw ParseError(msg.str());
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(path + ": no data rows");

  const int total_cols = static_cast<int>(rows.front().size());
  if (manifest.target_col < 0 || manifest.target_col >= total_cols) {
    std::ostringstream msg;
    msg << path << ": target_col " << manifest.target_col << " out of range ("
        << total_cols << " columns)";
    throw ConfigError(msg.str());
  }

  Dataset ds;
  ds.name = manifest.name;
  ds.x = Matrix(static_cast<Index>(rows.size()), total_cols - 1);
  ds.y = Vector(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    int k = 0;
    for (int c = 0; c < total_cols; ++c) {
      if (c == manifest.target_col)
        ds.y(static_cast<Index>(i)) = rows[i][c];
      else
        ds.x(static_cast<Index>(i), k++) = rows[i][c];
    }
  }
  return ds;
}

// Per-feature population statistics computed from the training portion only.
// Constant columns keep std 1 so standardization is a no-op on them.
struct Standardizer {
  Vector x_mean, x_std;
  double y_mean = 0.0;
  double y_std = 1.0;

  static Standardizer fit(const Matrix& x, const Vector& y) {
    Standardizer s;
    const double n = static_cast<double>(x.rows());
    s.x_mean = x.colwise().mean();
    Vector var = (x.rowwise() - s.x_mean.transpose()).colwise().squaredNorm();
    s.x_std = (var / n).cwiseSqrt();
    for (Index j = 0; j < s.x_std.size(); ++j)
      if (s.x_std(j) <= 0.0) s.x_std(j) = 1.0;
    s.y_mean = y.mean();
    s.y_std = std::sqrt((y.array() - s.y_mean).square().sum() / n);
    if (s.y_std <= 0.0) s.y_std = 1.0;
    return s;
  }

  Matrix apply_x(const Matrix& x) const {
    return (x.rowwise() - x_mean.transpose()) * x_std.cwiseInverse().asDiagonal();
  }
  Matrix unapply_x(const Matrix& xs) const {
    return (xs * x_std.asDiagonal()).rowwise() + x_mean.transpose();
  }
  Vector apply_y(const Vector& y) const { return (y.array() - y_mean) / y_std; }
  Vector unapply_y(const Vector& ys) const { return ys.array() * y_std + y_mean; }

  // Change of variables: densities in original units lose log(std_y).
  double ll_to_original(double ll_standardized) const {
    return ll_standardized - std::log(y_std);
  }
};

// Seeded random splits with test size round(0.1 n).
inline std::vector<Split> standard_splits(Index n, int n_splits = 20,
                                          double test_fraction = 0.1,
                                          std::uint64_t seed = 0) {
  std::vector<Split> splits;
  splits.reserve(n_splits);
  const Index n_test = static_cast<Index>(std::llround(test_fraction * n));
  for (int s = 0; s < n_splits; ++s) {
    Rng rng(derive_seed(seed, {0x5b17ULL, static_cast<std::uint64_t>(s)}));
    std::vector<Index> perm(n);
    std::iota(perm.begin(), perm.end(), Index{0});
    rng.shuffle(perm);
    Split sp;
    sp.kind = SplitKind::Standard;
    sp.seed = seed;
    sp.test.assign(perm.begin(), perm.begin() + n_test);
    sp.train.assign(perm.begin() + n_test, perm.end());
    splits.push_back(std::move(sp));
  }
  return splits;
}

// One gap split per input dimension: rows sorted by that coordinate (stable,
// ties broken by row index), middle third held out as test.
inline std::vector<Split> gap_splits(const Matrix& x) {
  std::vector<Split> splits;
  const Index n = x.rows();
  for (Index j = 0; j < x.cols(); ++j) {
    std::vector<Index> order(n);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return x(a, j) < x(b, j); });
    const Index lo = n / 3;
    const Index hi = 2 * n / 3;
    Split sp;
    sp.kind = SplitKind::Gap;
    for (Index i = 0; i < n; ++i) {
      if (i >= lo && i < hi)
        sp.test.push_back(order[i]);
      else
        sp.train.push_back(order[i]);
    }
    splits.push_back(std::move(sp));
  }
  return splits;
}

// y = x^3 + eps, eps ~ N(0, 9), x uniform on [-4,-2] u [2,4];
// 100 train and 100 test pairs.
inline std::pair<Dataset, Dataset> toy_dataset(std::uint64_t seed) {
  auto make = [](Rng& rng, int n, const std::string& name) {
    Dataset ds;
    ds.name = name;
    ds.x = Matrix(n, 1);
    ds.y = Vector(n);
    for (int i = 0; i < n; ++i) {
      double x = rng.uniform(2.0, 4.0);
      if (rng.bernoulli(0.5)) x = -x;
      ds.x(i, 0) = x;
      ds.y(i) = x * x * x + 3.0 * rng.normal();
    }
    return ds;
  };
  Rng rng(derive_seed(seed, {0x70fULL}));
  Dataset train = make(rng, 100, "toy");
  Dataset test = make(rng, 100, "toy");
  return {std::move(train), std::move(test)};
}

inline Dataset subset(const Dataset& ds, const std::vector<Index>& rows) {
  Dataset out;
  out.name = ds.name;
  out.x = Matrix(static_cast<Index>(rows.size()), ds.x.cols());
  out.y = Vector(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.x.row(static_cast<Index>(i)) = ds.x.row(rows[i]);
    out.y(static_cast<Index>(i)) = ds.y(rows[i]);
  }
  return out;
}

}  // namespace nlb
