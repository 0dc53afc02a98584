#include "evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace mmsim {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);  // average 0-based rank
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    fail(Status::Shape, "spearman: length mismatch " + std::to_string(x.size()) + " vs " +
                            std::to_string(y.size()));
  if (x.size() < 2) fail(Status::Invalid, "spearman: need at least 2 points");

  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double a = rx[i] - mx;
    const double b = ry[i] - my;
    num += a * b;
    dx += a * a;
    dy += b * b;
  }
  if (dx == 0.0 || dy == 0.0)
    fail(Status::Invalid, "spearman: constant input vector (zero rank variance)");
  return num / std::sqrt(dx * dy);
}

double mse(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size())
    fail(Status::Shape, "mse: length mismatch " + std::to_string(pred.size()) + " vs " +
                            std::to_string(target.size()));
  if (pred.empty()) fail(Status::Invalid, "mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

FoldSplit fold_split(const std::vector<PairLabel>& pairs, const FoldSpec& spec) {
  if (spec.n_folds < 2) fail(Status::Invalid, "fold_split: n_folds must be >= 2");
  if (spec.fold_index >= spec.n_folds)
    fail(Status::Invalid, "fold_split: fold_index " + std::to_string(spec.fold_index) +
                              " out of range for " + std::to_string(spec.n_folds) + " folds");
  FoldSplit out;
  const std::uint64_t n = spec.n_folds;
  const std::uint64_t i = spec.fold_index;
  for (const auto& p : pairs) {
    const std::uint64_t r1 = p.vid1 % n;
    const std::uint64_t r2 = p.vid2 % n;
    if (r1 != i && r2 != i)
      out.train.push_back(p);
    else if (r1 == i && r2 == i)
      out.valid.push_back(p);
    // mixed residues fall in neither set for this fold
  }
  return out;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    fail(Status::Shape, "cosine: length mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) fail(Status::Numeric, "cosine: zero-norm vector");
  return dot / std::sqrt(na * nb);
}

PairMetrics evaluate_pairs(const std::vector<PairLabel>& pairs, const EmbedFn& embed) {
  if (pairs.empty()) fail(Status::Invalid, "evaluate: empty pair list");
  std::unordered_map<std::uint64_t, std::vector<double>> cache;
  auto lookup = [&](std::uint64_t vid) -> const std::vector<double>& {
    auto it = cache.find(vid);
    if (it == cache.end()) it = cache.emplace(vid, embed(vid)).first;
    return it->second;
  };
  std::vector<double> sims, labels;
  sims.reserve(pairs.size());
  labels.reserve(pairs.size());
  for (const auto& p : pairs) {
    sims.push_back(cosine_similarity(lookup(p.vid1), lookup(p.vid2)));
    labels.push_back(p.score);
  }
  return {spearman(sims, labels), mse(sims, labels)};
}

MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) fail(Status::Invalid, "mean_std: empty input");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  var /= static_cast<double>(v.size());
  return {m, std::sqrt(var)};
}

std::string format_fold_report(const std::vector<PairMetrics>& per_fold) {
  char buf[160];
  std::ostringstream os;
  os << "# fold\tspearman\tmse\n";
  std::vector<double> ss, ms;
  for (std::size_t i = 0; i < per_fold.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.17g\t%.17g\n", i, per_fold[i].spearman_rho,
                  per_fold[i].mse_value);
    os << buf;
    ss.push_back(per_fold[i].spearman_rho);
    ms.push_back(per_fold[i].mse_value);
  }
  const MeanStd s = mean_std(ss);
  const MeanStd m = mean_std(ms);
  std::snprintf(buf, sizeof(buf), "mean\t%.17g\t%.17g\nstd\t%.17g\t%.17g\n", s.mean, m.mean,
                s.stddev, m.stddev);
  os << buf;
  std::snprintf(buf, sizeof(buf), "# spearman %.4f +/- %.4f, mse %.4f +/- %.4f\n", s.mean,
                s.stddev, m.mean, m.stddev);
  os << buf;
  return os.str();
}

}  // namespace mmsim
