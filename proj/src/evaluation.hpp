#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "data.hpp"

namespace mmsim {

/// Tie-averaged 0-based ranks (fractional for ties).
std::vector<double> average_ranks(const std::vector<double>& v);

/// Spearman rank correlation with average ranks for ties. Errors on length
/// mismatch, fewer than 2 points, or a constant input (zero denominator).
double spearman(const std::vector<double>& x, const std::vector<double>& y);

double mse(const std::vector<double>& pred, const std::vector<double>& target);

struct FoldSpec {
  std::size_t n_folds = 5;
  std::size_t fold_index = 0;
};

struct FoldSplit {
  std::vector<PairLabel> train;
  std::vector<PairLabel> valid;
};

/// Residue split by video id: train pairs touch fold residue on neither side,
/// valid pairs on both. Mixed-residue pairs belong to neither set.
FoldSplit fold_split(const std::vector<PairLabel>& pairs, const FoldSpec& spec);

struct PairMetrics {
  double spearman_rho = 0.0;
  double mse_value = 0.0;
};

using EmbedFn = std::function<std::vector<double>(std::uint64_t vid)>;

/// Embeds each unique vid once, scores every pair by cosine, and computes
/// both metrics against the pair labels.
PairMetrics evaluate_pairs(const std::vector<PairLabel>& pairs, const EmbedFn& embed);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

MeanStd mean_std(const std::vector<double>& v);

/// Machine-readable "fold<TAB>spearman<TAB>mse" lines plus a mean +/- std
/// summary, with a commented header so the file doubles as a text table.
std::string format_fold_report(const std::vector<PairMetrics>& per_fold);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace mmsim
