#pragma once

#include <map>
#include <string>
#include <vector>

#include "tp/program.hpp"

// Common dimension classes: the finest partition of G-vars compatible with
// the line-type constraints, the user constraint set Lambda, and the DSL
// class-label hints.  A-vars carry a (rows, cols) pair of classes; classes
// referenced only by an unused A-var side may be empty.

namespace tp {

struct CdcPartition {
  // class_of[l] is the class of G-var line l (1-based; -1 for non-G lines).
  std::vector<int> class_of;
  std::vector<std::vector<int>> classes;            // class id -> sorted G lines
  std::map<int, std::pair<int, int>> matrix_sides;  // A line -> (rows, cols)
  std::map<int, int> hvar_class;                    // H line -> class id
  std::vector<std::string> class_label;             // class id -> label or ""

  int num_classes() const { return static_cast<int>(classes.size()); }
  int g_class(int line) const { return class_of.at(static_cast<size_t>(line)); }
  // Class of any vector var (G or H).
  int vec_class(int line) const;
  // All vector vars (G and H) whose class is cls, in line order.
  std::vector<int> closure(int cls) const;
};

CdcPartition compute_cdc(const Skeleton& sk, const DimConstraints& lam = {});

// Width-ratio alpha_{c1,c2} = lim n(c1)/n(c2), taken from per-label scales.
double alpha_ratio(const CdcPartition& cdc, const SamplingSpec& spec, int c1,
                   int c2);

// Concrete per-class widths: label width if given, else round(base * scale).
std::vector<long> resolve_widths(const CdcPartition& cdc,
                                 const SamplingSpec& spec, long base);

}  // namespace tp
