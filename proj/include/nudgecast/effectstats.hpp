#pragma once

#include <span>

#include "nudgecast/corpus.hpp"

// Standardized effect-size conversions. The r <-> d pair is the
// point-biserial relation for equal group sizes:
//   d = 2r / sqrt(1 - r^2),   r = d / sqrt(d^2 + 4)
namespace nudgecast::effectstats {

/// Throws ValidationError when |r| >= 1 or r is not finite.
double d_from_r(double r);

/// Total on finite input; result lies in (-1, 1).
double r_from_d(double d);

/// Cohen's d with pooled standard deviation
///   s_p = sqrt(((n1-1)s1^2 + (n2-1)s2^2) / (n1+n2-2)).
/// Throws ValidationError if s1/s2 <= 0, n1/n2 < 2, or s_p == 0.
double d_from_means(const TwoGroupMeans& raw);

/// Cohen's d for any RawStats variant.
double d_from_raw(const RawStats& raw);

/// Predicts the modal training direction for every item, with the mean
/// absolute training r and d as magnitudes.
struct NaiveBaseline {
    Direction modal_direction = Direction::negative;
    double mean_abs_r = 0;
    double mean_abs_d = 0;
};

/// Ties in the direction count resolve to negative.
/// Throws ValidationError on an empty slice.
NaiveBaseline naive_baseline(std::span<const Entry> train);

}  // namespace nudgecast::effectstats
