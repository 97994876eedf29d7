#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pefnet/params.hpp"

/// Central finite-difference verification of analytic gradients, run in 64-bit.
namespace pefnet::gradcheck {

struct Options {
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Upper bound on checked scalars; 0 checks every trainable element.
  std::size_t max_samples = 0;
  std::uint64_t seed = 0;
};

struct Result {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  /// Name and flat index of the element with the largest error.
  std::string worst;

  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

/// |a - fd| / max(|a|, |fd|, 1e-6).
double relative_error(double analytic, double numeric);

/// A scalar function of the tensors in a store. Trainable entries are the
/// variables; the function pulls them through the binding.
using ScalarFn = std::function<Var<double>(Binding<double>&)>;

/// Compares d f / d p from one backward pass against
/// (f(p + h) - f(p - h)) / 2h for the trainable elements of `store`.
Result check(std::string name, const ScalarFn& f, BasicParameterStore<double> store, ops::Mode mode,
             const Options& options);

/// sum(y * r) for a fixed pseudo-random r of y's shape, so every output
/// element contributes a distinct weight to the scalar.
Var<double> project(const Var<double>& y);

/// Every differentiable op and composite block on random tensors with extents
/// of at most 5, tolerance 1e-4.
std::vector<Result> op_suite(std::uint64_t seed);

/// Jaccard loss of the Toy network (widths 8, 16, 32, 64) on one 3x32x32
/// input, checked on `samples` randomly chosen parameters at tolerance 1e-3.
Result network_check(std::uint64_t seed, std::size_t samples);

struct Report {
  std::vector<Result> results;
  double seconds = 0.0;

  bool passed() const;
  /// One line per check plus a summary line.
  std::string to_text() const;
};

/// The full suite. `quick` checks fewer network parameters (200 instead of 500).
Report run(bool quick, std::uint64_t seed = 0);

}  // namespace pefnet::gradcheck
