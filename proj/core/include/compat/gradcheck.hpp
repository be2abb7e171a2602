#pragma once

#include <string>
#include <vector>

#include "compat/component.hpp"

namespace compat {

// Double-precision reference kernels, written as plain nested loops with no
// code shared with the production ops. They define the mathematical function
// the tape differentiates; central differences on them give an essentially
// noise-free oracle for the f32 backward pass.
namespace refd {

struct DT {
  Shape shape;
  std::vector<double> data;
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
};

DT from_tensor(const Tensor& t);

DT conv3x3(const DT& x, const DT& k, int stride);
DT conv1x1(const DT& x, const DT& k, int stride);
DT depthwise3x3(const DT& x, const DT& k, int stride);
DT dense(const DT& x, const DT& w, const DT& b);
DT bias_channels(const DT& x, const DT& b);
DT relu(const DT& x);
DT add(const DT& a, const DT& b);
DT gap(const DT& x);
DT rotate90(const DT& x, int turns);
DT batchnorm_train(const DT& x, const DT& gamma, const DT& beta, double eps);
DT layernorm(const DT& x, const DT& gamma, const DT& beta, double eps);
DT instancenorm(const DT& x, const DT& gamma, const DT& beta, double eps);
DT l2_normalize(const DT& x);
double cross_entropy(const DT& logits, const std::vector<int>& labels,
                     const std::vector<float>* weights);
double unit_length(const DT& x);

// Double-precision mirror of composite_forward (train phase, batch stats)
// with one parameter optionally perturbed; returns the cross-entropy loss.
// When sign_hash is given it receives a hash of every ReLU input sign, so a
// caller can tell whether a finite-difference probe crossed a kink (where
// the central-difference estimator stops being valid).
double composite_loss(const CompositeNetwork& net, const DT& images,
                      const std::vector<int>& labels,
                      const Component* perturb_comp,
                      const std::string& perturb_name, int64_t perturb_index,
                      double delta, uint64_t* sign_hash = nullptr);

}  // namespace refd

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0;
  int64_t coords = 0;
  int64_t kink_refined = 0;  // probes re-run at smaller eps (kink in interval)
  int64_t skipped = 0;       // no kink-free probe found (not differentiable)
  int64_t near_zero = 0;     // both routes agree the gradient vanishes at f32 resolution
  bool pass = false;
};

// |a-b| / max(|a|,|b|,1e-6)
double rel_err(double a, double b);

// Finite-difference checks (central, eps 1e-3) for every differentiable
// operation and for full composites of all three families.
std::vector<GradCheckResult> run_gradient_checks(double tol = 1e-3,
                                                 uint64_t seed = 777);

}  // namespace compat
