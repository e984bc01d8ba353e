#pragma once

// Finite-difference validation of the loss gradients on small seeded
// problems: each loss against its φ inputs, and the total objective against
// every C and z entry.

#include <string>
#include <vector>

#include "metaper/encoders.hpp"
#include "metaper/numerics.hpp"
#include "metaper/personalization.hpp"

namespace metaper {

struct GradCheckProblem {
  ReferenceTextEncoder enc;
  PersonalizedModel model;
  std::vector<PromptTemplate> templates;
  AnchorMap anchors;
  std::vector<Vector> shots;
  std::vector<Vector> distractors;
  Batch batch;
  LossConfig loss;
};

/// Three instances over two categories, n_w = 2, six batch items, three
/// distractors and a random (non-identity) text projection.
inline GradCheckProblem make_gradcheck_problem(std::uint64_t seed, std::size_t d = 8, std::size_t q = 5) {
  RngStream rng = RngStream::derive(seed, "gradcheck");
  const std::vector<std::string> words{"an", "image", "of", "a", "can", "be", "seen", "in",
                                       "this", "photo", "there", "is", "dog", "cat"};
  auto table = TokenTable::random(words, d, 12, seed, 0.5, 0.1, splitmix64(seed) | 1);
  GradCheckProblem p{ReferenceTextEncoder(std::move(table)), {}, {}, {}, {}, {}, {}, {}};
  const std::vector<std::string> cats{"dog", "cat"};
  p.model.bank = CategoryFeatureBank(d, q, cats, BankMode::kPerCategory, seed, 0.5);
  for (const auto& c : cats) p.model.bank.ensure(c);
  const std::vector<std::pair<std::string, std::string>> instances{{"i0", "dog"}, {"i1", "dog"}, {"i2", "cat"}};
  for (const auto& [id, cat] : instances) {
    InstanceParams ip{cat, {rng.normal_vector(q, 0.5), rng.normal_vector(q, 0.5)}};
    p.model.instances.emplace(id, std::move(ip));
  }
  for (const auto& t : default_templates()) p.templates.push_back(PromptTemplate::parse(t, p.enc.table()));
  p.anchors = anchor_embeddings(cats, p.enc);
  for (int i = 0; i < 6; ++i) p.shots.push_back(rng.normal_vector(d, 1.0));
  for (int i = 0; i < 3; ++i) p.distractors.push_back(rng.normal_vector(d, 1.0));
  for (std::size_t i = 0; i < 6; ++i) {
    p.batch.items.push_back({instances[i / 2].first, &p.shots[i], rng.uniform_index(p.templates.size())});
  }
  for (const auto& v : p.distractors) p.batch.distractors.push_back(&v);
  return p;
}

struct GradCheckResult {
  std::uint64_t seed = 0;
  double loss_ll = 0.0;
  double loss_vl = 0.0;
  double loss_cat = 0.0;
  double total = 0.0;

  double worst() const { return std::max({loss_ll, loss_vl, loss_cat, total}); }
};

namespace detail {

inline Vector flatten(const std::vector<Vector>& vs) {
  Vector out;
  for (const auto& v : vs) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline std::vector<Vector> unflatten(std::span<const double> flat, std::size_t n, std::size_t d) {
  std::vector<Vector> out(n, Vector(d));
  for (std::size_t i = 0; i < n; ++i) std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(i * d), d, out[i].begin());
  return out;
}

}  // namespace detail

inline GradCheckResult run_gradcheck(std::uint64_t seed, const GradCheckOptions& opts = {}) {
  auto p = make_gradcheck_problem(seed);
  GradCheckResult r;
  r.seed = seed;
  const std::size_t d = p.enc.dim();
  RngStream rng = RngStream::derive(seed, "gradcheck-phi");
  std::vector<Vector> phis;
  for (int i = 0; i < 6; ++i) phis.push_back(rng.normal_vector(d, 1.0));
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  std::vector<const Vector*> shot_ptrs;
  for (const auto& s : p.shots) shot_ptrs.push_back(&s);
  std::vector<const Vector*> anchor_ptrs;
  for (int i = 0; i < 6; ++i) anchor_ptrs.push_back(&p.anchors.at(i < 4 ? "dog" : "cat"));
  const auto flat_phi = detail::flatten(phis);

  r.loss_ll = finite_diff_check(
      [&](std::span<const double> x) { return loss_ll(labels, detail::unflatten(x, 6, d), p.loss.lambda).value; },
      flat_phi, detail::flatten(loss_ll(labels, phis, p.loss.lambda).grad), opts);
  r.loss_vl = finite_diff_check(
      [&](std::span<const double> x) {
        return loss_vl(labels, detail::unflatten(x, 6, d), shot_ptrs, p.batch.distractors, p.loss.lambda).value;
      },
      flat_phi, detail::flatten(loss_vl(labels, phis, shot_ptrs, p.batch.distractors, p.loss.lambda).grad), opts);
  r.loss_cat = finite_diff_check(
      [&](std::span<const double> x) { return loss_cat(detail::unflatten(x, 6, d), anchor_ptrs).value; }, flat_phi,
      detail::flatten(loss_cat(phis, anchor_ptrs).grad), opts);

  ModelGradients grads;
  total_loss(p.batch, p.model, p.enc, p.templates, p.anchors, p.loss, &grads);
  const auto params = flatten_parameters(p.model);
  const auto analytic = flatten_gradients(p.model, grads);
  PersonalizedModel probe = p.model;
  r.total = finite_diff_check(
      [&](std::span<const double> x) {
        assign_parameters(probe, x);
        return total_loss(p.batch, probe, p.enc, p.templates, p.anchors, p.loss).total;
      },
      params, analytic, opts);
  return r;
}

}  // namespace metaper
