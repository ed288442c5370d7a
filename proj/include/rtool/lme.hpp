#pragma once

// Linear mixed-effects regression fitted by maximum likelihood.
//
//   y = X beta + Z b + eps,   b = Lambda(theta) u,   u ~ N(0, sigma^2 I),   eps ~ N(0, sigma^2 I)
//
// Lambda is diagonal: one relative standard deviation theta_j per (grouping factor, column)
// block. For fixed theta, beta and u solve the penalized least-squares problem
//   min ||y - X beta - Z Lambda u||^2 + ||u||^2
// through a sparse LDL' factorization of Lambda Z'Z Lambda + I, and sigma^2 and beta are
// profiled out of the likelihood, leaving the profiled deviance
//   d(theta) = log|Lambda Z'Z Lambda + I| + n (1 + log(2 pi r^2(theta) / n)).
// theta is then optimized over theta >= 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <boost/math/tools/minima.hpp>
#include <nlohmann/json.hpp>

#include "rtool/error.hpp"
#include "rtool/text.hpp"

namespace rtool::lme {

inline constexpr std::string_view kIntercept = "(Intercept)";

// --- predictors --------------------------------------------------------------------------

struct PredictorMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // n_obs x p
  /// Raw-scale centering means and scaling sds; empty until standardized.
  Eigen::VectorXd means;
  Eigen::VectorXd sds;

  bool standardized() const { return means.size() == values.cols() && values.cols() > 0; }

  std::optional<Eigen::Index> find(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<Eigen::Index>(i);
    return std::nullopt;
  }

  Eigen::Index index_of(std::string_view name) const {
    auto i = find(name);
    if (!i) throw ValidationError("missing predictor column '" + std::string(name) + "'");
    return *i;
  }
};

/// Centers each column to mean 0 and scales to population sd 1. Standardizing an already
/// standardized matrix composes the transforms so `means`/`sds` always refer to raw data.
inline PredictorMatrix standardize(const PredictorMatrix& m) {
  const auto n = m.values.rows();
  if (n == 0) throw ValidationError("standardize: no rows");
  PredictorMatrix out = m;
  out.means.resize(m.values.cols());
  out.sds.resize(m.values.cols());
  for (Eigen::Index j = 0; j < m.values.cols(); ++j) {
    const double mean = m.values.col(j).mean();
    const double sd = std::sqrt((m.values.col(j).array() - mean).square().mean());
    if (!(sd > 1e-12 * std::max(1.0, std::fabs(mean))))
      throw ValidationError("standardize: column '" + m.names[static_cast<std::size_t>(j)] + "' is constant");
    out.values.col(j) = (m.values.col(j).array() - mean) / sd;
    if (m.standardized()) {
      out.means(j) = m.means(j) + m.sds(j) * mean;
      out.sds(j) = m.sds(j) * sd;
    } else {
      out.means(j) = mean;
      out.sds(j) = sd;
    }
  }
  return out;
}

/// Applies the fitting set's transform to raw data with the same named columns.
inline PredictorMatrix apply_standardization(const PredictorMatrix& fitted, const PredictorMatrix& raw) {
  if (!fitted.standardized()) throw ValidationError("apply_standardization: reference is not standardized");
  PredictorMatrix out;
  out.names = fitted.names;
  out.means = fitted.means;
  out.sds = fitted.sds;
  out.values.resize(raw.values.rows(), static_cast<Eigen::Index>(fitted.names.size()));
  for (std::size_t j = 0; j < fitted.names.size(); ++j) {
    auto src = raw.index_of(fitted.names[j]);
    const auto jj = static_cast<Eigen::Index>(j);
    out.values.col(jj) = (raw.values.col(src).array() - fitted.means(jj)) / fitted.sds(jj);
  }
  return out;
}

// --- model specification ----------------------------------------------------------------

enum class GroupingFactor { subject, word_type, sentence, subject_sentence };

inline std::string_view to_string(GroupingFactor f) {
  switch (f) {
    case GroupingFactor::subject: return "subject";
    case GroupingFactor::word_type: return "word_type";
    case GroupingFactor::sentence: return "sentence";
    case GroupingFactor::subject_sentence: return "subject_sentence";
  }
  return "";
}

inline GroupingFactor parse_grouping_factor(std::string_view s) {
  if (s == "subject") return GroupingFactor::subject;
  if (s == "word_type") return GroupingFactor::word_type;
  if (s == "sentence") return GroupingFactor::sentence;
  if (s == "subject_sentence") return GroupingFactor::subject_sentence;
  throw ValidationError("unknown grouping factor '" + std::string(s) + "'");
}

/// Random intercept and/or uncorrelated random slopes for one grouping factor.
struct RandomTerm {
  GroupingFactor factor = GroupingFactor::subject;
  bool intercept = true;
  std::vector<std::string> slopes;
};

struct ModelSpec {
  std::vector<std::string> fixed;
  std::vector<RandomTerm> random;
  /// When false, the intercept of any word_type term is dropped.
  bool include_word_intercept = true;

  nlohmann::json to_json() const {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& t : random)
      r.push_back({{"factor", std::string(to_string(t.factor))}, {"intercept", t.intercept}, {"slopes", t.slopes}});
    return {{"fixed", fixed}, {"random", r}, {"include_word_intercept", include_word_intercept}};
  }

  std::string fingerprint() const { return text::fingerprint(to_json().dump()); }
};

/// Per-observation level keys for each grouping factor.
using FactorColumns = std::map<GroupingFactor, std::vector<std::int64_t>>;

struct LmeData {
  PredictorMatrix predictors;
  Eigen::VectorXd response;
  FactorColumns factors;

  Eigen::Index n_obs() const { return response.size(); }

  std::string fingerprint() const {
    text::Fnv1a h;
    h.update(static_cast<std::int64_t>(response.size()));
    for (Eigen::Index i = 0; i < response.size(); ++i) h.update(response(i));
    for (const auto& [f, keys] : factors) {
      h.update(to_string(f));
      for (auto k : keys) h.update(k);
    }
    return h.hex();
  }
};

struct FitOptions {
  int max_evaluations = 50000;
  /// A full coordinate cycle improving the deviance by less than this ends the search.
  double tolerance = 1e-8;
  std::vector<double> starts = {0.1, 1.0};
};

// --- fitted model -----------------------------------------------------------------------

struct RandomEffectBlock {
  GroupingFactor factor = GroupingFactor::subject;
  std::string column;  // kIntercept or a predictor name
  double theta = 0;
  std::vector<std::int64_t> levels;  // sorted keys
  std::vector<double> modes;         // conditional modes b = theta * u, response scale

  /// Conditional mode for a level; unseen levels contribute nothing.
  double mode_of(std::int64_t key) const {
    auto it = std::lower_bound(levels.begin(), levels.end(), key);
    if (it == levels.end() || *it != key) return 0.0;
    return modes[static_cast<std::size_t>(it - levels.begin())];
  }

  std::string label() const { return std::string(to_string(factor)) + ":" + column; }
};

struct FittedModel {
  std::vector<std::string> fixed_names;  // kIntercept first
  Eigen::VectorXd beta;
  std::vector<RandomEffectBlock> blocks;
  double sigma2 = 0;
  double loglik_nats = 0;
  double deviance = 0;
  bool converged = true;
  std::size_t n_obs = 0;
  int evaluations = 0;
  std::string spec_fingerprint;
  std::string data_fingerprint;
  /// Deviance after every accepted optimizer step, in order.
  std::vector<double> deviance_trace;

  Eigen::VectorXd theta() const {
    Eigen::VectorXd t(static_cast<Eigen::Index>(blocks.size()));
    for (std::size_t j = 0; j < blocks.size(); ++j) t(static_cast<Eigen::Index>(j)) = blocks[j].theta;
    return t;
  }

  double coefficient(std::string_view name) const {
    for (std::size_t i = 0; i < fixed_names.size(); ++i)
      if (fixed_names[i] == name) return beta(static_cast<Eigen::Index>(i));
    throw ValidationError("no fixed effect named '" + std::string(name) + "'");
  }

  nlohmann::json to_json(bool with_modes = true) const {
    nlohmann::json coef = nlohmann::json::object();
    for (std::size_t i = 0; i < fixed_names.size(); ++i) coef[fixed_names[i]] = beta(static_cast<Eigen::Index>(i));
    nlohmann::json th = nlohmann::json::array();
    for (const auto& b : blocks) {
      nlohmann::json e = {{"factor", std::string(to_string(b.factor))}, {"column", b.column}, {"theta", b.theta}};
      if (with_modes) {
        e["levels"] = b.levels;
        e["modes"] = b.modes;
      }
      th.push_back(std::move(e));
    }
    return {{"fixed_names", fixed_names},
            {"coefficients", coef},
            {"theta", th},
            {"sigma2", sigma2},
            {"loglik", loglik_nats},
            {"deviance", deviance},
            {"converged", converged},
            {"n_obs", n_obs},
            {"evaluations", evaluations},
            {"spec_fingerprint", spec_fingerprint},
            {"data_fingerprint", data_fingerprint}};
  }

  static FittedModel from_json(const nlohmann::json& j) {
    FittedModel m;
    m.fixed_names = j.at("fixed_names").get<std::vector<std::string>>();
    m.beta.resize(static_cast<Eigen::Index>(m.fixed_names.size()));
    for (std::size_t i = 0; i < m.fixed_names.size(); ++i)
      m.beta(static_cast<Eigen::Index>(i)) = j.at("coefficients").at(m.fixed_names[i]).get<double>();
    for (const auto& e : j.at("theta")) {
      RandomEffectBlock b;
      b.factor = parse_grouping_factor(e.at("factor").get<std::string>());
      b.column = e.at("column").get<std::string>();
      b.theta = e.at("theta").get<double>();
      if (e.contains("levels")) {
        b.levels = e.at("levels").get<std::vector<std::int64_t>>();
        b.modes = e.at("modes").get<std::vector<double>>();
      }
      m.blocks.push_back(std::move(b));
    }
    m.sigma2 = j.at("sigma2").get<double>();
    m.loglik_nats = j.at("loglik").get<double>();
    m.deviance = j.at("deviance").get<double>();
    m.converged = j.at("converged").get<bool>();
    m.n_obs = j.at("n_obs").get<std::size_t>();
    m.evaluations = j.at("evaluations").get<int>();
    m.spec_fingerprint = j.at("spec_fingerprint").get<std::string>();
    m.data_fingerprint = j.at("data_fingerprint").get<std::string>();
    return m;
  }
};

// --- penalized least squares ------------------------------------------------------------

/// Result of solving the penalized least-squares problem at one theta.
struct PlsSolution {
  double deviance = 0;
  double pwrss = 0;  // penalized residual sum of squares r^2
  double logdet = 0; // log|Lambda Z'Z Lambda + I|
  Eigen::VectorXd beta;
  Eigen::VectorXd u;
};

/// The fixed structure of one fit: design, random-effect blocks, and cross products that
/// do not depend on theta.
class LmeProblem {
 public:
  LmeProblem(const LmeData& data, const ModelSpec& spec) : y_(data.response) {
    n_ = data.n_obs();
    if (data.predictors.values.rows() != n_)
      throw ValidationError("predictor rows do not match response length");

    for (const auto& t : spec.random)
      for (const auto& s : t.slopes)
        if (std::find(spec.fixed.begin(), spec.fixed.end(), s) == spec.fixed.end())
          throw ValidationError("random slope '" + s + "' is not among the fixed effects");

    fixed_names_.emplace_back(kIntercept);
    for (const auto& f : spec.fixed) fixed_names_.push_back(f);
    const auto p = static_cast<Eigen::Index>(fixed_names_.size());
    if (n_ <= p) throw ValidationError("need more observations than fixed effects");
    X_.resize(n_, p);
    X_.col(0).setOnes();
    for (Eigen::Index j = 1; j < p; ++j)
      X_.col(j) = data.predictors.values.col(data.predictors.index_of(fixed_names_[static_cast<std::size_t>(j)]));
    check_rank();

    for (const auto& t : spec.random) {
      auto fit = data.factors.find(t.factor);
      if (fit == data.factors.end())
        throw ValidationError("data lacks grouping factor '" + std::string(to_string(t.factor)) + "'");
      const auto& keys = fit->second;
      if (static_cast<Eigen::Index>(keys.size()) != n_)
        throw ValidationError("grouping factor '" + std::string(to_string(t.factor)) + "' has wrong length");
      std::vector<std::string> cols;
      if (t.intercept && !(t.factor == GroupingFactor::word_type && !spec.include_word_intercept))
        cols.emplace_back(kIntercept);
      for (const auto& s : t.slopes) cols.push_back(s);
      if (cols.empty()) continue;

      std::vector<std::int64_t> levels(keys);
      std::sort(levels.begin(), levels.end());
      levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
      std::unordered_map<std::int64_t, int> dense;
      for (std::size_t i = 0; i < levels.size(); ++i) dense.emplace(levels[i], static_cast<int>(i));
      std::vector<int> idx(keys.size());
      for (std::size_t i = 0; i < keys.size(); ++i) idx[i] = dense.at(keys[i]);

      for (const auto& c : cols) {
        Block b;
        b.factor = t.factor;
        b.column = c;
        b.levels = levels;
        b.level_of = idx;
        b.offset = q_;
        if (c != kIntercept) b.x = data.predictors.values.col(data.predictors.index_of(c));
        q_ += static_cast<Eigen::Index>(levels.size());
        blocks_.push_back(std::move(b));
      }
    }
    precompute();
  }

  Eigen::Index n_obs() const { return n_; }
  Eigen::Index n_fixed() const { return X_.cols(); }
  Eigen::Index n_random() const { return q_; }
  std::size_t n_theta() const { return blocks_.size(); }
  const std::vector<std::string>& fixed_names() const { return fixed_names_; }

  /// Solves the penalized least-squares problem at theta and returns the profiled deviance.
  PlsSolution solve(const Eigen::VectorXd& theta) {
    PlsSolution s;
    const auto p = X_.cols();
    if (q_ == 0) {
      s.beta = XtX_.llt().solve(Xty_);
      s.u.resize(0);
      s.pwrss = (y_ - X_ * s.beta).squaredNorm();
      s.logdet = 0;
    } else {
      Eigen::VectorXd lambda(q_);
      for (std::size_t j = 0; j < blocks_.size(); ++j)
        lambda.segment(blocks_[j].offset, static_cast<Eigen::Index>(blocks_[j].levels.size()))
            .setConstant(theta(static_cast<Eigen::Index>(j)));
      double* vals = A_.valuePtr();
      for (std::size_t k = 0; k < nz_row_.size(); ++k) {
        const int r = nz_row_[k], c = nz_col_[k];
        vals[k] = lambda(r) * lambda(c) * ZtZ_vals_[k] + (r == c ? 1.0 : 0.0);
      }
      ldlt_.factorize(A_);
      if (ldlt_.info() != Eigen::Success) throw Error("sparse factorization failed");
      Eigen::MatrixXd rhs(q_, p + 1);
      rhs.leftCols(p) = lambda.asDiagonal() * ZtX_;
      rhs.col(p) = lambda.cwiseProduct(Zty_);
      Eigen::MatrixXd W = ldlt_.solve(rhs);
      const Eigen::MatrixXd M = XtX_ - rhs.leftCols(p).transpose() * W.leftCols(p);
      const Eigen::VectorXd r = Xty_ - rhs.leftCols(p).transpose() * W.col(p);
      s.beta = M.llt().solve(r);
      s.u = W.col(p) - W.leftCols(p) * s.beta;
      Eigen::VectorXd fitted = X_ * s.beta;
      for (std::size_t j = 0; j < blocks_.size(); ++j) {
        const auto& b = blocks_[j];
        const double th = theta(static_cast<Eigen::Index>(j));
        for (Eigen::Index i = 0; i < n_; ++i) {
          const double z = b.x.size() ? b.x(i) : 1.0;
          fitted(i) += th * z * s.u(b.offset + b.level_of[static_cast<std::size_t>(i)]);
        }
      }
      s.pwrss = (y_ - fitted).squaredNorm() + s.u.squaredNorm();
      s.logdet = ldlt_.vectorD().array().log().sum();
    }
    const double n = static_cast<double>(n_);
    s.deviance = s.logdet + n * (1.0 + std::log(2.0 * std::numbers::pi * s.pwrss / n));
    return s;
  }

  double deviance(const Eigen::VectorXd& theta) { return solve(theta).deviance; }

  /// Packs a solution into a FittedModel (conditional modes b = theta * u).
  FittedModel package(const Eigen::VectorXd& theta, const PlsSolution& s) const {
    FittedModel m;
    m.fixed_names = fixed_names_;
    m.beta = s.beta;
    m.n_obs = static_cast<std::size_t>(n_);
    m.sigma2 = s.pwrss / static_cast<double>(n_);
    m.deviance = s.deviance;
    m.loglik_nats = -0.5 * s.deviance;
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      const auto& b = blocks_[j];
      RandomEffectBlock rb;
      rb.factor = b.factor;
      rb.column = b.column;
      rb.theta = theta(static_cast<Eigen::Index>(j));
      rb.levels = b.levels;
      rb.modes.resize(b.levels.size());
      for (std::size_t l = 0; l < b.levels.size(); ++l)
        rb.modes[l] = rb.theta * s.u(b.offset + static_cast<Eigen::Index>(l));
      m.blocks.push_back(std::move(rb));
    }
    return m;
  }

 private:
  struct Block {
    GroupingFactor factor{};
    std::string column;
    std::vector<std::int64_t> levels;
    std::vector<int> level_of;
    Eigen::Index offset = 0;
    Eigen::VectorXd x;  // empty for intercept columns
  };

  void check_rank() const {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X_);
    qr.setThreshold(1e-10);
    if (qr.rank() == X_.cols()) return;
    std::vector<std::string> bad;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < X_.cols(); ++k) bad.push_back(fixed_names_[static_cast<std::size_t>(perm(k))]);
    std::sort(bad.begin(), bad.end());
    throw RankDeficientError(std::move(bad));
  }

  void precompute() {
    XtX_ = X_.transpose() * X_;
    Xty_ = X_.transpose() * y_;
    if (q_ == 0) return;
    const auto p = X_.cols();
    ZtX_ = Eigen::MatrixXd::Zero(q_, p);
    Zty_ = Eigen::VectorXd::Zero(q_);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(n_) * blocks_.size() * (blocks_.size() + 1) / 2 +
                 static_cast<std::size_t>(q_));
    for (Eigen::Index c = 0; c < q_; ++c) trip.emplace_back(static_cast<int>(c), static_cast<int>(c), 0.0);
    std::vector<int> col(blocks_.size());
    std::vector<double> val(blocks_.size());
    for (Eigen::Index i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < blocks_.size(); ++j) {
        const auto& b = blocks_[j];
        col[j] = static_cast<int>(b.offset + b.level_of[static_cast<std::size_t>(i)]);
        val[j] = b.x.size() ? b.x(i) : 1.0;
        ZtX_.row(col[j]) += val[j] * X_.row(i);
        Zty_(col[j]) += val[j] * y_(i);
      }
      for (std::size_t a = 0; a < blocks_.size(); ++a)
        for (std::size_t b = 0; b < blocks_.size(); ++b)
          if (col[a] >= col[b]) trip.emplace_back(col[a], col[b], val[a] * val[b]);
    }
    A_.resize(q_, q_);
    A_.setFromTriplets(trip.begin(), trip.end());
    A_.makeCompressed();
    for (int c = 0; c < A_.outerSize(); ++c)
      for (Eigen::SparseMatrix<double>::InnerIterator it(A_, c); it; ++it) {
        nz_row_.push_back(static_cast<int>(it.row()));
        nz_col_.push_back(static_cast<int>(it.col()));
        ZtZ_vals_.push_back(it.value());
      }
    ldlt_.analyzePattern(A_);
  }

  Eigen::Index n_ = 0;
  Eigen::Index q_ = 0;
  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  std::vector<std::string> fixed_names_;
  std::vector<Block> blocks_;
  Eigen::MatrixXd XtX_;
  Eigen::VectorXd Xty_;
  Eigen::MatrixXd ZtX_;
  Eigen::VectorXd Zty_;
  Eigen::SparseMatrix<double> A_;  // lower triangle of Lambda Z'Z Lambda + I
  std::vector<int> nz_row_, nz_col_;
  std::vector<double> ZtZ_vals_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower> ldlt_;
};

// --- optimizer ---------------------------------------------------------------------------

struct SearchResult {
  Eigen::VectorXd theta;
  double deviance = 0;
  int evaluations = 0;
  bool converged = true;
  std::vector<double> trace;
};

namespace detail {

inline constexpr double kLogThetaMin = -18.420680743952367;  // log(1e-8)
inline constexpr double kLogThetaMax = 9.2103403719761836;   // log(1e4)

/// Cyclic coordinate search over log(theta_j), each coordinate minimized by Brent's method on a
/// bracket that widens while the minimum sits on its edge; theta_j = 0 is tried explicitly.
/// Steps are accepted only when they lower the deviance.
template <class Objective>
SearchResult coordinate_search(Objective&& f, Eigen::VectorXd theta, const FitOptions& opts) {
  SearchResult r;
  auto eval = [&](const Eigen::VectorXd& t) {
    ++r.evaluations;
    return f(t);
  };
  double best = eval(theta);
  r.trace.push_back(best);
  r.converged = false;
  const auto m = theta.size();
  while (r.evaluations < opts.max_evaluations) {
    const double cycle_start = best;
    for (Eigen::Index j = 0; j < m && r.evaluations < opts.max_evaluations; ++j) {
      Eigen::VectorXd trial = theta;
      auto along = [&](double s) {
        trial(j) = std::exp(s);
        return eval(trial);
      };
      double lo, hi;
      if (theta(j) > 0) {
        const double s0 = std::log(theta(j));
        lo = std::max(kLogThetaMin, s0 - 3.0);
        hi = std::min(kLogThetaMax, s0 + 3.0);
      } else {
        lo = kLogThetaMin;
        hi = kLogThetaMax;
      }
      std::pair<double, double> opt;
      for (int widen = 0;; ++widen) {
        boost::uintmax_t iters = 200;
        opt = boost::math::tools::brent_find_minima(along, lo, hi, std::numeric_limits<double>::digits / 2, iters);
        const bool at_lo = opt.first - lo < 1e-3 && lo > kLogThetaMin;
        const bool at_hi = hi - opt.first < 1e-3 && hi < kLogThetaMax;
        if ((!at_lo && !at_hi) || widen >= 6) break;
        if (at_lo) lo = std::max(kLogThetaMin, lo - 6.0);
        if (at_hi) hi = std::min(kLogThetaMax, hi + 6.0);
      }
      double cand_theta = std::exp(opt.first);
      double cand = opt.second;
      trial(j) = 0.0;
      const double at_zero = eval(trial);
      if (at_zero <= cand) {
        cand = at_zero;
        cand_theta = 0.0;
      }
      if (cand < best) {
        best = cand;
        theta(j) = cand_theta;
        r.trace.push_back(best);
      }
    }
    if (cycle_start - best < opts.tolerance) {
      r.converged = true;
      break;
    }
  }
  r.theta = theta;
  r.deviance = best;
  return r;
}

}  // namespace detail

/// Maximum-likelihood fit. Throws RankDeficientError for collinear fixed effects; a search
/// that exhausts its evaluation budget returns with converged = false.
inline FittedModel fit(const LmeData& data, const ModelSpec& spec, const FitOptions& opts = {}) {
  LmeProblem problem(data, spec);
  Eigen::VectorXd theta;
  int evaluations = 0;
  bool converged = true;
  std::vector<double> trace;
  if (problem.n_theta() == 0) {
    theta.resize(0);
  } else {
    std::optional<SearchResult> best;
    for (double start : opts.starts) {
      auto r = detail::coordinate_search([&](const Eigen::VectorXd& t) { return problem.deviance(t); },
                                         Eigen::VectorXd::Constant(static_cast<Eigen::Index>(problem.n_theta()), start),
                                         opts);
      evaluations += r.evaluations;
      if (!best || r.deviance < best->deviance) best = std::move(r);
    }
    theta = best->theta;
    converged = best->converged;
    trace = std::move(best->trace);
  }
  auto sol = problem.solve(theta);
  auto m = problem.package(theta, sol);
  m.converged = converged;
  m.evaluations = evaluations;
  m.deviance_trace = std::move(trace);
  m.spec_fingerprint = spec.fingerprint();
  m.data_fingerprint = data.fingerprint();
  return m;
}

/// loglik(full) - loglik(baseline); both must be fitted to the same observations.
inline double delta_ll(const FittedModel& full, const FittedModel& baseline) {
  if (full.n_obs != baseline.n_obs || full.data_fingerprint != baseline.data_fingerprint)
    throw ValidationError("delta_ll: models were fitted to different observation sets");
  return full.loglik_nats - baseline.loglik_nats;
}

enum class PredictionMode { marginal, conditional };

/// Predictions for (standardized) data. Unknown grouping levels contribute zero.
inline Eigen::VectorXd predict(const FittedModel& model, const LmeData& data, PredictionMode mode) {
  const auto n = data.predictors.values.rows();
  Eigen::VectorXd out = Eigen::VectorXd::Constant(n, model.beta(0));
  for (std::size_t j = 1; j < model.fixed_names.size(); ++j)
    out += model.beta(static_cast<Eigen::Index>(j)) * data.predictors.values.col(data.predictors.index_of(model.fixed_names[j]));
  if (mode == PredictionMode::marginal) return out;
  for (const auto& b : model.blocks) {
    auto fit = data.factors.find(b.factor);
    if (fit == data.factors.end())
      throw ValidationError("predict: data lacks grouping factor '" + std::string(to_string(b.factor)) + "'");
    const bool intercept = b.column == kIntercept;
    Eigen::Index col = intercept ? -1 : data.predictors.index_of(b.column);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double z = intercept ? 1.0 : data.predictors.values(i, col);
      out(i) += z * b.mode_of(fit->second[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

struct ResidualStats {
  Eigen::VectorXd residuals;
  double mse = 0;
  double sse_under = 0;  // residual > 0: observed above prediction
  double sse_over = 0;   // residual < 0
};

inline ResidualStats residual_stats(const Eigen::VectorXd& residuals) {
  ResidualStats s;
  s.residuals = residuals;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) {
    const double r = residuals(i);
    if (r > 0) s.sse_under += r * r;
    else if (r < 0) s.sse_over += r * r;
  }
  s.mse = residuals.size() ? residuals.squaredNorm() / static_cast<double>(residuals.size()) : 0.0;
  return s;
}

/// Residuals against conditional predictions (random effects included).
inline ResidualStats residual_stats(const FittedModel& model, const LmeData& data) {
  return residual_stats(Eigen::VectorXd(data.response - predict(model, data, PredictionMode::conditional)));
}

}  // namespace rtool::lme
