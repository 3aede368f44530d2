#include "qkd/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qkd {

SecurityBudget SecurityBudget::standard(double eps_sec_hat) {
  SecurityBudget b;
  b.eps_sec_hat = eps_sec_hat;
  b.n_estimation_terms = 22;
  // 46 elementary terms: 2 pairs x 22 estimation bounds + delta + eps_pa.
  double unit = eps_sec_hat / 46.0;
  b.eps_pa = b.delta = b.eps_per_term = unit;
  b.t_ev = 64;
  b.validate();
  return b;
}

void SecurityBudget::validate() const {
  for (double e : {eps_sec_hat, eps_pa, delta, eps_per_term})
    if (!(e > 0 && e < 1)) throw std::invalid_argument("SecurityBudget: epsilon outside (0,1)");
  double total = 2.0 * (n_estimation_terms * eps_per_term) + delta + eps_pa;
  if (std::abs(total - eps_sec_hat) > 1e-15 * eps_sec_hat)
    throw std::invalid_argument("SecurityBudget: decomposition does not close");
}

double binary_entropy(double x) {
  if (x <= 0.0 || x >= 1.0) return 0.0;
  return -x * std::log2(x) - (1.0 - x) * std::log2(1.0 - x);
}

namespace {

// Multiplicative Chernoff forms for sums of independent Bernoullis:
//   lower tail: P[X <= k] <= exp(-(E-k)^2 / (2E))           (k <= E)
//   upper tail: P[X >= k] <= exp(-d^2 E / (2+d)), d=(k-E)/E (k >= E)
// The mean bounds invert these at confidence eps; L = ln(1/eps).

// Largest mean compatible with observing <= k: solve E - sqrt(2LE) = k.
double chernoff_mean_upper(double k, double L) {
  double s = (std::sqrt(2.0 * L) + std::sqrt(2.0 * L + 4.0 * k)) / 2.0;
  return s * s;
}

// Smallest mean compatible with observing >= k (bisection on the upper tail).
double chernoff_mean_lower(double k, double L) {
  if (k <= 0) return 0.0;
  double lo = 0.0, hi = k;
  for (int it = 0; it < 200; ++it) {
    double e = 0.5 * (lo + hi);
    if (e <= 0) break;
    double d = (k - e) / e;
    (d * d * e / (2.0 + d) <= L ? hi : lo) = e;
  }
  return hi;
}

// Observation bounds given the mean (the inverse direction).
double chernoff_observed_lower(double mean, double L) {
  return std::max(0.0, mean - std::sqrt(2.0 * L * mean));
}
double chernoff_observed_upper(double mean, double L) {
  if (mean <= 0) return 0.0;
  // solve d^2 mean/(2+d) = L for d >= 0
  double lo = 0.0, hi = 2.0 + 2.0 * (L / mean + std::sqrt(L / mean));
  for (int it = 0; it < 200; ++it) {
    double d = 0.5 * (lo + hi);
    (d * d * mean / (2.0 + d) >= L ? hi : lo) = d;
  }
  return mean * (1.0 + hi);
}

// Serfling correction for estimating a rate on an unobserved population of
// size n from a without-replacement sample of size k.
double serfling_gamma(double n, double k, double L) {
  if (n <= 0 || k <= 0) return 1.0;
  return std::sqrt((n + k) * (k + 1.0) * L / (2.0 * n * k * k));
}

}  // namespace

double fluctuation_bound(double value, double n_trials, double eps, FluctMode mode) {
  if (!(eps > 0 && eps < 1)) throw std::invalid_argument("fluctuation_bound: eps outside (0,1)");
  if (mode != FluctMode::Serfling && value > n_trials && n_trials > 0)
    throw std::invalid_argument("fluctuation_bound: count exceeds n_trials");
  double L = std::log(1.0 / eps);
  switch (mode) {
    case FluctMode::ChernoffUp:
      return chernoff_mean_upper(value, L);
    case FluctMode::ChernoffLow:
      return chernoff_mean_lower(value, L);
    case FluctMode::InverseUp:
      return chernoff_observed_upper(value, L);
    case FluctMode::InverseLow:
      return chernoff_observed_lower(value, L);
    case FluctMode::Serfling:
      return serfling_gamma(n_trials, value, L);
  }
  return 0.0;
}

namespace {

struct Cells {
  // Rescaled observed gains H~, error gains T~, and the one-sided widths of
  // their mean bounds, all in H~ scale. Index 0=mu, 1=nu, 2=omega.
  double H[3][3], T[3][3];
  double wHlo[3][3], wHhi[3][3], wTlo[3][3], wThi[3][3];
};

Cells build_cells(const CountsTable& c, const SourceParams& src, double L) {
  Cells cl;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      Intensity ia = Intensity(a + 1), ib = Intensity(b + 1);
      double exposure = src.exposure(ia, ib);
      if (exposure <= 0) throw std::invalid_argument("estimate_bounds: zero exposure cell");
      double scale = std::exp(src.intensity(ia) + src.intensity(ib)) / exposure;
      double n = double(c.x_counts[a][b]);
      double m = double(c.x_errors[a][b]);
      cl.H[a][b] = n * scale;
      cl.T[a][b] = m * scale;
      cl.wHlo[a][b] = (n - chernoff_mean_lower(n, L)) * scale;
      cl.wHhi[a][b] = (chernoff_mean_upper(n, L) - n) * scale;
      cl.wTlo[a][b] = (m - chernoff_mean_lower(m, L)) * scale;
      cl.wThi[a][b] = (chernoff_mean_upper(m, L) - m) * scale;
    }
  return cl;
}

constexpr int MU = 0, NU = 1, OM = 2;

double sum4(double a, double b, double c, double d) { return a + b + c + d; }
double rss4(double a, double b, double c, double d) {
  return std::sqrt(a * a + b * b + c * c + d * d);
}

}  // namespace

DecoyBounds estimate_bounds(const CountsTable& counts, const SourceParams& src,
                            double eps_per_term, KernelKind kernel) {
  counts.validate();
  src.validate();
  if (!(eps_per_term > 0 && eps_per_term < 1))
    throw std::invalid_argument("estimate_bounds: eps_per_term outside (0,1)");
  double mu = src.value[int(Intensity::Mu)];
  double nu = src.value[int(Intensity::Nu)];
  double om = src.value[int(Intensity::Omega)];
  if (!(nu - om > 1e-12) || !(mu - nu > 1e-12))
    throw std::invalid_argument("estimate_bounds: degenerate intensities");

  double L = std::log(1.0 / eps_per_term);
  Cells cl = build_cells(counts, src, L);

  auto D = [&cl](int x) { return cl.H[x][x] - cl.H[x][OM] - cl.H[OM][x] + cl.H[OM][OM]; };
  auto DT = [&cl](int x) { return cl.T[x][x] - cl.T[x][OM] - cl.T[OM][x] + cl.T[OM][OM]; };

  DecoyBounds out;
  double r2 = (mu * mu - om * om) / (nu * nu - om * om);
  double dnu_lo, dmu_hi, dtnu_hi, rho, denom;
  if (kernel == KernelKind::Tight) {
    // Per-cell one-sided bounds: widths of a combination add up.
    double r1 = (mu - om) / (nu - om);
    rho = r1 * r2;
    denom = (nu - om) * (nu - om) - (mu - om) * (mu - om) / rho;
    dnu_lo = D(NU) - sum4(cl.wHlo[NU][NU], cl.wHhi[NU][OM], cl.wHhi[OM][NU], cl.wHlo[OM][OM]);
    dmu_hi = D(MU) + sum4(cl.wHhi[MU][MU], cl.wHlo[MU][OM], cl.wHlo[OM][MU], cl.wHhi[OM][OM]);
    dtnu_hi = DT(NU) + sum4(cl.wThi[NU][NU], cl.wTlo[NU][OM], cl.wTlo[OM][NU], cl.wThi[OM][OM]);
    out.n_terms_used = 12 + 3;  // 12 cell bounds + S conversion + sample conversion + Serfling
  } else {
    // Reference kernel: one concentration step per linear combination, the
    // four cell widths composed in quadrature; dominated-conservative
    // coefficient pair (see header).
    rho = (mu / nu) * r2;
    denom = nu * (nu - om) - mu * (mu - om) / rho;
    dnu_lo = D(NU) - rss4(cl.wHlo[NU][NU], cl.wHhi[NU][OM], cl.wHhi[OM][NU], cl.wHlo[OM][OM]);
    dmu_hi = D(MU) + rss4(cl.wHhi[MU][MU], cl.wHlo[MU][OM], cl.wHlo[OM][MU], cl.wHhi[OM][OM]);
    dtnu_hi = DT(NU) + rss4(cl.wThi[NU][NU], cl.wTlo[NU][OM], cl.wTlo[OM][NU], cl.wThi[OM][OM]);
    out.n_terms_used = 3 + 3;  // 3 combination bounds + the three conversions
  }
  out.total_error_prob = out.n_terms_used * eps_per_term;

  double y11 = (dnu_lo - dmu_hi / rho) / denom;
  if (y11 <= 0) {
    y11 = 0;
    out.clamped = true;
  }
  out.y11_lower = y11;

  double w11 = std::max(0.0, dtnu_hi) / ((nu - om) * (nu - om));
  out.e11_upper = y11 > 0 ? std::min(0.5, w11 / y11) : 0.5;

  // Z-basis single-photon events: expected value from Y11, then the
  // expected-to-observed conversion.
  double lam = src.value[int(Intensity::Lambda)];
  double p1_lam = lam * std::exp(-lam);
  double s_mean = src.exposure_z() * p1_lam * p1_lam * y11;
  double s_low = std::floor(chernoff_observed_lower(s_mean, L));
  s_low = std::min(s_low, double(counts.z_count));
  out.s11_lower = s_low;

  // Phase error: e11 plus the Serfling sampling correction. The sample is the
  // nu/nu X-basis single-photon pool (converted to an observed lower bound).
  double p1_nu = nu * std::exp(-nu);
  double k_mean = src.exposure(Intensity::Nu, Intensity::Nu) * p1_nu * p1_nu * y11;
  double k_obs = std::max(1.0, chernoff_observed_lower(k_mean, L));
  double gamma = serfling_gamma(std::max(1.0, s_low), k_obs, L);
  out.phi11_upper = std::min(1.0, out.e11_upper + gamma);
  return out;
}

uint64_t lambda_ec(uint64_t z_len, double code_rate, uint64_t block_len) {
  if (!(code_rate > 0 && code_rate < 1)) throw std::invalid_argument("lambda_ec: rate outside (0,1)");
  if (block_len == 0 || (block_len & (block_len - 1)))
    throw std::invalid_argument("lambda_ec: block length must be a power of two");
  uint64_t blocks = (z_len + block_len - 1) / block_len;
  double parity_bits = (1.0 - code_rate) * double(block_len);
  uint64_t per_block = 8 * uint64_t(std::ceil(parity_bits / 8.0));
  return blocks * per_block;
}

int64_t key_length(const DecoyBounds& b, uint64_t lambda_ec_bits, const SecurityBudget& budget) {
  budget.validate();
  if (b.phi11_upper > 0.5) return INT64_MIN / 2;  // entropy argument out of range: abort
  long double log2_term =
      std::log2(1.0L / (4.0L * (long double)budget.eps_pa * budget.eps_pa * budget.delta));
  long double v = (long double)b.s11_lower * (1.0L - (long double)binary_entropy(b.phi11_upper)) -
                  (long double)lambda_ec_bits - budget.t_ev - log2_term;
  return int64_t(std::floor((double)v));
}

int64_t final_length(int64_t l1, int64_t l2) {
  int64_t m = std::min(l1, l2);
  if (m <= 0) return 0;
  return 32 * (m / 32);
}

double key_rate(int64_t l, int64_t l_au, double n_rounds) {
  if (l <= l_au) return 0.0;
  return double(l - l_au) / (2.0 * n_rounds);
}

double correctness_epsilon(uint64_t z_total_len, int t_ev) {
  if (t_ev < 1) throw std::invalid_argument("correctness_epsilon: t_ev < 1");
  return std::ldexp(double(z_total_len), 1 - t_ev);
}

}  // namespace qkd
