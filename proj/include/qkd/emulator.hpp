#pragma once
// Raw-data emulation for the two module pairs: a parametric channel model
// generating per-round Bell-state-measurement records, aggregation into
// per-intensity-pair count tables, and (de)serialization of fixed measured
// count tables so the pipeline can run on either synthetic or recorded
// statistics.
//
// Channel model (documented here because it is this repo's choice; only its
// self-consistency and qualitative behavior are contracted):
//   eta_side   = detector_efficiency * 10^(-loss_db_side / 10)
//   m_det      = (i_A*eta_A + i_B*eta_B) / 2      mean photons per relay detector
//   p_det      = 1 - (1 - p_dark) * exp(-m_det)   click prob. (photons + dark)
//   p_ph       = 1 - exp(-m_det)                  photon-caused part
//   Q(iA,iB)   = f_basis * p_det^2                two-detector coincidence
//     with f_basis = 1/2 when both sides sent the Z-basis intensity (two
//     accepted Bell outcomes) and 1/4 otherwise (one accepted outcome).
//   w          = (p_ph / p_det)^2                 both clicks photon-caused
//   X error    = 1/2 - (1 - 2 e_mis) * (1/2) * [2 iA iB/(iA+iB)^2] * w
//     (two-mode interference visibility of phase-randomized coherent pulses,
//      diluted by intensity imbalance and dark-driven coincidences)
//   Z error    = [e_mis * p_ph^2 + (1/2)(p_det^2 - p_ph^2)] / p_det^2
// An optional per-cell override table replaces Q and the error rate wholesale,
// which is how runs are calibrated to recorded statistics.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qkd/bits.hpp"

namespace qkd {

// Intensity labels: Lambda is the unique Z-basis label; Mu > Nu > Omega are
// the X-basis (decoy) labels.
enum class Intensity : uint8_t { Lambda = 0, Mu = 1, Nu = 2, Omega = 3 };
inline const char* intensity_name(Intensity a) {
  switch (a) {
    case Intensity::Lambda: return "lambda";
    case Intensity::Mu: return "mu";
    case Intensity::Nu: return "nu";
    default: return "omega";
  }
}

// Index of an X-basis label into 3x3 grids (mu=0, nu=1, omega=2).
inline int xidx(Intensity a) { return int(a) - 1; }

struct SourceParams {
  double value[4] = {0.23, 0.23, 0.047, 0.005};  // lambda, mu, nu, omega
  double q_z = 0.59;                             // P[label = lambda]
  double p_a[3] = {0.2, 0.6, 0.2};               // P[mu|X], P[nu|X], P[omega|X]
  uint64_t n_rounds = 0;

  double q_x() const { return 1.0 - q_z; }
  double intensity(Intensity a) const { return value[int(a)]; }
  // Number of rounds in which the sides chose the X-basis pair (a, b).
  double exposure(Intensity a, Intensity b) const {
    return double(n_rounds) * (q_x() * p_a[xidx(a)]) * (q_x() * p_a[xidx(b)]);
  }
  double exposure_z() const { return double(n_rounds) * q_z * q_z; }
  void validate() const;  // throws std::invalid_argument on violation
};

struct GainOverride {
  double gain_z = 0, qber_z = 0;
  double gain_x[3][3] = {};  // [a][b], indices per xidx
  double qber_x[3][3] = {};
};

struct ChannelParams {
  double loss_db_a = 14.0;
  double loss_db_b = 14.0;
  double detector_efficiency = 1.0;  // folded into loss
  double dark_count_prob = 1e-7;    // per detector per gate
  double misalignment = 0.023;
  std::optional<GainOverride> override_table;
  void validate() const;
};

struct CellStats {
  double gain;  // successful-BSM probability for the cell
  double qber;  // error probability given success
};

// Closed-form model evaluation for intensity pair (ia, ib); z_basis selects
// the accepted-outcome fraction. Honors the override table when present.
CellStats model_cell(const SourceParams& src, const ChannelParams& ch, Intensity a, Intensity b);

enum class Bsm : uint8_t { PsiMinus = 0, PsiPlus = 1 };

struct Round {
  uint64_t index;     // position in 1..N
  Intensity a, b;     // chosen intensities
  uint8_t alice_bit;  // raw encoded bit
  uint8_t bob_bit;
  Bsm bsm;
};

struct RoundLog {
  uint64_t n_rounds = 0;
  std::vector<Round> rounds;  // successful-BSM rounds only, index-ascending
};

// Sifting masks over a RoundLog: positions (into RoundLog::rounds) of the
// Z-coincidences and of each X-basis cell. Produced by the orchestrator's
// sift; consumed here by aggregate.
struct SiftMasks {
  std::vector<uint32_t> z;           // both sides Lambda
  std::vector<uint32_t> x[3][3];     // both sides X, cell (a, b)
  std::vector<uint8_t> z_flip;       // convention flip applied to Alice's bit
  std::vector<uint8_t> x_flip[3][3];
};

struct CountsTable {
  uint64_t n_rounds = 0;
  uint64_t z_count = 0, z_errors = 0;
  uint64_t x_counts[3][3] = {};
  uint64_t x_errors[3][3] = {};
  void validate() const;  // counts<=N, errors<=counts
};

// Per-round Monte-Carlo generation. Deterministic for a fixed seed; round i
// is a pure function of (seed, i), so any partition of the index range across
// threads yields identical output.
RoundLog generate_rounds(const SourceParams& src, const ChannelParams& ch, uint64_t seed);

// Aggregate a round log into count tables using sift masks. The error count
// of a cell is the Hamming distance between the masked, convention-flipped
// Alice bits and the masked Bob bits.
CountsTable aggregate(const RoundLog& log, const SiftMasks& masks);

// Expected (analytic) counts at arbitrary N, bypassing Monte Carlo: each cell
// count is the rounded mean. Used by the large-N analytic estimation path.
std::pair<CountsTable, CountsTable> analytic_counts(const SourceParams& src, const ChannelParams& ch);

struct LoadedCounts {
  SourceParams src;
  CountsTable pair1, pair2;
};

// Counts file: UTF-8, line oriented. Grammar:
//   comment lines start with '#'; blank lines ignored
//   header:  key = value   with keys
//     format (= counts-v1), n_rounds, intensity.{lambda,mu,nu,omega},
//     q_z, p.{mu,nu,omega}
//   then two blocks introduced by "[pair 1]" / "[pair 2]", each with
//     z.count, z.errors, x.counts.<a>.<b>, x.errors.<a>.<b>
//   where <a>,<b> are mu|nu|omega. All 9+9 grid entries required.
// Malformed input and invariant violations throw std::runtime_error with the
// offending key in the message.
LoadedCounts load_counts(const std::string& path);
void save_counts(const std::string& path, const SourceParams& src, const CountsTable& p1,
                 const CountsTable& p2);

}  // namespace qkd
