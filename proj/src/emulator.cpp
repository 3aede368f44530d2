#include "qkd/emulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "qkd/rng.hpp"

namespace qkd {

void SourceParams::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("SourceParams: " + m); };
  for (int i = 0; i < 4; ++i)
    if (!(value[i] >= 0)) bad("negative intensity");
  if (!(value[int(Intensity::Omega)] < value[int(Intensity::Nu)] &&
        value[int(Intensity::Nu)] < value[int(Intensity::Mu)]))
    bad("intensity ordering omega < nu < mu violated");
  if (!(q_z > 0 && q_z < 1)) bad("q_z outside (0,1)");
  double s = p_a[0] + p_a[1] + p_a[2];
  if (std::abs(s - 1.0) > 1e-12) bad("p_a does not sum to 1");
  for (double p : p_a)
    if (!(p >= 0 && p <= 1)) bad("p_a entry outside [0,1]");
}

void ChannelParams::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("ChannelParams: " + m); };
  if (!(loss_db_a >= 0 && loss_db_b >= 0)) bad("negative loss");
  for (double p : {detector_efficiency, dark_count_prob, misalignment})
    if (!(p >= 0 && p <= 1)) bad("probability outside [0,1]");
  if (override_table) {
    const auto& o = *override_table;
    auto chk = [&](double g, double q) {
      if (!(g >= 0 && g <= 1 && q >= 0 && q <= 1)) bad("override entry outside [0,1]");
    };
    chk(o.gain_z, o.qber_z);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) chk(o.gain_x[a][b], o.qber_x[a][b]);
  }
}

void CountsTable::validate() const {
  auto bad = [](const std::string& m) { throw std::runtime_error("CountsTable: " + m); };
  if (z_errors > z_count) bad("z errors exceed z count");
  if (z_count > n_rounds) bad("z count exceeds n_rounds");
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      if (x_errors[a][b] > x_counts[a][b]) {
        char m[96];
        std::snprintf(m, sizeof m, "errors exceed counts at x cell (%d,%d)", a, b);
        bad(m);
      }
      if (x_counts[a][b] > n_rounds) bad("x count exceeds n_rounds");
    }
}

CellStats model_cell(const SourceParams& src, const ChannelParams& ch, Intensity a, Intensity b) {
  bool z_basis = (a == Intensity::Lambda && b == Intensity::Lambda);
  if (ch.override_table) {
    const auto& o = *ch.override_table;
    if (z_basis) return {o.gain_z, o.qber_z};
    if (a != Intensity::Lambda && b != Intensity::Lambda)
      return {o.gain_x[xidx(a)][xidx(b)], o.qber_x[xidx(a)][xidx(b)]};
    // mixed-basis rounds are sifted out; fall through to the model
  }
  double ia = src.intensity(a), ib = src.intensity(b);
  double eta_a = ch.detector_efficiency * std::pow(10.0, -ch.loss_db_a / 10.0);
  double eta_b = ch.detector_efficiency * std::pow(10.0, -ch.loss_db_b / 10.0);
  double m_det = (ia * eta_a + ib * eta_b) / 2.0;
  double p_det = 1.0 - (1.0 - ch.dark_count_prob) * std::exp(-m_det);
  double p_ph = 1.0 - std::exp(-m_det);
  double f = z_basis ? 0.5 : 0.25;
  double gain = f * p_det * p_det;
  if (p_det <= 0) return {0.0, 0.5};
  double w = (p_ph / p_det) * (p_ph / p_det);
  double qber;
  if (z_basis) {
    qber = (ch.misalignment * p_ph * p_ph + 0.5 * (p_det * p_det - p_ph * p_ph)) /
           (p_det * p_det);
  } else {
    double frac = (ia + ib) > 0 ? 2.0 * ia * ib / ((ia + ib) * (ia + ib)) : 0.0;
    qber = 0.5 - (1.0 - 2.0 * ch.misalignment) * 0.5 * frac * w;
  }
  return {gain, std::clamp(qber, 0.0, 0.5)};
}

namespace {

// Ideal raw-bit relation before convention flips: 1 means anticorrelated.
// Z basis: both accepted Bell outcomes anticorrelate the encoded bits.
// X basis: PsiMinus anticorrelates, PsiPlus correlates.
inline int ideal_anticorr(bool z_basis, Bsm s) {
  if (z_basis) return 1;
  return s == Bsm::PsiMinus ? 1 : 0;
}

inline Intensity draw_label(const SourceParams& src, double u) {
  if (u < src.q_z) return Intensity::Lambda;
  double r = (u - src.q_z) / (1.0 - src.q_z);
  if (r < src.p_a[0]) return Intensity::Mu;
  if (r < src.p_a[0] + src.p_a[1]) return Intensity::Nu;
  return Intensity::Omega;
}

constexpr uint64_t kMaxMonteCarloRounds = 500'000'000ull;

}  // namespace

RoundLog generate_rounds(const SourceParams& src, const ChannelParams& ch, uint64_t seed) {
  src.validate();
  ch.validate();
  if (src.n_rounds > kMaxMonteCarloRounds)
    throw std::invalid_argument("generate_rounds: n_rounds beyond Monte-Carlo range; "
                                "use the analytic path");
  RoundLog log;
  log.n_rounds = src.n_rounds;

  // Cache the 16 cell stats; cells are looked up per round.
  CellStats cell[4][4];
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      cell[a][b] = model_cell(src, ch, Intensity(a), Intensity(b));

  CounterRng rng(seed, /*stream=*/1);
  auto unif = [&rng](uint64_t i, uint64_t lane) {
    return double(rng.at(i, lane) >> 11) * 0x1.0p-53;
  };
  for (uint64_t i = 0; i < src.n_rounds; ++i) {
    Intensity a = draw_label(src, unif(i, 0));
    Intensity b = draw_label(src, unif(i, 1));
    const CellStats& st = cell[int(a)][int(b)];
    if (unif(i, 2) >= st.gain) continue;
    bool z_basis = (a == Intensity::Lambda && b == Intensity::Lambda);
    uint8_t r = rng.at(i, 3) & 1;
    Bsm s = (rng.at(i, 4) & 1) ? Bsm::PsiPlus : Bsm::PsiMinus;
    uint8_t err = unif(i, 5) < st.qber ? 1 : 0;
    uint8_t rb = uint8_t(r ^ ideal_anticorr(z_basis, s) ^ err);
    log.rounds.push_back(Round{i + 1, a, b, r, rb, s});
  }
  return log;
}

CountsTable aggregate(const RoundLog& log, const SiftMasks& masks) {
  CountsTable t;
  t.n_rounds = log.n_rounds;
  auto tally = [&log](const std::vector<uint32_t>& idx, const std::vector<uint8_t>& flip,
                      uint64_t& cnt, uint64_t& err) {
    if (idx.size() != flip.size())
      throw std::invalid_argument("aggregate: mask/flip length mismatch");
    cnt = idx.size();
    err = 0;
    for (size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= log.rounds.size())
        throw std::invalid_argument("aggregate: mask index beyond log");
      const Round& r = log.rounds[idx[k]];
      err += uint64_t((r.alice_bit ^ flip[k]) != r.bob_bit);
    }
  };
  tally(masks.z, masks.z_flip, t.z_count, t.z_errors);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      tally(masks.x[a][b], masks.x_flip[a][b], t.x_counts[a][b], t.x_errors[a][b]);
  t.validate();
  return t;
}

std::pair<CountsTable, CountsTable> analytic_counts(const SourceParams& src,
                                                    const ChannelParams& ch) {
  src.validate();
  ch.validate();
  CountsTable t;
  t.n_rounds = src.n_rounds;
  CellStats z = model_cell(src, ch, Intensity::Lambda, Intensity::Lambda);
  t.z_count = uint64_t(std::llround(src.exposure_z() * z.gain));
  t.z_errors = uint64_t(std::llround(double(t.z_count) * z.qber));
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      CellStats st = model_cell(src, ch, Intensity(a + 1), Intensity(b + 1));
      double n = src.exposure(Intensity(a + 1), Intensity(b + 1));
      t.x_counts[a][b] = uint64_t(std::llround(n * st.gain));
      t.x_errors[a][b] = uint64_t(std::llround(double(t.x_counts[a][b]) * st.qber));
    }
  t.validate();
  return {t, t};
}

// ---------------------------------------------------------------------------
// Counts file I/O
// ---------------------------------------------------------------------------

namespace {

const char* kXNames[3] = {"mu", "nu", "omega"};

struct Parser {
  std::map<std::string, std::string> header;
  std::map<std::string, std::string> pair_kv[2];

  explicit Parser(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("counts file: cannot open " + path);
    std::string line;
    int section = -1;  // -1 header, 0/1 pairs
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto h = line.find('#');
      if (h != std::string::npos) line.erase(h);
      auto l = line.find_first_not_of(" \t\r");
      if (l == std::string::npos) continue;
      auto r = line.find_last_not_of(" \t\r");
      line = line.substr(l, r - l + 1);
      if (line.front() == '[') {
        if (line == "[pair 1]")
          section = 0;
        else if (line == "[pair 2]")
          section = 1;
        else
          throw std::runtime_error("counts file: unknown section " + line);
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("counts file: line " + std::to_string(lineno) +
                                 " is not key = value");
      auto trim = [](std::string s) {
        auto a = s.find_first_not_of(" \t");
        auto b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
      if (key.empty() || val.empty())
        throw std::runtime_error("counts file: empty key or value at line " +
                                 std::to_string(lineno));
      auto& dst = section < 0 ? header : pair_kv[section];
      if (!dst.emplace(key, val).second)
        throw std::runtime_error("counts file: duplicate key " + key);
    }
  }

  std::string need(const std::map<std::string, std::string>& kv, const std::string& key) const {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("counts file: missing key " + key);
    return it->second;
  }
  double num(const std::map<std::string, std::string>& kv, const std::string& key) const {
    std::string v = need(kv, key);
    try {
      size_t pos = 0;
      double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw std::runtime_error("counts file: bad number for key " + key + ": " + v);
    }
  }
  uint64_t count(const std::map<std::string, std::string>& kv, const std::string& key) const {
    double d = num(kv, key);
    if (d < 0 || d != std::floor(d))
      throw std::runtime_error("counts file: key " + key + " is not a nonnegative integer");
    return uint64_t(d);
  }
};

}  // namespace

LoadedCounts load_counts(const std::string& path) {
  Parser p(path);
  if (p.need(p.header, "format") != "counts-v1")
    throw std::runtime_error("counts file: unsupported format");
  LoadedCounts out;
  out.src.n_rounds = p.count(p.header, "n_rounds");
  out.src.value[0] = p.num(p.header, "intensity.lambda");
  out.src.value[1] = p.num(p.header, "intensity.mu");
  out.src.value[2] = p.num(p.header, "intensity.nu");
  out.src.value[3] = p.num(p.header, "intensity.omega");
  out.src.q_z = p.num(p.header, "q_z");
  for (int i = 0; i < 3; ++i) out.src.p_a[i] = p.num(p.header, std::string("p.") + kXNames[i]);
  out.src.validate();

  for (int j = 0; j < 2; ++j) {
    CountsTable& t = j == 0 ? out.pair1 : out.pair2;
    const auto& kv = p.pair_kv[j];
    if (kv.empty()) throw std::runtime_error("counts file: missing [pair " +
                                             std::to_string(j + 1) + "] block");
    t.n_rounds = out.src.n_rounds;
    t.z_count = p.count(kv, "z.count");
    t.z_errors = p.count(kv, "z.errors");
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        std::string suf = std::string(kXNames[a]) + "." + kXNames[b];
        t.x_counts[a][b] = p.count(kv, "x.counts." + suf);
        t.x_errors[a][b] = p.count(kv, "x.errors." + suf);
      }
    try {
      t.validate();
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("counts file: pair ") + std::to_string(j + 1) +
                               ": " + e.what());
    }
  }
  return out;
}

void save_counts(const std::string& path, const SourceParams& src, const CountsTable& p1,
                 const CountsTable& p2) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("counts file: cannot write " + path);
  out << "format = counts-v1\n";
  out << "n_rounds = " << src.n_rounds << "\n";
  const char* lbl[4] = {"lambda", "mu", "nu", "omega"};
  for (int i = 0; i < 4; ++i) out << "intensity." << lbl[i] << " = " << src.value[i] << "\n";
  out << "q_z = " << src.q_z << "\n";
  for (int i = 0; i < 3; ++i) out << "p." << kXNames[i] << " = " << src.p_a[i] << "\n";
  for (int j = 0; j < 2; ++j) {
    const CountsTable& t = j == 0 ? p1 : p2;
    out << "\n[pair " << j + 1 << "]\n";
    out << "z.count = " << t.z_count << "\n";
    out << "z.errors = " << t.z_errors << "\n";
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        std::string suf = std::string(kXNames[a]) + "." + kXNames[b];
        out << "x.counts." << suf << " = " << t.x_counts[a][b] << "\n";
        out << "x.errors." << suf << " = " << t.x_errors[a][b] << "\n";
      }
  }
}

}  // namespace qkd
