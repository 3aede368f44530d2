#include "qkd/reconciliation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "qkd/rng.hpp"

namespace qkd {

namespace {

BitVec zeros(uint64_t n) {
  BitVec v;
  v.resize(n);
  return v;
}

struct DisjointSet {
  std::vector<uint32_t> p;
  explicit DisjointSet(uint32_t n) : p(n) {
    for (uint32_t i = 0; i < n; ++i) p[i] = i;
  }
  uint32_t find(uint32_t x) {
    while (p[x] != x) x = p[x] = p[p[x]];
    return x;
  }
  bool unite(uint32_t a, uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    p[a] = b;
    return true;
  }
};

// Bitmap over unordered check pairs; marking every pair used by some variable
// and rejecting reuse keeps the factor graph free of 4-cycles.
struct PairMap {
  std::vector<uint64_t> bits;
  PairMap() : bits((LdpcCode::kChecks * LdpcCode::kChecks + 63) / 64, 0) {}
  static uint64_t idx(uint32_t a, uint32_t b) {
    if (a > b) std::swap(a, b);
    return uint64_t(a) * LdpcCode::kChecks + b;
  }
  bool test(uint32_t a, uint32_t b) const {
    uint64_t i = idx(a, b);
    return (bits[i >> 6] >> (i & 63)) & 1u;
  }
  void set(uint32_t a, uint32_t b) {
    uint64_t i = idx(a, b);
    bits[i >> 6] |= uint64_t(1) << (i & 63);
  }
};

void fnv_eat(uint64_t& h, uint64_t x) {
  for (int i = 0; i < 8; ++i) {
    h ^= (x >> (8 * i)) & 0xff;
    h *= 0x100000001b3ull;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// LDPC instance construction
// ---------------------------------------------------------------------------

const std::vector<std::pair<int, uint32_t>>& LdpcCode::profile() {
  // Node-perspective degree profile. Degree-2 variables stay below the
  // forest bound (kChecks - 1) and below the belief-propagation stability
  // limit for flip rates up to ~3%; the degree-11 block carries the bulk of
  // the edge mass, which density-evolution sweeps over this family placed as
  // the best balance between threshold and check-degree growth at rate 0.81.
  static const std::vector<std::pair<int, uint32_t>> p = {{2, 12400}, {3, 35136}, {11, 18000}};
  return p;
}

LdpcCode LdpcCode::generate(uint64_t seed) { return generate_with(profile(), seed); }

LdpcCode LdpcCode::generate_with(const std::vector<std::pair<int, uint32_t>>& prof,
                                 uint64_t seed) {
  uint64_t n_edges = 0, n_vars = 0;
  for (auto [deg, cnt] : prof) {
    n_edges += uint64_t(deg) * cnt;
    n_vars += cnt;
  }
  if (n_vars != kBlockLen) throw std::logic_error("LdpcCode::generate: profile does not cover block");

  CounterRng rng(seed, /*stream=*/41);
  DisjointSet forest(kChecks);
  PairMap pairs;
  LdpcCode code;
  code.var_off_.reserve(kBlockLen + 1);
  code.var_chk_.reserve(n_edges);
  code.var_off_.push_back(0);

  // Progressive edge growth: place variables lowest degree first, and for
  // each edge walk breadth-first outward from the variable's checks so the
  // new edge lands on a check the variable cannot yet reach -- every such
  // placement closes no new cycle. When the whole graph is within reach
  // (late, dense stages) the deepest breadth-first layer is used instead,
  // keeping the cycles that must form as long as possible. Ties always break
  // toward the least-loaded check, which keeps the realized check degrees
  // near-regular without an explicit quota.
  std::vector<size_t> order(prof.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return prof[a].first < prof[b].first; });

  const uint32_t cap = uint32_t(n_edges / kChecks + (n_edges % kChecks ? 1 : 0));
  // Expansion ceilings: a breadth-first pass stops once it has crossed
  // kPegBudget edges or once fewer than kPegMinUnseen checks remain unseen
  // (the remainder is then "the far side of the graph" for this variable);
  // both bound the work per placement without hurting the early, sparse,
  // decisive placements.
  constexpr uint64_t kPegBudget = 2000;
  constexpr int kPegMaxDepth = 6;
  constexpr uint32_t kPegMinUnseen = 1024;
  constexpr int kPegProbes = 48;

  std::vector<std::vector<uint32_t>> check_adj(kChecks);  // construction-order var ids
  std::vector<std::vector<uint32_t>> var_adj;             // picked checks per placed var
  var_adj.reserve(kBlockLen);
  std::vector<uint32_t> load(kChecks, 0);
  // Checks bucketed by current load, so the least-loaded candidates are
  // always at hand without scanning; loads only grow, so the floor level
  // only moves up.
  std::vector<std::vector<uint32_t>> bucket(1);
  std::vector<uint32_t> bpos(kChecks);
  bucket[0].resize(kChecks);
  for (uint32_t c = 0; c < kChecks; ++c) {
    bucket[0][c] = c;
    bpos[c] = c;
  }
  uint32_t floor_load = 0;
  auto bump = [&](uint32_t c) {
    uint32_t l = load[c];
    std::vector<uint32_t>& from = bucket[l];
    uint32_t moved = from.back();
    from[bpos[c]] = moved;
    bpos[moved] = bpos[c];
    from.pop_back();
    if (bucket.size() <= l + 1) bucket.resize(l + 2);
    bpos[c] = uint32_t(bucket[l + 1].size());
    bucket[l + 1].push_back(c);
    load[c] = l + 1;
    while (bucket[floor_load].empty()) ++floor_load;
  };

  std::vector<uint32_t> cstamp(kChecks, 0), vstamp(kBlockLen, 0);
  uint32_t epoch = 0;
  std::vector<std::vector<uint32_t>> layers;
  std::vector<std::vector<uint32_t>> seg_rows(prof.size());
  std::vector<uint32_t> picked;

  for (size_t oi : order) {
    auto [deg, cnt] = prof[oi];
    seg_rows[oi].reserve(uint64_t(deg) * cnt);
    for (uint32_t vi = 0; vi < cnt; ++vi) {
      picked.clear();
      for (int d = 0; d < deg; ++d) {
        // A candidate is compatible if it is distinct from the slots already
        // picked for this variable, shares no check pair with them (the
        // 4-cycle rejection), and -- for the second slot of a degree-2
        // variable -- lies in a different forest component, so no cycle in
        // the graph consists purely of degree-2 variables.
        auto compatible = [&](uint32_t c) {
          for (uint32_t p : picked)
            if (p == c || pairs.test(p, c)) return false;
          if (deg == 2 && d == 1) return forest.find(picked[0]) != forest.find(c);
          return true;
        };
        int64_t choice = -1;

        if (d == 0) {
          // No cycle can close through the first edge: any least-loaded
          // check does.
          std::vector<uint32_t>& b = bucket[floor_load];
          choice = b[rng.below(b.size())];
        } else {
          // Breadth-first ball around the variable through already-placed
          // edges; layers[k] holds the checks first seen at distance k.
          ++epoch;
          layers.clear();
          layers.push_back(picked);
          uint32_t seen = uint32_t(picked.size());
          for (uint32_t c : picked) cstamp[c] = epoch;
          uint64_t steps = 0;
          bool go = true;
          for (int depth = 0; go && depth < kPegMaxDepth; ++depth) {
            std::vector<uint32_t> next;
            for (uint32_t c : layers.back()) {
              for (uint32_t w : check_adj[c]) {
                ++steps;
                if (vstamp[w] == epoch) continue;
                vstamp[w] = epoch;
                for (uint32_t c2 : var_adj[w]) {
                  ++steps;
                  if (cstamp[c2] == epoch) continue;
                  cstamp[c2] = epoch;
                  next.push_back(c2);
                  ++seen;
                }
                if (steps > kPegBudget || seen + kPegMinUnseen > kChecks) {
                  go = false;
                  break;
                }
              }
              if (!go) break;
            }
            if (next.empty()) break;
            layers.push_back(std::move(next));
          }
          // Load level by load level, look for a check the ball did not
          // reach: sample the level first, then sweep it; if a whole level
          // holds nothing unreached-and-compatible, move up a level. The
          // last resorts pick from the deepest reached layer and finally
          // anywhere, waiving the load cap.
          for (uint32_t l = floor_load; choice < 0 && l < cap; ++l) {
            std::vector<uint32_t>& b = bucket[l];
            if (b.empty()) continue;
            for (int t = 0; t < kPegProbes && choice < 0; ++t) {
              uint32_t c = b[rng.below(b.size())];
              if (cstamp[c] != epoch && compatible(c)) choice = c;
            }
            if (choice < 0) {
              uint32_t ties = 0;
              for (uint32_t c : b)
                if (cstamp[c] != epoch && compatible(c) && rng.below(++ties) == 0) choice = c;
            }
          }
          for (size_t k = layers.size(); k-- > 1 && choice < 0;) {
            uint32_t best_load = 0, ties = 0;
            for (uint32_t c : layers[k]) {
              if (!compatible(c)) continue;
              if (choice < 0 || load[c] < best_load) {
                best_load = load[c];
                ties = 1;
                choice = c;
              } else if (load[c] == best_load && rng.below(++ties) == 0) {
                choice = c;
              }
            }
          }
          if (choice < 0) {
            uint32_t ties = 0;
            for (uint32_t c = 0; c < kChecks; ++c)
              if (compatible(c) && rng.below(++ties) == 0) choice = c;
          }
        }
        if (choice < 0) throw std::runtime_error("LdpcCode::generate: construction stuck");
        picked.push_back(uint32_t(choice));
      }
      if (deg == 2) forest.unite(picked[0], picked[1]);
      for (size_t a = 0; a < picked.size(); ++a)
        for (size_t b = a + 1; b < picked.size(); ++b) pairs.set(picked[a], picked[b]);
      uint32_t id = uint32_t(var_adj.size());
      for (uint32_t c : picked) {
        bump(c);
        check_adj[c].push_back(id);
      }
      var_adj.push_back(picked);
      std::sort(picked.begin(), picked.end());
      for (uint32_t c : picked) seg_rows[oi].push_back(c);
    }
  }
  for (size_t i = 0; i < prof.size(); ++i) {
    int deg = prof[i].first;
    for (size_t pos = 0; pos < seg_rows[i].size(); pos += deg) {
      for (int d = 0; d < deg; ++d) code.var_chk_.push_back(seg_rows[i][pos + d]);
      code.var_off_.push_back(uint32_t(code.var_chk_.size()));
    }
  }
  code.build_check_csr();
  return code;
}

void LdpcCode::build_check_csr() {
  std::vector<uint32_t> deg(kChecks, 0);
  for (uint32_t c : var_chk_) ++deg[c];
  chk_off_.assign(kChecks + 1, 0);
  for (uint32_t c = 0; c < kChecks; ++c) chk_off_[c + 1] = chk_off_[c] + deg[c];
  chk_var_.resize(var_chk_.size());
  chk_edge_.resize(var_chk_.size());
  std::vector<uint32_t> fill(chk_off_.begin(), chk_off_.end() - 1);
  for (uint32_t v = 0; v + 1 < var_off_.size(); ++v)
    for (uint32_t e = var_off_[v]; e < var_off_[v + 1]; ++e) {
      uint32_t c = var_chk_[e];
      chk_var_[fill[c]] = v;
      chk_edge_[fill[c]] = e;
      ++fill[c];
    }
}

uint64_t LdpcCode::digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  fnv_eat(h, kBlockLen);
  fnv_eat(h, kChecks);
  fnv_eat(h, var_off_.size() - 1);
  fnv_eat(h, var_chk_.size());
  for (uint32_t v = 0; v + 1 < var_off_.size(); ++v) {
    fnv_eat(h, var_off_[v + 1] - var_off_[v]);
    for (uint32_t e = var_off_[v]; e < var_off_[v + 1]; ++e) fnv_eat(h, var_chk_[e]);
  }
  return h;
}

void LdpcCode::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("LdpcCode::save: cannot open " + path);
  out << "ldpc-fixture v1\n";
  out << "block_len " << kBlockLen << "\n";
  out << "checks " << kChecks << "\n";
  out << "syndrome_len " << kSyndromeLen << "\n";
  out << "edges " << var_chk_.size() << "\n";
  out << "profile";
  for (auto [deg, cnt] : profile()) out << " " << deg << ":" << cnt;
  out << "\n";
  out << "seed " << kLdpcSeed << "\n";
  out << "digest " << digest() << "\n";
  // One line per variable: degree, then its checks ascending.
  for (uint32_t v = 0; v + 1 < var_off_.size(); ++v) {
    uint32_t d = var_off_[v + 1] - var_off_[v];
    out << d;
    for (uint32_t e = var_off_[v]; e < var_off_[v + 1]; ++e) out << " " << var_chk_[e];
    out << "\n";
  }
  if (!out) throw std::runtime_error("LdpcCode::save: write failed for " + path);
}

LdpcCode LdpcCode::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("LdpcCode::load: cannot open " + path);
  std::string magic, version;
  in >> magic >> version;
  if (magic != "ldpc-fixture" || version != "v1")
    throw std::runtime_error("LdpcCode::load: bad header in " + path);
  uint64_t block = 0, checks = 0, syn = 0, edges = 0, seed = 0, want_digest = 0;
  std::string key, profile_str;
  in >> key >> block >> key >> checks >> key >> syn >> key >> edges;
  in >> key;  // "profile"
  std::getline(in, profile_str);
  in >> key >> seed >> key >> want_digest;
  if (block != kBlockLen || checks != kChecks || syn != kSyndromeLen)
    throw std::runtime_error("LdpcCode::load: geometry mismatch in " + path);

  LdpcCode code;
  code.var_off_.reserve(kBlockLen + 1);
  code.var_chk_.reserve(edges);
  code.var_off_.push_back(0);
  for (uint64_t v = 0; v < kBlockLen; ++v) {
    uint32_t deg = 0;
    if (!(in >> deg) || deg == 0 || deg > 64)
      throw std::runtime_error("LdpcCode::load: bad variable degree in " + path);
    uint32_t prev = 0;
    for (uint32_t d = 0; d < deg; ++d) {
      uint32_t c = 0;
      if (!(in >> c) || c >= kChecks || (d > 0 && c <= prev))
        throw std::runtime_error("LdpcCode::load: bad adjacency in " + path);
      code.var_chk_.push_back(c);
      prev = c;
    }
    code.var_off_.push_back(uint32_t(code.var_chk_.size()));
  }
  if (code.var_chk_.size() != edges || code.digest() != want_digest)
    throw std::runtime_error("LdpcCode::load: fixture corrupt (digest mismatch) in " + path);
  code.build_check_csr();
  return code;
}

BitVec LdpcCode::syndrome(const BitVec& block) const {
  if (block.size() != kBlockLen) throw std::invalid_argument("syndrome: block length mismatch");
  BitVec out(kSyndromeLen);
  // Variable-major: walk set bits only (cheap for sparse error patterns).
  auto words = block.words();
  for (size_t wi = 0; wi < words.size(); ++wi) {
    uint64_t w = words[wi];
    while (w) {
      uint32_t v = uint32_t(wi * 64 + uint32_t(__builtin_ctzll(w)));
      w &= w - 1;
      auto [it, end] = var_checks(v);
      for (; it != end; ++it) out.flip(*it);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Belief propagation
// ---------------------------------------------------------------------------

namespace {

// phi(x) = -ln(tanh(x/2)), its own inverse. The function is steep near zero,
// where table cells would smear weak messages, so small arguments are computed
// directly; the flat region x >= 0.5 uses midpoint cells of 1/128 over
// [0.5, 16). Arguments below 1e-9 (and above the table) clamp, which bounds
// message magnitudes exactly like the usual LLR clipping.
constexpr int kPhiCells = 2048;
constexpr float kPhiExactBelow = 0.5f;

const float* phi_table() {
  static const std::vector<float> tab = [] {
    std::vector<float> t(kPhiCells);
    for (int i = 0; i < kPhiCells; ++i) {
      double x = (i + 0.5) / 128.0;
      t[i] = float(-std::log(std::tanh(x / 2.0)));
    }
    return t;
  }();
  return tab.data();
}

inline float phi_eval(const float* tab, float x) {
  if (x < kPhiExactBelow) {
    if (x < 1e-9f) x = 1e-9f;
    return -std::log(std::tanh(x * 0.5f));
  }
  int i = int(x * 128.0f);
  if (i >= kPhiCells) i = kPhiCells - 1;
  return tab[i];
}

}  // namespace

DecodeResult decode(const LdpcCode& code, const BitVec& noisy, const BitVec& target_syndrome,
                    double qber_prior, int max_iters) {
  if (noisy.size() != code.block_len()) throw std::invalid_argument("decode: block length mismatch");
  if (target_syndrome.size() != code.syndrome_len())
    throw std::invalid_argument("decode: syndrome length mismatch");
  for (uint64_t b = code.n_checks(); b < code.syndrome_len(); ++b)
    if (target_syndrome.get(b)) throw std::invalid_argument("decode: nonzero padding bit in syndrome");
  if (!(qber_prior > 0.0 && qber_prior < 0.5))
    throw std::invalid_argument("decode: qber_prior outside (0, 0.5)");
  if (max_iters < 1) throw std::invalid_argument("decode: max_iters < 1");

  const uint32_t n = uint32_t(code.block_len());
  const uint32_t m = uint32_t(code.n_checks());

  // Work on the error pattern: convergence and the answer depend only on
  // syndrome(noisy) xor target, so share-displaced copies of the same block
  // pose the identical problem to every holder.
  BitVec esyn = code.syndrome(noisy);
  esyn.xor_with(target_syndrome);
  std::vector<uint8_t> esb(m);
  bool clean = true;
  for (uint32_t c = 0; c < m; ++c) {
    esb[c] = esyn.get(c);
    clean = clean && !esb[c];
  }
  if (clean) return {noisy, true, 0};

  const uint64_t n_edges = code.n_edges();
  const float prior = std::log(float(1.0 - qber_prior) / float(qber_prior));
  std::vector<float> v2c(n_edges, prior), c2v(n_edges, 0.0f);
  const float* tab = phi_table();

  BitVec err(n);
  for (int iter = 0; iter < max_iters; ++iter) {
    // Check pass: sign-magnitude sum-product with two passes over each check.
    float mag[64];
    uint8_t sgn[64];
    for (uint32_t c = 0; c < m; ++c) {
      auto [eb, ee] = code.check_edges(c);
      int deg = int(ee - eb);
      float sum = 0.0f;
      uint8_t sall = esb[c];
      for (int i = 0; i < deg; ++i) {
        float v = v2c[eb[i]];
        uint8_t s = v < 0.0f;
        float a = s ? -v : v;
        float ph = phi_eval(tab, a);
        mag[i] = ph;
        sgn[i] = s;
        sum += ph;
        sall ^= s;
      }
      for (int i = 0; i < deg; ++i) {
        float out = phi_eval(tab, sum - mag[i]);
        c2v[eb[i]] = (sall ^ sgn[i]) ? -out : out;
      }
    }

    // Variable pass and hard decision on the error pattern.
    auto ew = err.words();
    std::fill(ew.begin(), ew.end(), 0);
    for (uint32_t v = 0; v < n; ++v) {
      auto [b, e] = code.var_edge_span(v);
      float total = prior;
      for (uint32_t i = b; i < e; ++i) total += c2v[i];
      for (uint32_t i = b; i < e; ++i) v2c[i] = total - c2v[i];
      if (total < 0.0f) ew[v >> 6] |= uint64_t(1) << (v & 63);
    }

    BitVec check = code.syndrome(err);
    if (check == esyn) {
      BitVec word = noisy;
      word.xor_with(err);
      return {std::move(word), true, iter + 1};
    }
  }
  BitVec word = noisy;
  word.xor_with(err);
  return {std::move(word), false, max_iters};
}

// ---------------------------------------------------------------------------
// Byte permutation
// ---------------------------------------------------------------------------

std::vector<uint32_t> make_byte_permutation(uint64_t n_bytes, uint64_t seed) {
  std::vector<uint32_t> perm(n_bytes);
  for (uint64_t i = 0; i < n_bytes; ++i) perm[i] = uint32_t(i);
  CounterRng rng(seed, /*stream=*/42);
  for (uint64_t i = n_bytes; i > 1; --i) {
    uint64_t j = rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

BitVec permute_bytes(const BitVec& in, const std::vector<uint32_t>& perm) {
  if (in.size() % 8 != 0) throw std::invalid_argument("permute_bytes: length not whole bytes");
  if (in.size() / 8 != perm.size()) throw std::invalid_argument("permute_bytes: table size mismatch");
  std::vector<uint8_t> src = in.to_bytes(), dst(src.size());
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = src[perm[i]];
  return BitVec::from_bytes(dst, in.size());
}

BitVec unpermute_bytes(const BitVec& in, const std::vector<uint32_t>& perm) {
  if (in.size() % 8 != 0) throw std::invalid_argument("unpermute_bytes: length not whole bytes");
  if (in.size() / 8 != perm.size())
    throw std::invalid_argument("unpermute_bytes: table size mismatch");
  std::vector<uint8_t> src = in.to_bytes(), dst(src.size());
  for (size_t i = 0; i < src.size(); ++i) dst[perm[i]] = src[i];
  return BitVec::from_bytes(dst, in.size());
}

BitVec pad_to_blocks(const BitVec& in, uint64_t block_len) {
  if (block_len == 0) throw std::invalid_argument("pad_to_blocks: zero block length");
  uint64_t rem = in.size() % block_len;
  if (rem == 0) return in;
  BitVec out = in;
  out.resize(in.size() + (block_len - rem));
  return out;
}

// ---------------------------------------------------------------------------
// GF(2) polynomial arithmetic for the LFSR-Toeplitz family
// ---------------------------------------------------------------------------

namespace {

inline int poly_deg(uint64_t a) { return a ? 63 - __builtin_clzll(a) : -1; }

// a mod b over GF(2), both in u64 (b != 0).
uint64_t poly_mod_u64(uint64_t a, uint64_t b) {
  int db = poly_deg(b);
  for (int da = poly_deg(a); da >= db; da = poly_deg(a)) a ^= b << (da - db);
  return a;
}

uint64_t poly_gcd_u64(uint64_t a, uint64_t b) {
  while (b) {
    uint64_t r = poly_mod_u64(a, b);
    a = b;
    b = r;
  }
  return a;
}

// a^2 mod (x^t + c), deg a < t <= 64.
uint64_t sqr_mod(uint64_t a, uint64_t c, int t) {
  unsigned __int128 r = 0;
  for (int i = 0; i < t; ++i)
    if ((a >> i) & 1) r ^= (unsigned __int128)1 << (2 * i);
  for (int i = 2 * t - 2; i >= t; --i)
    if ((r >> i) & 1) {
      r ^= (unsigned __int128)1 << i;
      r ^= (unsigned __int128)c << (i - t);
    }
  return uint64_t(r);
}

// (x^t + c) mod a for 0 < deg a < t: one long-division step brings the full
// polynomial (which does not fit in 64 bits when t = 64) into u64 range.
uint64_t p_mod_small(uint64_t c, int t, uint64_t a) {
  int d = poly_deg(a);
  if (d == 0) return 0;                   // a == 1 divides everything
  uint64_t v = a ^ (uint64_t(1) << d);    // x^d mod a
  for (int i = d + 1; i <= t; ++i) {      // raise to x^t, reducing each step
    bool hi = (v >> (d - 1)) & 1;
    v <<= 1;
    if (hi) v ^= a;                       // clears bit d, adds the low part
  }
  return v ^ poly_mod_u64(c, a);
}

}  // namespace

bool poly_irreducible(uint64_t low_coeffs, int degree) {
  int t = degree;
  if (t < 2 || t > 64) return false;
  if ((low_coeffs & 1) == 0) return false;  // divisible by x
  // Rabin's test: x^(2^t) == x mod p, and gcd(x^(2^(t/q)) - x, p) = 1 for
  // every prime q dividing t.
  auto frob = [&](int k) {
    uint64_t a = 2;  // the polynomial x
    for (int i = 0; i < k; ++i) a = sqr_mod(a, low_coeffs, t);
    return a;
  };
  if (frob(t) != 2) return false;
  // gcd(a, p) starts with one division step p mod a, then runs in u64.
  auto coprime_with_p = [&](uint64_t a) {
    return a != 0 && poly_gcd_u64(a, p_mod_small(low_coeffs, t, a)) == 1;
  };
  int rem = t;
  for (int q = 2; q * q <= rem; ++q) {
    if (rem % q) continue;
    while (rem % q == 0) rem /= q;
    if (!coprime_with_p(frob(t / q) ^ 2)) return false;  // a = x^(2^(t/q)) - x
  }
  if (rem > 1 && !coprime_with_p(frob(t / rem) ^ 2)) return false;
  return true;
}

EvDescriptor derive_ev_descriptor(const BitVec& raw128) {
  if (raw128.size() != 128) throw std::invalid_argument("derive_ev_descriptor: need 128 bits");
  EvDescriptor d;
  d.poly = raw128.word(0);
  d.state = raw128.word(1);
  // Deterministically advance the polynomial half to the first irreducible
  // candidate so every unit derives the same descriptor from shared bits.
  while (!poly_irreducible(d.poly, 64)) ++d.poly;
  return d;
}

uint64_t ev_tag_width(const BitVec& message, uint64_t poly, uint64_t state, int degree) {
  if (!poly_irreducible(poly, degree))
    throw std::invalid_argument("ev_tag: inadmissible descriptor polynomial");
  const uint64_t mask = (degree == 64) ? ~uint64_t(0) : (uint64_t(1) << degree) - 1;
  const uint64_t top = uint64_t(1) << (degree - 1);
  uint64_t s = state & mask, tag = 0;
  auto words = message.words();
  uint64_t left = message.size();
  for (size_t wi = 0; wi < words.size(); ++wi) {
    uint64_t w = words[wi];
    int nb = int(left < 64 ? left : 64);
    for (int b = 0; b < nb; ++b) {
      if ((w >> b) & 1) tag ^= s;
      // State j holds s * x^j mod p; advance by one multiplication by x.
      s = ((s & top) ? ((s << 1) ^ poly) : (s << 1)) & mask;
    }
    left -= uint64_t(nb);
  }
  return tag;
}

uint64_t ev_tag(const BitVec& message, const EvDescriptor& d) {
  return ev_tag_width(message, d.poly, d.state, 64);
}

// ---------------------------------------------------------------------------
// Distributed decoding
// ---------------------------------------------------------------------------

DistributedDecodeResult run_distributed_decode(const std::string& label, const LdpcCode& code,
                                               const Holdings& held, const BitVec& sy_zb,
                                               double qber_prior, Net& net, PhaseEngine& eng) {
  const uint64_t bl = code.block_len(), sl = code.syndrome_len();
  uint64_t len = 0;
  for (UnitId u : kAllCpA)
    for (int k = 1; k <= 4; ++k) {
      if (!unit_holds_share(u, k)) continue;
      const BitVec& s = held[int(u)][k - 1];
      if (len == 0) len = s.size();
      if (s.size() != len)
        throw std::invalid_argument("run_distributed_decode: share length mismatch");
    }
  if (len == 0 || len % bl != 0)
    throw std::invalid_argument("run_distributed_decode: shares not whole blocks");
  const uint64_t nblocks = len / bl;
  if (sy_zb.size() != nblocks * sl)
    throw std::invalid_argument("run_distributed_decode: sy_zb length mismatch");

  auto share_syndrome = [&](const BitVec& s) {
    BitVec out;
    for (uint64_t b = 0; b < nblocks; ++b) out.append(code.syndrome(s.slice(b * bl, bl)));
    return out;
  };

  // Each unit publishes, to the one unit missing share k, the syndrome of its
  // own copy of that share; majority vote over the three copies masks a liar.
  std::vector<std::pair<UnitId, std::function<void()>>> work;
  for (UnitId u : kAllCpA)
    work.emplace_back(u, [&, u] {
      for (int k = 1; k <= 4; ++k) {
        if (!unit_holds_share(u, k)) continue;
        Message m;
        m.sender = u;
        m.receiver = cp_from_index(k);
        m.tag = label + ".sy.S" + char('0' + k) + "." + unit_name(u);
        m.payload = share_syndrome(held[int(u)][k - 1]);
        net.send(std::move(m));
      }
    });
  eng.phase(std::move(work));

  DistributedDecodeResult out;
  work.clear();
  for (UnitId u : kAllCpA)
    work.emplace_back(u, [&, u] {
      int k = cp_index(u);
      std::vector<BitVec> copies;
      for (UnitId v : sigma(k)) {
        std::optional<BitVec> got =
            net.expect(u, v, label + ".sy.S" + char('0' + k) + "." + unit_name(v));
        copies.push_back(got ? std::move(*got) : BitVec());
      }
      std::optional<BitVec> voted = majority_vote(copies);
      if (!voted) throw ProtocolAbort(AbortCause::MvFailure);
      net.log().note_event(std::string(unit_name(u)) + " mv " + label + ".sy.S" + char('0' + k) +
                           " digest=" + std::to_string(voted->digest()));

      // W = xor of the shares this unit holds differs from the full key by
      // exactly the missing share, so decoding W against
      // sy(missing share) xor sy(Z_B) recovers W xor e and never the key.
      BitVec w = zeros(len);
      for (int j = 1; j <= 4; ++j)
        if (unit_holds_share(u, j)) w.xor_with(held[int(u)][j - 1]);
      BitVec target = std::move(*voted);
      if (target.size() != sy_zb.size()) throw ProtocolAbort(AbortCause::MvFailure);
      target.xor_with(sy_zb);

      BitVec err;
      for (uint64_t b = 0; b < nblocks; ++b) {
        DecodeResult dr =
            decode(code, w.slice(b * bl, bl), target.slice(b * sl, sl), qber_prior);
        dr.word.xor_with(w.slice(b * bl, bl));
        err.append(dr.word);
        out.converged[int(u)].push_back(dr.converged ? 1 : 0);
      }
      out.error[int(u)] = std::move(err);
    });
  eng.phase(std::move(work));
  return out;
}

}  // namespace qkd
