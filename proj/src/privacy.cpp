#include "qkd/privacy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "qkd/rng.hpp"

namespace qkd {

// ---------------------------------------------------------------------------
// Modular arithmetic for the transform path
// ---------------------------------------------------------------------------
//
// The Toeplitz product is the middle slice of a GF(2) polynomial product.
// Over the integers the product of two 0/1 coefficient sequences has
// coefficients bounded by the shorter operand's bit count, so an exact
// integer convolution modulo a single NTT-friendly prime recovers them as
// long as that bound stays below the prime; the GF(2) answer is their
// parity. Operands are cut into 2^24-bit chunks, chunk pairs are grouped by
// output offset, and only the groups overlapping the requested window are
// transformed, which keeps the session-scale product (n ~ 2.2e8) at a few
// dozen length-2^25 transforms and well under a gigabyte of scratch.

namespace {

constexpr uint32_t kP = 3221225473u;          // 3 * 2^30 + 1, NTT-friendly
constexpr uint32_t kRootP = 5;                // primitive root of kP
constexpr uint64_t kBarrett = 5726623059ull;  // floor(2^64 / kP)
constexpr uint64_t kChunkBits = uint64_t(1) << 24;

inline uint32_t mulmod(uint32_t a, uint32_t b) {
  uint64_t r = uint64_t(a) * b;
  uint64_t q = uint64_t((unsigned __int128)r * kBarrett >> 64);
  r -= q * kP;
  while (r >= kP) r -= kP;
  return uint32_t(r);
}

uint32_t mod_pow(uint32_t b, uint64_t e) {
  uint32_t r = 1;
  for (; e; e >>= 1, b = mulmod(b, b))
    if (e & 1) r = mulmod(r, b);
  return r;
}

// Twiddle factor a*w mod kP with the precomputed scaled inverse wp =
// floor(w * 2^32 / kP): two multiplies, no division (Shoup's trick).
inline uint32_t mul_shoup(uint32_t a, uint32_t w, uint32_t wp) {
  uint32_t q = uint32_t((uint64_t(a) * wp) >> 32);
  uint64_t r = uint64_t(a) * w - uint64_t(q) * kP;
  return uint32_t(r >= kP ? r - kP : r);
}

// Roots laid out in the self-similar bit-reversed order (rt[2i] = rt[i],
// rt[2i+1] = rt[i] * w_2k), which serves every stage of the transform with a
// single table. Grown on demand; thread_local so concurrent units never race
// on the growth reallocation.
struct Twiddles {
  std::vector<uint32_t> rt{1, 1}, rtp;

  void ensure(size_t n) {
    size_t k = rt.size();
    if (k >= n && rtp.size() >= n) return;
    if (k < n) {
      rt.resize(n);
      for (; k < n; k *= 2) {
        uint32_t z = mod_pow(kRootP, (kP - 1) / uint32_t(2 * k));
        for (size_t i = k; i < 2 * k; ++i)
          rt[i] = (i & 1) ? mulmod(rt[i / 2], z) : rt[i / 2];
      }
    }
    size_t old = rtp.size();
    rtp.resize(rt.size());
    for (size_t i = old; i < rtp.size(); ++i)
      rtp[i] = uint32_t((uint64_t(rt[i]) << 32) / kP);
  }
};

Twiddles& twiddles() {
  thread_local Twiddles tw;
  return tw;
}

void ntt(uint32_t* a, size_t n, const Twiddles& tw) {
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t k = 1; k < n; k <<= 1)
    for (size_t i = 0; i < n; i += 2 * k)
      for (size_t j = 0; j < k; ++j) {
        uint32_t z = mul_shoup(a[i + j + k], tw.rt[j + k], tw.rtp[j + k]);
        uint32_t u = a[i + j];
        a[i + j + k] = u >= z ? u - z : uint32_t(uint64_t(u) + kP - z);
        uint64_t s = uint64_t(u) + z;
        a[i + j] = uint32_t(s >= kP ? s - kP : s);
      }
}

void intt(uint32_t* a, size_t n, const Twiddles& tw) {
  std::reverse(a + 1, a + n);
  ntt(a, n, tw);
  uint32_t ninv = mod_pow(uint32_t(n % kP), kP - 2);
  for (size_t i = 0; i < n; ++i) a[i] = mulmod(a[i], ninv);
}

// buf[0..count) = bits [base, base+count) of v (zero beyond the end), rest 0.
void load_bits(const BitVec& v, uint64_t base, uint64_t count, uint32_t* buf, size_t n) {
  uint64_t avail = base < v.size() ? std::min(count, v.size() - base) : 0;
  for (uint64_t d = 0; d < avail; ++d) buf[d] = v.get(base + d);
  std::fill(buf + avail, buf + n, 0);
}

// Bits [offset, offset+out_len) of the GF(2) product s(z) * x(z).
BitVec gf2_middle_product(const BitVec& s, const BitVec& x, uint64_t offset, uint64_t out_len) {
  BitVec out(out_len);
  if (s.empty() || x.empty() || out_len == 0) return out;

  uint64_t c = 64;
  while (c < std::max(s.size(), x.size()) && c < kChunkBits) c <<= 1;
  const size_t t = size_t(2 * c);
  Twiddles& tw = twiddles();
  tw.ensure(t);

  const uint64_t nsc = (s.size() + c - 1) / c, nxc = (x.size() + c - 1) / c;
  // Chunk-pair group K holds product coefficients [K*c, K*c + 2c - 2]; only
  // groups overlapping the output window are evaluated.
  uint64_t k_begin = offset >= 2 * c - 1 ? (offset - (2 * c - 2) + c - 1) / c : 0;
  uint64_t k_end = std::min(nsc + nxc - 2, (offset + out_len - 1) / c);

  std::vector<uint32_t> acc(t), ba(t), bb(t);
  for (uint64_t k = k_begin; k <= k_end; ++k) {
    uint64_t ilo = k >= nxc - 1 ? k - (nxc - 1) : 0;
    uint64_t ihi = std::min(k, nsc - 1);
    if (ilo > ihi) continue;
    // Exactness: every integer coefficient of the group is at most
    // (#pairs) * c and must stay below the modulus.
    if ((ihi - ilo + 1) * c >= kP)
      throw std::length_error("pa_hash: operands too large for the exact transform");
    std::fill(acc.begin(), acc.end(), 0);
    for (uint64_t i = ilo; i <= ihi; ++i) {
      load_bits(s, i * c, c, ba.data(), t);
      load_bits(x, (k - i) * c, c, bb.data(), t);
      ntt(ba.data(), t, tw);
      ntt(bb.data(), t, tw);
      for (size_t d = 0; d < t; ++d) {
        uint64_t v = uint64_t(acc[d]) + mulmod(ba[d], bb[d]);
        acc[d] = uint32_t(v >= kP ? v - kP : v);
      }
    }
    intt(acc.data(), t, tw);
    uint64_t lo = std::max(offset, k * c);
    uint64_t hi = std::min(offset + out_len - 1, k * c + 2 * c - 2);
    for (uint64_t pos = lo; pos <= hi; ++pos)
      if (acc[pos - k * c] & 1) out.flip(pos - offset);  // groups overlap; parity adds
  }
  return out;
}

void check_input(const BitVec& input, const PaSpec& spec) {
  spec.validate();
  if (input.size() != spec.n) throw std::invalid_argument("pa_hash: input length != spec.n");
}

}  // namespace

// ---------------------------------------------------------------------------
// Privacy amplification
// ---------------------------------------------------------------------------

void PaSpec::validate() const {
  if (n == 0 || l == 0) throw std::invalid_argument("PaSpec: n and l must be positive");
  if (seed.size() != pa_seed_size(n, l))
    throw std::invalid_argument("PaSpec: seed must hold exactly n + l - 1 bits");
}

PaSpec make_pa_spec(uint64_t n, uint64_t l, BitVec rbs_bits) {
  PaSpec spec{n, l, std::move(rbs_bits)};
  spec.validate();
  return spec;
}

BitVec pa_hash_naive(const BitVec& input, const PaSpec& spec) {
  check_input(input, spec);
  // Output bit i is the dot product of the input with the reversed seed at
  // offset l-1-i: rev[m] = seed[n+l-2-m] turns the constant-diagonal walk
  // into a forward sliding window, evaluated 64 bits at a time.
  BitVec rev(spec.seed.size());
  for (uint64_t m = 0; m < rev.size(); ++m)
    if (spec.seed.get(rev.size() - 1 - m)) rev.set(m, true);
  auto rw = rev.words();
  auto xw = input.words();
  auto rev_word = [&](uint64_t widx) -> uint64_t { return widx < rw.size() ? rw[widx] : 0; };

  BitVec out(spec.l);
  for (uint64_t i = 0; i < spec.l; ++i) {
    uint64_t off = spec.l - 1 - i;
    uint64_t q = off >> 6;
    int sh = int(off & 63);
    uint64_t folded = 0;
    for (size_t w = 0; w < xw.size(); ++w) {
      uint64_t window = rev_word(q + w) >> sh;
      if (sh) window |= rev_word(q + w + 1) << (64 - sh);
      folded ^= xw[w] & window;
    }
    if (__builtin_popcountll(folded) & 1) out.set(i, true);
  }
  return out;
}

BitVec pa_hash_ntt(const BitVec& input, const PaSpec& spec) {
  check_input(input, spec);
  return gf2_middle_product(spec.seed, input, spec.n - 1, spec.l);
}

BitVec pa_hash(const BitVec& input, const PaSpec& spec) {
  check_input(input, spec);
  // Both paths are bit-exact; the naive product wins below roughly a million
  // word operations, the transform wins above.
  if ((unsigned __int128)(spec.n) * spec.l <= (uint64_t(1) << 26)) return pa_hash_naive(input, spec);
  return pa_hash_ntt(input, spec);
}

double PaProbe::sigma() const {
  if (n_seeds == 0) return 0;
  return std::sqrt(expected * (1.0 - expected) / double(n_seeds));
}

PaProbe pa_uniformity_probe(const BitVec& x, const BitVec& y, uint64_t l, uint64_t n_seeds,
                            uint64_t seed) {
  if (x.size() != y.size() || x.empty())
    throw std::invalid_argument("pa_uniformity_probe: inputs must share a positive length");
  if (x.size() > 16 || l == 0 || l > 8)
    throw std::invalid_argument("pa_uniformity_probe: micro sizes only (n <= 16, l <= 8)");
  PaProbe probe;
  probe.n_seeds = n_seeds;
  probe.expected = x == y ? 1.0 : std::ldexp(1.0, -int(l));
  CounterRng rng(seed, 0);
  for (uint64_t i = 0; i < n_seeds; ++i) {
    PaSpec spec{x.size(), l, rng.random_bits(pa_seed_size(x.size(), l))};
    probe.collisions += pa_hash_naive(x, spec) == pa_hash_naive(y, spec);
  }
  return probe;
}

// ---------------------------------------------------------------------------
// Authentication key pools
// ---------------------------------------------------------------------------

AuthKeyPool::AuthKeyPool(uint64_t size_bits, uint64_t seed) {
  if (size_bits < kDescriptorBits)
    throw std::invalid_argument("AuthKeyPool: need at least the descriptor bits");
  CounterRng rng(seed, 40);  // stream 40: pre-shared authentication pools
  bits_ = rng.random_bits(size_bits);
  desc_ = derive_ev_descriptor(bits_.slice(0, kDescriptorBits));
}

std::optional<std::pair<uint64_t, uint64_t>> AuthKeyPool::draw() {
  std::optional<uint64_t> pad = pad_at(sends_);
  if (!pad) return std::nullopt;
  uint64_t seq = sends_++;
  consumed_ += kTagBits;
  return std::make_pair(seq, *pad);
}

std::optional<uint64_t> AuthKeyPool::pad_at(uint64_t seq) const {
  if (kDescriptorBits + kTagBits * (seq + 1) > bits_.size()) return std::nullopt;
  return bits_.word(2 + seq);  // pads are word-aligned after the descriptor
}

// ---------------------------------------------------------------------------
// Link authentication provider
// ---------------------------------------------------------------------------

namespace {

std::pair<int, int> link_key(UnitId a, UnitId b) {
  return {std::min(int(a), int(b)), std::max(int(a), int(b))};
}

// The tag covers routing, protocol tag, note, sequence number, and payload,
// so splicing any of them invalidates the message.
uint64_t message_tag(const Message& m, const EvDescriptor& d) {
  std::vector<uint8_t> head;
  head.push_back(uint8_t(m.sender));
  head.push_back(uint8_t(m.receiver));
  for (int i = 0; i < 8; ++i) head.push_back(uint8_t(m.auth_seq >> (8 * i)));
  for (int i = 0; i < 4; ++i) head.push_back(uint8_t(uint32_t(m.tag.size()) >> (8 * i)));
  head.insert(head.end(), m.tag.begin(), m.tag.end());
  for (int i = 0; i < 4; ++i) head.push_back(uint8_t(uint32_t(m.note.size()) >> (8 * i)));
  head.insert(head.end(), m.note.begin(), m.note.end());
  for (int i = 0; i < 8; ++i) head.push_back(uint8_t(m.payload.size() >> (8 * i)));
  BitVec bits = BitVec::from_bytes(head, head.size() * 8);
  bits.append(m.payload);
  return ev_tag(bits, d);
}

}  // namespace

void LinkAuth::provision(UnitId a, UnitId b, uint64_t pool_bits, uint64_t seed) {
  pools_[link_key(a, b)] = AuthKeyPool(pool_bits, seed);
}

bool LinkAuth::attach(Message& m) {
  auto it = pools_.find(link_key(m.sender, m.receiver));
  if (it == pools_.end())
    throw std::logic_error(std::string("LinkAuth: no pool provisioned for ") +
                           unit_name(m.sender) + "-" + unit_name(m.receiver));
  std::optional<std::pair<uint64_t, uint64_t>> drawn = it->second.draw();
  if (!drawn) return false;  // exhausted; Net turns this into the abort
  m.auth_seq = drawn->first;
  m.auth_tag = message_tag(m, it->second.descriptor()) ^ drawn->second;
  m.has_auth = true;
  lengths_.push_back(m.payload.size());
  return true;
}

bool LinkAuth::verify(const Message& m) {
  auto it = pools_.find(link_key(m.sender, m.receiver));
  if (it == pools_.end())
    throw std::logic_error(std::string("LinkAuth: no pool provisioned for ") +
                           unit_name(m.sender) + "-" + unit_name(m.receiver));
  if (!m.has_auth) return false;
  std::optional<uint64_t> pad = it->second.pad_at(m.auth_seq);
  if (!pad) return false;
  return m.auth_tag == (message_tag(m, it->second.descriptor()) ^ *pad);
}

const AuthKeyPool* LinkAuth::pool(UnitId a, UnitId b) const {
  auto it = pools_.find(link_key(a, b));
  return it == pools_.end() ? nullptr : &it->second;
}

uint64_t LinkAuth::total_consumed() const {
  uint64_t n = 0;
  for (const auto& [key, pool] : pools_) n += pool.consumed();
  return n;
}

uint64_t LinkAuth::total_sends() const {
  uint64_t n = 0;
  for (const auto& [key, pool] : pools_) n += pool.sends();
  return n;
}

std::string LinkAuth::report() const {
  std::string out;
  char line[160];
  for (const auto& [key, pool] : pools_) {
    std::snprintf(line, sizeof line,
                  "auth-link %s-%s pool %llu consumed %llu sends %llu construction %llu reusable\n",
                  unit_name(UnitId(key.first)), unit_name(UnitId(key.second)),
                  (unsigned long long)pool.size(), (unsigned long long)pool.consumed(),
                  (unsigned long long)pool.sends(),
                  (unsigned long long)AuthKeyPool::kDescriptorBits);
    out += line;
  }
  std::snprintf(line, sizeof line, "auth-total consumed %llu sends %llu\n",
                (unsigned long long)total_consumed(), (unsigned long long)total_sends());
  out += line;
  return out;
}

// ---------------------------------------------------------------------------
// Error budget and report
// ---------------------------------------------------------------------------

double auth_error_budget(const std::vector<uint64_t>& message_bits, int t_ev, AuthPrefactor mode) {
  if (t_ev != 64) throw std::invalid_argument("auth_error_budget: tag width is fixed at 64");
  double sum = 0;
  for (uint64_t bits : message_bits) sum += double(bits);
  return mode == AuthPrefactor::Tightened ? std::ldexp(sum, -62) : 3.0 * std::ldexp(sum, -63);
}

std::string KeyReport::format() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "key-report\n"
                "l1 %lld\nl2 %lld\nl %lld\n"
                "l-au %llu\npool-consumed %llu\n"
                "eps-sec-hat %.6g\neps-cor-hat %.6g\neps-au %.6g\n"
                "eps-sec %.6g\neps-cor %.6g\n",
                (long long)l1, (long long)l2, (long long)l, (unsigned long long)l_au,
                (unsigned long long)pool_consumed, eps_sec_hat, eps_cor_hat, eps_au, eps_sec(),
                eps_cor());
  return buf;
}

}  // namespace qkd
