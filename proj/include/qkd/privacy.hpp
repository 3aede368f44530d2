#pragma once
// Privacy amplification and the authentication subsystem.
//
// PA side: final keys come from a fully random Toeplitz hash. The l x n
// matrix is defined by n+l-1 seed bits with constant diagonals,
//   T[i][j] = seed[(n-1) + i - j],
// so output bit i is the coefficient of z^(n-1+i) in the GF(2) polynomial
// product seed(z) * input(z). The production path evaluates exactly that
// middle product with a number-theoretic transform (sub-quadratic, feasible
// at the full session scale of n ~ 2.2e8); a word-sliced naive product backs
// the bit-exactness oracle. Hashing is GF(2)-linear in the input for a fixed
// seed, so units can hash shares and xor the results.
//
// Auth side: messages on authenticated-class links carry 64-bit LFSR-Toeplitz
// tags, one-time-pad encrypted with pre-shared key bits. Encrypting the tag
// is the only per-message consumption (64 bits); the 128 descriptor bits are
// reserved once per link and remain reusable. The error budget composes
// additively into the reported security parameters.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qkd/bits.hpp"
#include "qkd/proto.hpp"
#include "qkd/reconciliation.hpp"

namespace qkd {

// ---------------------------------------------------------------------------
// Toeplitz privacy amplification
// ---------------------------------------------------------------------------

// Seed cost of an l x n Toeplitz matrix: one bit per distinct diagonal.
constexpr uint64_t pa_seed_size(uint64_t n, uint64_t l) { return n + l - 1; }

struct PaSpec {
  uint64_t n = 0;  // input length, bits
  uint64_t l = 0;  // output length, bits
  BitVec seed;     // exactly n + l - 1 bits

  // Throws std::invalid_argument unless n, l >= 1 and the seed has the right
  // length. Protocol specs additionally keep l a multiple of 32 (final_length
  // guarantees it); the hash itself works for any l, which the micro-size
  // oracle and uniformity tests rely on.
  void validate() const;
};

// Assembles a spec from jointly generated randomness (an RBS output of
// exactly pa_seed_size(n, l) bits); validates.
PaSpec make_pa_spec(uint64_t n, uint64_t l, BitVec rbs_bits);

// Production hash: picks the naive path for small sizes, the transform path
// otherwise. Both are bit-exact implementations of the same matrix product.
BitVec pa_hash(const BitVec& input, const PaSpec& spec);
// Word-sliced O(n*l) reference product.
BitVec pa_hash_naive(const BitVec& input, const PaSpec& spec);
// Chunked NTT middle product; valid at every size, required at session scale.
BitVec pa_hash_ntt(const BitVec& input, const PaSpec& spec);

// Pairwise collision statistics of the Toeplitz family at micro sizes
// (n <= 16, l <= 8): hashes two fixed inputs under n_seeds uniformly drawn
// seeds. For distinct inputs the family is xor-universal, so the collision
// fraction concentrates on exactly 2^-l.
struct PaProbe {
  uint64_t n_seeds = 0;
  uint64_t collisions = 0;
  double expected = 0;  // 2^-l for distinct inputs, 1 for identical
  double fraction() const { return n_seeds ? double(collisions) / double(n_seeds) : 0.0; }
  double sigma() const;  // binomial std dev of fraction at the expected rate
};
PaProbe pa_uniformity_probe(const BitVec& x, const BitVec& y, uint64_t l, uint64_t n_seeds,
                            uint64_t seed);

// ---------------------------------------------------------------------------
// Authentication key pools
// ---------------------------------------------------------------------------

// Pre-shared secret bits for one link. Layout: the first 128 bits back the
// LFSR-Toeplitz descriptor (reserved once, reusable for arbitrarily many
// messages, never counted as consumed); every message then burns the next 64
// bits as the one-time pad for its tag.
class AuthKeyPool {
 public:
  static constexpr uint64_t kDescriptorBits = 128;
  static constexpr uint64_t kTagBits = 64;

  AuthKeyPool() = default;
  // Locally expands `seed` into `size_bits` pool bits (stand-in for the
  // pre-shared keys the protocol assumes; both endpoints construct the same
  // pool from the scenario config). size_bits >= kDescriptorBits.
  AuthKeyPool(uint64_t size_bits, uint64_t seed);

  uint64_t size() const { return bits_.size(); }
  uint64_t consumed() const { return consumed_; }
  uint64_t sends() const { return sends_; }
  const EvDescriptor& descriptor() const { return desc_; }

  // Pad for the next outgoing message; consumes kTagBits. nullopt = exhausted.
  std::optional<std::pair<uint64_t, uint64_t>> draw();  // (sequence, pad)
  // Pad for a given sequence number (verification side); consumes nothing.
  std::optional<uint64_t> pad_at(uint64_t seq) const;

 private:
  BitVec bits_;
  EvDescriptor desc_;
  uint64_t consumed_ = 0, sends_ = 0;
};

// AuthProvider backed by one pool per undirected link. attach() tags and
// encrypts outgoing authenticated-class messages (false = pool exhausted,
// which Net converts into the PoolExhausted abort); verify() re-derives the
// tag on the receive side and accepts only an unmodified message. The tag
// covers sender, receiver, protocol tag, note, sequence number, and payload.
class LinkAuth : public AuthProvider {
 public:
  void provision(UnitId a, UnitId b, uint64_t pool_bits, uint64_t seed);

  bool attach(Message& m) override;
  bool verify(const Message& m) override;

  const AuthKeyPool* pool(UnitId a, UnitId b) const;
  uint64_t total_consumed() const;
  uint64_t total_sends() const;
  // Payload lengths of every authenticated send, in order (fed to
  // auth_error_budget and the run report).
  const std::vector<uint64_t>& message_lengths() const { return lengths_; }
  std::string report() const;

 private:
  std::map<std::pair<int, int>, AuthKeyPool> pools_;
  std::vector<uint64_t> lengths_;
};

// ---------------------------------------------------------------------------
// Authentication error budget
// ---------------------------------------------------------------------------

// Forgery-probability prefactor: Tightened collapses the per-message bound
// |m|*2^(2-t) ~ |m|*2^-62 (the default, matching the recorded session
// accounting); Loose keeps the conservative 3*|m|*2^(1-t).
enum class AuthPrefactor { Tightened, Loose };

// Sum over messages of the per-message forgery bound at tag width t_ev;
// empty list -> 0. Requires t_ev = 64 (the committed tag width).
double auth_error_budget(const std::vector<uint64_t>& message_bits, int t_ev,
                         AuthPrefactor mode = AuthPrefactor::Tightened);

// ---------------------------------------------------------------------------
// Run report composition
// ---------------------------------------------------------------------------

// The quantities a finished run publishes. The reported epsilons compose
// additively: eps_sec = eps_sec_hat + eps_au, eps_cor = eps_cor_hat + eps_au.
struct KeyReport {
  int64_t l1 = 0, l2 = 0;  // per-pair lengths
  int64_t l = 0;           // final length (multiple of 32)
  uint64_t l_au = 0;       // authentication key cost, bits
  uint64_t pool_consumed = 0;
  double eps_sec_hat = 0, eps_cor_hat = 0, eps_au = 0;
  double eps_sec() const { return eps_sec_hat + eps_au; }
  double eps_cor() const { return eps_cor_hat + eps_au; }
  std::string format() const;  // structured text block
};

}  // namespace qkd
