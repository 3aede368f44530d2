// Information reconciliation: byte permutation, LDPC syndromes over 2^16-bit
// blocks, log-likelihood belief-propagation decoding (central and distributed
// across Alice's units), and LFSR-Toeplitz error-verification tags.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "qkd/bits.hpp"
#include "qkd/proto.hpp"
#include "qkd/vss.hpp"

namespace qkd {

// ---------------------------------------------------------------------------
// LDPC code instance
// ---------------------------------------------------------------------------

// Sparse parity structure for one committed code instance. Blocks are 2^16
// bits at rate 0.81: ceil(0.19 * 65536) = 12452 parity checks, and the
// syndrome is padded with zero bits to the next whole byte (12456 bits), so
// syndrome lengths always serialize byte-aligned.
//
// The instance is built by progressive edge growth from a fixed node-degree
// profile (see profile()): each edge prefers a check the variable cannot yet
// reach, degree-2 variables are placed as a forest over the checks (no cycle
// consists purely of degree-2 variables), and every placement rejects reused
// check pairs, so the factor graph has no 4-cycles. Construction is
// deterministic in the seed; the committed fixture and its digest are pinned
// by tests.
class LdpcCode {
 public:
  static constexpr uint64_t kBlockLen = 65536;
  static constexpr uint64_t kChecks = 12452;
  static constexpr uint64_t kSyndromeLen = 12456;

  // Node-degree profile: {degree, variable count} in construction order.
  static const std::vector<std::pair<int, uint32_t>>& profile();

  static LdpcCode generate(uint64_t seed);
  // Same construction with an arbitrary profile (counts must sum to the
  // block length); the committed instance uses profile().
  static LdpcCode generate_with(const std::vector<std::pair<int, uint32_t>>& prof, uint64_t seed);
  static LdpcCode load(const std::string& path);
  void save(const std::string& path) const;

  uint64_t block_len() const { return kBlockLen; }
  uint64_t n_checks() const { return kChecks; }
  uint64_t syndrome_len() const { return kSyndromeLen; }
  uint64_t n_edges() const { return var_chk_.size(); }

  // Checks adjacent to variable v, ascending.
  std::pair<const uint32_t*, const uint32_t*> var_checks(uint32_t v) const {
    return {var_chk_.data() + var_off_[v], var_chk_.data() + var_off_[v + 1]};
  }
  std::pair<const uint32_t*, const uint32_t*> check_vars(uint32_t c) const {
    return {chk_var_.data() + chk_off_[c], chk_var_.data() + chk_off_[c + 1]};
  }

  // Edge ids (positions in the variable-major edge array) of one check's
  // edges; lets the decoder keep its message arrays variable-major.
  std::pair<const uint32_t*, const uint32_t*> check_edges(uint32_t c) const {
    return {chk_edge_.data() + chk_off_[c], chk_edge_.data() + chk_off_[c + 1]};
  }
  std::pair<uint32_t, uint32_t> var_edge_span(uint32_t v) const {
    return {var_off_[v], var_off_[v + 1]};
  }

  // Order-sensitive structural digest (pins the committed instance).
  uint64_t digest() const;

  // Parity image of one block: kSyndromeLen bits, the last four always zero.
  BitVec syndrome(const BitVec& block) const;

 private:
  void build_check_csr();

  std::vector<uint32_t> var_off_, var_chk_;  // CSR variable -> checks
  std::vector<uint32_t> chk_off_, chk_var_;  // CSR check -> variables
  std::vector<uint32_t> chk_edge_;           // check-major -> variable-major edge id
};

// Seed of the committed instance (data/ldpc_65536.txt).
inline constexpr uint64_t kLdpcSeed = 20240901;

// ---------------------------------------------------------------------------
// Belief-propagation decoding
// ---------------------------------------------------------------------------

struct DecodeResult {
  BitVec word;     // corrected block (valid only when converged)
  bool converged = false;
  int iterations = 0;  // iterations actually run
};

// Finds the word with the target syndrome closest to `noisy`, assuming i.i.d.
// bit flips at rate qber_prior. Sum-product message passing on
// log-likelihood ratios, flooding schedule, early exit once the hard
// decision matches the target syndrome. Internally works on the error
// pattern (syndrome decoding), so convergence depends only on
// syndrome(noisy) xor target -- every holder of a share-displaced copy of
// the same channel output solves the identical problem and gets the
// identical answer. Deterministic for a fixed code, input, and cap.
DecodeResult decode(const LdpcCode& code, const BitVec& noisy, const BitVec& target_syndrome,
                    double qber_prior, int max_iters = 60);

// ---------------------------------------------------------------------------
// Byte permutation
// ---------------------------------------------------------------------------

// Deterministic public byte permutation (Fisher-Yates from a counter RNG);
// the same seed and length always give the same table, so "known a priori"
// costs one committed constant.
std::vector<uint32_t> make_byte_permutation(uint64_t n_bytes, uint64_t seed);

// out byte i = in byte perm[i]; input length must be a whole number of bytes
// (zero-padding to block size happens before permutation).
BitVec permute_bytes(const BitVec& in, const std::vector<uint32_t>& perm);
BitVec unpermute_bytes(const BitVec& in, const std::vector<uint32_t>& perm);

// Zero-pad up to the next multiple of block_len (identity if already there).
BitVec pad_to_blocks(const BitVec& in, uint64_t block_len);

inline constexpr uint64_t kPermutationSeed = 20240902;

// ---------------------------------------------------------------------------
// LFSR-Toeplitz error-verification tags
// ---------------------------------------------------------------------------

// 64-bit tags from the LFSR-based Toeplitz family. Descriptor = 128 bits:
//   bits 0..63   connection polynomial p(x) = x^64 + sum_{i<64} c_i x^i
//                (bit i of `poly` is c_i; p must be irreducible),
//   bits 64..127 initial state s (bit i = coefficient of x^i).
// tag(m) = xor over set message bits j of (s * x^j mod p); equivalently
// s(x) * m(x) mod p(x), so tags are GF(2)-linear in the message and the
// per-share tags of an additive sharing xor to the tag of the secret.
struct EvDescriptor {
  uint64_t poly = 0;
  uint64_t state = 0;
};

// True iff x^t + (low t coefficient bits) is irreducible over GF(2).
bool poly_irreducible(uint64_t low_coeffs, int degree = 64);

// Interprets 128 raw (e.g. jointly generated random) bits as a descriptor:
// the polynomial half is advanced to the first irreducible candidate
// (deterministic, so all units derive the same descriptor).
EvDescriptor derive_ev_descriptor(const BitVec& raw128);

// 64-bit tag; throws std::invalid_argument on an inadmissible descriptor.
uint64_t ev_tag(const BitVec& message, const EvDescriptor& d);

// Width-t variant backing the scaled-down exhaustive collision tests.
uint64_t ev_tag_width(const BitVec& message, uint64_t poly, uint64_t state, int degree);

// ---------------------------------------------------------------------------
// Distributed decoding across Alice's units
// ---------------------------------------------------------------------------

struct DistributedDecodeResult {
  // Per-unit error pattern (honest units agree bit for bit) and per-block
  // convergence flags from that unit's decoder.
  std::array<BitVec, 4> error;
  std::array<std::vector<uint8_t>, 4> converged;
};

// Each unit XORs the shares it holds, obtains its one missing syndrome share
// by request plus majority vote over the three other units' copies, combines
// them with sy(Z_B), and decodes. No unit ever materializes the full key;
// every honest unit recovers the central path's error pattern exactly.
// Shares in `held` and sy_zb must cover the same whole number of blocks.
// Throws ProtocolAbort{MvFailure} if a requested syndrome share has no
// majority.
DistributedDecodeResult run_distributed_decode(const std::string& label, const LdpcCode& code,
                                               const Holdings& held, const BitVec& sy_zb,
                                               double qber_prior, Net& net, PhaseEngine& eng);

}  // namespace qkd
