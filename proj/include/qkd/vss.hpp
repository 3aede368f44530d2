#pragma once
// Secure-multiparty toolbox for the four-CP-unit setting with at most one
// corrupted unit: additive 4-share secret sharing with the "A_k misses share
// k" holder map, the Share protocol with pairwise consistency checks and
// complaint/broadcast fallback, Reconstruct via majority voting over the
// three holders of each share, the 3-step random-bit-string generation
// protocol, and bytewise majority voting.
//
// All misbehavior is injected from outside through Net tamper hooks on the
// corrupt party's outgoing edges; the protocol bodies below are honest code
// that tolerates missing, inconsistent, or garbage messages as prescribed.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "qkd/bits.hpp"
#include "qkd/proto.hpp"

namespace qkd {

// S_1..S_4 with S_1 xor ... xor S_4 = secret; unit A_k misses share k.
struct ShareSet {
  std::array<BitVec, 4> s;

  // The dealer's three randomness strings fix S_1..S_3; S_4 closes the XOR.
  static ShareSet deal(const BitVec& secret, const std::array<BitVec, 3>& rnd);
  static ShareSet deal_seeded(const BitVec& secret, uint64_t seed);
  BitVec secret() const;
  uint64_t length() const { return s[0].size(); }
};

constexpr bool unit_holds_share(UnitId u, int k) { return is_cp_a(u) && cp_index(u) != k; }
// sigma_k: the three CP units holding share k (1-based share index).
std::vector<UnitId> sigma(int k);

// Bytewise strict-majority vote over an odd number (>=3) of copies; the bit
// length itself is voted first and minority-length copies count as disagreeing
// everywhere. nullopt = no strict majority somewhere (protocol abort signal).
std::optional<BitVec> majority_vote(const std::vector<BitVec>& copies);

// Per-unit holdings after a Share run: held[u][k-1] is CP unit u's copy of
// share k (empty only if never delivered and never re-broadcast; a defaulted
// null string is stored as an all-zero string of the declared length).
using Holdings = std::array<std::array<BitVec, 4>, 4>;

struct ShareOutcome {
  ShareSet dealt;              // the dealer-side ground truth
  Holdings held;
  std::vector<std::string> complaints;  // disputed subjects, deduplicated
};

// SM-toolbox Share protocol run by `dealer` (a QKD module) for one secret.
// `label` prefixes every message tag (e.g. "share.j1"); `declared_len` is the
// public session length used for the null-string default.
ShareOutcome run_share(UnitId dealer, const std::string& label, const BitVec& secret,
                       uint64_t declared_len, uint64_t dealer_seed, Net& net, PhaseEngine& eng);

// SM-toolbox Reconstruct: every unit sends its copies of the shares (here:
// arbitrary per-unit images of them, e.g. syndromes) to the unit missing each
// one; each A_k majority-votes its missing share and XORs all four. Returns
// the per-unit reconstruction (index = CP unit). Throws
// ProtocolAbort{MvFailure} if some vote has no strict majority.
std::array<BitVec, 4> run_reconstruct(const std::string& label, const Holdings& held, Net& net,
                                      PhaseEngine& eng);

// SM-toolbox RBS generation: A1/A2 draw R_1/R_2, A3 returns R = R_1 xor R_2,
// cross-checks with complaint/broadcast fallback and step-3 repetition, final
// hand-off to A4 by majority vote. Returns each unit's view of R.
struct RbsOutcome {
  std::array<BitVec, 4> r;
  int retries = 0;  // extra cross-check rounds taken
};
RbsOutcome run_rbs(const std::string& label, uint64_t length, uint64_t session_seed, Net& net,
                   PhaseEngine& eng);

}  // namespace qkd
