#pragma once
// Message-passing substrate for the multi-unit post-processing protocol:
// party identifiers, classical-channel classes, the attributed transcript
// (including complaint / broadcast-resolution pairing), pluggable transports
// (in-process bus and loopback socket hub with identical framing), adversary
// tamper hooks on outgoing edges, and a phase engine that drives per-unit
// thunks either in a seeded deterministic order or on real threads.

#include <array>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "qkd/bits.hpp"
#include "qkd/rng.hpp"

namespace qkd {

// CP units A1..A4 and B carry the protocol; the QKD modules and Charles
// appear as transcript actors for the data-distribution steps.
enum class UnitId : uint8_t {
  A1 = 0,
  A2 = 1,
  A3 = 2,
  A4 = 3,
  B = 4,
  QkdA1 = 5,
  QkdA2 = 6,
  QkdB = 7,
  Charles = 8,
};
constexpr int kNumParties = 9;

const char* unit_name(UnitId u);
std::optional<UnitId> unit_from_name(std::string_view s);

constexpr bool is_cp_a(UnitId u) { return int(u) <= int(UnitId::A4); }
// Additive-share index k in 1..4 associated with CP unit A_k.
constexpr int cp_index(UnitId u) { return int(u) + 1; }
constexpr UnitId cp_from_index(int k) { return UnitId(k - 1); }
// The fixed three-unit working set that performs estimation and talks to B.
inline constexpr std::array<UnitId, 3> kWorkingSet{UnitId::A1, UnitId::A2, UnitId::A3};
inline constexpr std::array<UnitId, 4> kAllCpA{UnitId::A1, UnitId::A2, UnitId::A3, UnitId::A4};

enum class ChannelClass : uint8_t { ShieldedInternal, Authenticated, Untrusted };

struct Message {
  UnitId sender{}, receiver{};
  bool is_broadcast = false;
  ChannelClass channel = ChannelClass::ShieldedInternal;
  std::string tag;   // protocol-step label, e.g. "share.j1.S2"
  std::string note;  // free-form annotation (complaint subjects etc.)
  BitVec payload;
  uint64_t auth_tag = 0;
  uint64_t auth_seq = 0;  // pool position of the tag pad (travels in the clear)
  bool has_auth = false;
};

// ---------------------------------------------------------------------------
// Abort vocabulary
// ---------------------------------------------------------------------------

enum class AbortCause { EstimationNegative, EvMismatch, MvFailure, PoolExhausted };
const char* abort_name(AbortCause c);

struct ProtocolAbort : std::runtime_error {
  AbortCause cause;
  explicit ProtocolAbort(AbortCause c)
      : std::runtime_error(std::string("protocol abort: ") + abort_name(c)), cause(c) {}
};

// ---------------------------------------------------------------------------
// Transcript
// ---------------------------------------------------------------------------

struct TranscriptEntry {
  uint64_t seq = 0;
  UnitId sender{}, receiver{};
  bool broadcast = false;
  ChannelClass channel = ChannelClass::ShieldedInternal;
  std::string tag, note;
  uint64_t payload_digest = 0;
  uint64_t size_bits = 0;
  bool auth_present = false;
  bool complaint = false;
};

// Ordered, attributed record of every wire event. Thread-safe appends; the
// digest is order-sensitive so deterministic schedules reproduce it exactly.
class Transcript {
 public:
  uint64_t record(TranscriptEntry e);
  void note_event(const std::string& text);  // unattributed marker entries

  std::vector<TranscriptEntry> entries() const;
  size_t size() const;
  uint64_t digest() const;

  // A run that ends in a protocol abort may leave complaints open (the
  // prescribed reaction to bad estimation is complain-then-abort), so the
  // abort is recorded and the dangling-complaint check is waived.
  void mark_abort(AbortCause c);
  std::optional<AbortCause> aborted() const;

  // Structural checks: every complaint is answered by exactly one broadcast
  // of the disputed item (matched on tag) unless the run aborted, every
  // authenticated-class message carries a tag. Throws std::runtime_error on
  // violation.
  void validate() const;

  void save(std::ostream& out) const;

 private:
  mutable std::mutex mu_;
  std::vector<TranscriptEntry> entries_;
  std::optional<AbortCause> aborted_;
};

// ---------------------------------------------------------------------------
// Transports
// ---------------------------------------------------------------------------

class Transport {
 public:
  virtual ~Transport() = default;
  // Put one already-processed message on the wire (fan-out for broadcasts is
  // done by the caller; every deliver targets a single receiver's inbox).
  virtual void deliver(const Message& m) = 0;
  // Take the first queued message matching (receiver, sender, tag); waits up
  // to the configured timeout for it (0 = only look at what already arrived).
  virtual std::optional<Message> fetch(UnitId receiver, UnitId sender, std::string_view tag) = 0;
  // Collect, without waiting, all queued messages for `receiver` whose tag
  // starts with `tag_prefix` (used to sweep complaints).
  virtual std::vector<Message> fetch_all(UnitId receiver, std::string_view tag_prefix) = 0;
  virtual void set_timeout_ms(int ms) = 0;
};

// In-process mailbox transport; fetch can block on a condition variable so
// the thread-scheduler mode works unchanged.
class BusTransport : public Transport {
 public:
  void deliver(const Message& m) override;
  std::optional<Message> fetch(UnitId receiver, UnitId sender, std::string_view tag) override;
  std::vector<Message> fetch_all(UnitId receiver, std::string_view tag_prefix) override;
  void set_timeout_ms(int ms) override { timeout_ms_ = ms; }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::array<std::vector<Message>, kNumParties> box_;
  int timeout_ms_ = 0;
};

// Loopback-socket transport: a hub thread accepts one connection per party
// and routes length-prefixed frames; each party's endpoint keeps an inbox of
// frames read from its socket. Framing is identical for every message, so the
// same protocol code runs multi-process style.
class SocketTransport : public Transport {
 public:
  SocketTransport();  // binds 127.0.0.1 on an ephemeral port, starts the hub
  ~SocketTransport() override;
  SocketTransport(const SocketTransport&) = delete;
  SocketTransport& operator=(const SocketTransport&) = delete;

  void deliver(const Message& m) override;
  std::optional<Message> fetch(UnitId receiver, UnitId sender, std::string_view tag) override;
  std::vector<Message> fetch_all(UnitId receiver, std::string_view tag_prefix) override;
  void set_timeout_ms(int ms) override { timeout_ms_ = ms; }

  int port() const { return port_; }

 private:
  void hub_loop();
  void pump_inbox(UnitId receiver, int wait_ms);

  int listen_fd_ = -1, port_ = 0;
  std::array<int, kNumParties> conn_{};   // endpoint-side fds (this process)
  std::array<int, kNumParties> hubfd_{};  // hub-side fds
  std::array<std::vector<Message>, kNumParties> inbox_;
  std::array<std::vector<uint8_t>, kNumParties> pump_acc_;  // partial inbound frames
  std::array<std::mutex, kNumParties> inbox_mu_;
  std::array<std::mutex, kNumParties> conn_write_mu_;
  std::thread hub_;
  std::mutex hub_mu_;
  std::vector<std::pair<int, std::vector<uint8_t>>> hub_out_;  // queued hub writes
  bool stop_ = false;
  int timeout_ms_ = 0;
};

// Wire framing shared by the socket hub and its tests.
std::vector<uint8_t> encode_frame(const Message& m);
Message decode_frame(const uint8_t* data, size_t len);

// ---------------------------------------------------------------------------
// Net: the facade protocol code talks to
// ---------------------------------------------------------------------------

// Outgoing-edge tamper hook for a scripted corrupt unit: may alter the
// message or swallow it (nullopt = never delivered).
using TamperHook = std::function<std::optional<Message>(Message)>;

// Authentication layer plug (implemented by the privacy module): attaches a
// tag to authenticated-class traffic and verifies on receipt. attach()
// returning false means the key pool is exhausted.
struct AuthProvider {
  virtual ~AuthProvider() = default;
  virtual bool attach(Message& m) = 0;
  virtual bool verify(const Message& m) = 0;
};

class Net {
 public:
  Net(Transport& transport, Transcript& log) : transport_(transport), log_(log) {}

  void set_tamper(UnitId u, TamperHook hook) { tamper_[int(u)] = std::move(hook); }
  void clear_tamper(UnitId u) { tamper_[int(u)] = nullptr; }
  void set_auth(AuthProvider* auth) { auth_ = auth; }

  // Point-to-point send: tamper hook, then auth attach (authenticated class),
  // then transcript record and delivery.
  void send(Message m);
  // One transcript entry, one delivery per recipient.
  void broadcast(Message m, const std::vector<UnitId>& recipients);
  // Broadcast complaint about `subject` to the given recipients; recorded
  // with the complaint flag so transcript validation pairs it with its
  // resolving broadcast. Runs through the issuer's tamper hook (a corrupt
  // unit may suppress or rewrite its own complaint).
  void complain(UnitId issuer, const std::string& subject, const std::vector<UnitId>& recipients);

  // Receive matching (sender, tag); verifies authenticated-class tags and
  // treats verification failure as "not received" (noted in the transcript).
  std::optional<BitVec> expect(UnitId receiver, UnitId sender, std::string_view tag);
  std::optional<Message> expect_msg(UnitId receiver, UnitId sender, std::string_view tag);
  std::vector<Message> sweep(UnitId receiver, std::string_view tag_prefix);

  Transcript& log() { return log_; }
  Transport& transport() { return transport_; }

 private:
  Transport& transport_;
  Transcript& log_;
  std::array<TamperHook, kNumParties> tamper_{};
  AuthProvider* auth_ = nullptr;
};

// ---------------------------------------------------------------------------
// Phase engine
// ---------------------------------------------------------------------------

// One protocol phase = a set of per-unit thunks with no shared mutable state
// between them. Seeded mode runs them sequentially in a seed-derived order
// (fully deterministic transcripts); Threads mode runs them concurrently
// (verdicts must match, transcript order may differ).
class PhaseEngine {
 public:
  enum class Mode { Seeded, Threads };
  PhaseEngine(Mode mode, uint64_t seed) : mode_(mode), rng_(seed, /*stream=*/71) {}

  void phase(std::vector<std::pair<UnitId, std::function<void()>>> work);

  Mode mode() const { return mode_; }

 private:
  Mode mode_;
  CounterRng rng_;
};

}  // namespace qkd
