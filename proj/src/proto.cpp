#include "qkd/proto.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstring>

namespace qkd {

namespace {
const char* kUnitNames[kNumParties] = {"A1", "A2", "A3", "A4", "B", "QKD_A1", "QKD_A2", "QKD_B",
                                       "Charles"};
}  // namespace

const char* unit_name(UnitId u) { return kUnitNames[int(u)]; }

std::optional<UnitId> unit_from_name(std::string_view s) {
  for (int i = 0; i < kNumParties; ++i)
    if (s == kUnitNames[i]) return UnitId(i);
  return std::nullopt;
}

const char* abort_name(AbortCause c) {
  switch (c) {
    case AbortCause::EstimationNegative: return "EstimationNegative";
    case AbortCause::EvMismatch: return "EvMismatch";
    case AbortCause::MvFailure: return "MvFailure";
    case AbortCause::PoolExhausted: return "PoolExhausted";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Transcript
// ---------------------------------------------------------------------------

uint64_t Transcript::record(TranscriptEntry e) {
  std::lock_guard lk(mu_);
  e.seq = entries_.size() + 1;
  entries_.push_back(std::move(e));
  return entries_.back().seq;
}

void Transcript::note_event(const std::string& text) {
  TranscriptEntry e;
  e.sender = e.receiver = UnitId::Charles;
  e.tag = "note";
  e.note = text;
  record(std::move(e));
}

std::vector<TranscriptEntry> Transcript::entries() const {
  std::lock_guard lk(mu_);
  return entries_;
}

size_t Transcript::size() const {
  std::lock_guard lk(mu_);
  return entries_.size();
}

uint64_t Transcript::digest() const {
  std::lock_guard lk(mu_);
  uint64_t h = 1469598103934665603ull;
  auto eat = [&h](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  auto eat_str = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  for (const TranscriptEntry& e : entries_) {
    eat(uint64_t(e.sender) | uint64_t(e.receiver) << 8 | uint64_t(e.broadcast) << 16 |
        uint64_t(e.channel) << 24 | uint64_t(e.complaint) << 32 | uint64_t(e.auth_present) << 40);
    eat_str(e.tag);
    eat_str(e.note);
    eat(e.payload_digest);
    eat(e.size_bits);
  }
  return h;
}

void Transcript::validate() const {
  std::lock_guard lk(mu_);
  std::vector<std::pair<std::string, int>> pending;  // subject -> open complaints
  auto find = [&pending](const std::string& s) -> int* {
    for (auto& [subj, n] : pending)
      if (subj == s) return &n;
    return nullptr;
  };
  for (const TranscriptEntry& e : entries_) {
    if (e.complaint) {
      if (int* n = find(e.note))
        ++*n;
      else
        pending.emplace_back(e.note, 1);
    } else if (e.broadcast) {
      if (int* n = find(e.tag)) {
        if (*n == 0)
          throw std::runtime_error("transcript: broadcast of '" + e.tag +
                                   "' without an open complaint");
        *n = 0;  // one broadcast resolves all open complaints on the subject
      }
    }
    if (e.channel == ChannelClass::Authenticated && !e.auth_present && !e.complaint)
      throw std::runtime_error("transcript: authenticated-class message '" + e.tag +
                               "' lacks a tag");
  }
  if (!aborted_)
    for (auto& [subj, n] : pending)
      if (n != 0) throw std::runtime_error("transcript: unresolved complaint about '" + subj + "'");
}

void Transcript::mark_abort(AbortCause c) {
  {
    std::lock_guard lk(mu_);
    if (aborted_) return;  // first cause wins
    aborted_ = c;
  }
  note_event(std::string("abort: ") + abort_name(c));
}

std::optional<AbortCause> Transcript::aborted() const {
  std::lock_guard lk(mu_);
  return aborted_;
}

void Transcript::save(std::ostream& out) const {
  std::lock_guard lk(mu_);
  out << "transcript entries = " << entries_.size() << "\n";
  for (const TranscriptEntry& e : entries_) {
    out << e.seq << ' ' << unit_name(e.sender) << " -> "
        << (e.broadcast ? "*" : unit_name(e.receiver)) << " class=";
    switch (e.channel) {
      case ChannelClass::ShieldedInternal: out << "shielded"; break;
      case ChannelClass::Authenticated: out << "auth"; break;
      case ChannelClass::Untrusted: out << "untrusted"; break;
    }
    out << " tag=" << e.tag << " bits=" << e.size_bits << " digest=" << std::hex
        << e.payload_digest << std::dec;
    if (e.auth_present) out << " tagged";
    if (e.complaint) out << " COMPLAINT";
    if (!e.note.empty()) out << " note=" << e.note;
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// BusTransport
// ---------------------------------------------------------------------------

void BusTransport::deliver(const Message& m) {
  {
    std::lock_guard lk(mu_);
    box_[int(m.receiver)].push_back(m);
  }
  cv_.notify_all();
}

std::optional<Message> BusTransport::fetch(UnitId receiver, UnitId sender, std::string_view tag) {
  std::unique_lock lk(mu_);
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms_);
  for (;;) {
    auto& box = box_[int(receiver)];
    for (size_t i = 0; i < box.size(); ++i)
      if (box[i].sender == sender && box[i].tag == tag) {
        Message m = std::move(box[i]);
        box.erase(box.begin() + i);
        return m;
      }
    if (timeout_ms_ <= 0 || cv_.wait_until(lk, deadline) == std::cv_status::timeout)
      return std::nullopt;
  }
}

std::vector<Message> BusTransport::fetch_all(UnitId receiver, std::string_view tag_prefix) {
  std::lock_guard lk(mu_);
  std::vector<Message> out;
  auto& box = box_[int(receiver)];
  for (size_t i = 0; i < box.size();) {
    if (box[i].tag.rfind(tag_prefix, 0) == 0) {
      out.push_back(std::move(box[i]));
      box.erase(box.begin() + i);
    } else {
      ++i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wire framing
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(uint8_t(x >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& v, uint64_t x) {
  for (int i = 0; i < 8; ++i) v.push_back(uint8_t(x >> (8 * i)));
}
uint32_t get_u32(const uint8_t* p) {
  uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= uint32_t(p[i]) << (8 * i);
  return x;
}
uint64_t get_u64(const uint8_t* p) {
  uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= uint64_t(p[i]) << (8 * i);
  return x;
}

constexpr size_t kMaxFrame = size_t(1) << 30;

}  // namespace

std::vector<uint8_t> encode_frame(const Message& m) {
  std::vector<uint8_t> v;
  v.reserve(40 + m.tag.size() + m.note.size() + m.payload.size() / 8);
  put_u32(v, 0);  // patched below
  v.push_back(uint8_t(m.sender));
  v.push_back(uint8_t(m.receiver));
  v.push_back(uint8_t(m.is_broadcast) | uint8_t(m.has_auth) << 1);
  v.push_back(uint8_t(m.channel));
  put_u64(v, m.auth_tag);
  put_u64(v, m.auth_seq);
  put_u32(v, uint32_t(m.tag.size()));
  put_u32(v, uint32_t(m.note.size()));
  put_u64(v, m.payload.size());
  v.insert(v.end(), m.tag.begin(), m.tag.end());
  v.insert(v.end(), m.note.begin(), m.note.end());
  std::vector<uint8_t> body = m.payload.to_bytes();
  v.insert(v.end(), body.begin(), body.end());
  uint32_t len = uint32_t(v.size() - 4);
  for (int i = 0; i < 4; ++i) v[i] = uint8_t(len >> (8 * i));
  return v;
}

Message decode_frame(const uint8_t* p, size_t len) {
  if (len < 36) throw std::runtime_error("socket frame: truncated header");
  Message m;
  m.sender = UnitId(p[0]);
  m.receiver = UnitId(p[1]);
  m.is_broadcast = p[2] & 1;
  m.has_auth = (p[2] >> 1) & 1;
  m.channel = ChannelClass(p[3]);
  m.auth_tag = get_u64(p + 4);
  m.auth_seq = get_u64(p + 12);
  uint32_t tag_len = get_u32(p + 20);
  uint32_t note_len = get_u32(p + 24);
  uint64_t nbits = get_u64(p + 28);
  size_t need = 36 + size_t(tag_len) + note_len + (nbits + 7) / 8;
  if (len != need) throw std::runtime_error("socket frame: length mismatch");
  m.tag.assign(p + 36, p + 36 + tag_len);
  m.note.assign(p + 36 + tag_len, p + 36 + tag_len + note_len);
  m.payload = BitVec::from_bytes({p + 36 + tag_len + note_len, (nbits + 7) / 8}, nbits);
  return m;
}

// ---------------------------------------------------------------------------
// SocketTransport
// ---------------------------------------------------------------------------

namespace {

void write_fully(int fd, const uint8_t* p, size_t n) {
  while (n > 0) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error("socket transport: send failed");
    }
    p += w;
    n -= size_t(w);
  }
}

void set_buffers(int fd) {
  int sz = 4 << 20;
  ::setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &sz, sizeof sz);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &sz, sizeof sz);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

SocketTransport::SocketTransport() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("socket transport: socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listen_fd_, kNumParties + 1) != 0)
    throw std::runtime_error("socket transport: bind/listen failed");
  socklen_t alen = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
  port_ = ntohs(addr.sin_port);

  // Connect one endpoint per party (loopback connects complete via the
  // listen backlog), then accept them hub-side and read the hello byte.
  for (int i = 0; i < kNumParties; ++i) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0 || ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      throw std::runtime_error("socket transport: connect failed");
    set_buffers(fd);
    uint8_t hello = uint8_t(i);
    write_fully(fd, &hello, 1);
    conn_[i] = fd;
  }
  for (int i = 0; i < kNumParties; ++i) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) throw std::runtime_error("socket transport: accept failed");
    set_buffers(fd);
    uint8_t hello = 0;
    if (::recv(fd, &hello, 1, MSG_WAITALL) != 1 || hello >= kNumParties)
      throw std::runtime_error("socket transport: bad hello");
    hubfd_[hello] = fd;
  }
  hub_ = std::thread([this] { hub_loop(); });
  timeout_ms_ = 3000;
}

SocketTransport::~SocketTransport() {
  {
    std::lock_guard lk(hub_mu_);
    stop_ = true;
  }
  // Closing the endpoint sockets wakes the hub's poll with hangups.
  for (int i = 0; i < kNumParties; ++i)
    if (conn_[i] > 0) ::close(conn_[i]);
  if (hub_.joinable()) hub_.join();
  for (int i = 0; i < kNumParties; ++i)
    if (hubfd_[i] > 0) ::close(hubfd_[i]);
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

// Routes complete frames from any party to its receiver; never blocks on
// writes (per-connection outbound queues drained on POLLOUT).
void SocketTransport::hub_loop() {
  std::array<std::vector<uint8_t>, kNumParties> acc;  // partial inbound frames
  std::array<std::vector<uint8_t>, kNumParties> outq;
  std::array<size_t, kNumParties> outpos{};
  for (;;) {
    {
      std::lock_guard lk(hub_mu_);
      if (stop_) return;
    }
    pollfd pfd[kNumParties];
    for (int i = 0; i < kNumParties; ++i) {
      pfd[i] = {hubfd_[i], POLLIN, 0};
      if (outpos[i] < outq[i].size()) pfd[i].events |= POLLOUT;
    }
    int rc = ::poll(pfd, kNumParties, 50);
    if (rc < 0 && errno != EINTR) return;
    for (int i = 0; i < kNumParties; ++i) {
      if (pfd[i].revents & (POLLERR | POLLHUP | POLLNVAL)) return;
      if (pfd[i].revents & POLLOUT) {
        ssize_t w = ::send(hubfd_[i], outq[i].data() + outpos[i], outq[i].size() - outpos[i],
                           MSG_NOSIGNAL | MSG_DONTWAIT);
        if (w > 0) outpos[i] += size_t(w);
        if (outpos[i] == outq[i].size()) {
          outq[i].clear();
          outpos[i] = 0;
        }
      }
      if (pfd[i].revents & POLLIN) {
        uint8_t buf[65536];
        ssize_t r = ::recv(hubfd_[i], buf, sizeof buf, MSG_DONTWAIT);
        if (r == 0) return;  // endpoint closed: shutting down
        if (r < 0) continue;
        acc[i].insert(acc[i].end(), buf, buf + r);
        // Route every complete frame in the accumulator.
        size_t off = 0;
        while (acc[i].size() - off >= 4) {
          uint32_t len = get_u32(acc[i].data() + off);
          if (len > kMaxFrame) return;
          if (acc[i].size() - off < 4 + size_t(len)) break;
          int dest = acc[i][off + 5];  // receiver byte of the header
          if (dest >= 0 && dest < kNumParties) {
            auto& q = outq[dest];
            // Try an immediate write when nothing is queued.
            if (q.empty()) {
              size_t total = 4 + size_t(len);
              size_t done = 0;
              while (done < total) {
                ssize_t w = ::send(hubfd_[dest], acc[i].data() + off + done, total - done,
                                   MSG_NOSIGNAL | MSG_DONTWAIT);
                if (w <= 0) break;
                done += size_t(w);
              }
              if (done < total)
                q.insert(q.end(), acc[i].begin() + off + done, acc[i].begin() + off + 4 + len);
            } else {
              q.insert(q.end(), acc[i].begin() + off, acc[i].begin() + off + 4 + len);
            }
          }
          off += 4 + size_t(len);
        }
        acc[i].erase(acc[i].begin(), acc[i].begin() + off);
      }
    }
  }
}

void SocketTransport::deliver(const Message& m) {
  std::vector<uint8_t> frame = encode_frame(m);
  std::lock_guard lk(conn_write_mu_[int(m.sender)]);
  write_fully(conn_[int(m.sender)], frame.data(), frame.size());
}

// Reads whatever is available on the receiver's endpoint (waiting up to
// wait_ms for the first byte) and decodes complete frames into the inbox.
// Caller must hold inbox_mu_[receiver].
void SocketTransport::pump_inbox(UnitId receiver, int wait_ms) {
  int fd = conn_[int(receiver)];
  std::vector<uint8_t>& acc = pump_acc_[int(receiver)];
  for (;;) {
    pollfd pfd{fd, POLLIN, 0};
    int rc = ::poll(&pfd, 1, wait_ms);
    if (rc <= 0) return;
    uint8_t buf[65536];
    ssize_t r = ::recv(fd, buf, sizeof buf, MSG_DONTWAIT);
    if (r <= 0) return;
    acc.insert(acc.end(), buf, buf + r);
    size_t off = 0;
    while (acc.size() - off >= 4) {
      uint32_t len = get_u32(acc.data() + off);
      if (len > kMaxFrame) throw std::runtime_error("socket transport: oversized frame");
      if (acc.size() - off < 4 + size_t(len)) break;
      inbox_[int(receiver)].push_back(decode_frame(acc.data() + off + 4, len));
      off += 4 + size_t(len);
    }
    acc.erase(acc.begin(), acc.begin() + off);
    wait_ms = 0;  // drained the burst; only keep reading what is ready
  }
}

std::optional<Message> SocketTransport::fetch(UnitId receiver, UnitId sender,
                                              std::string_view tag) {
  std::lock_guard lk(inbox_mu_[int(receiver)]);
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms_);
  for (;;) {
    auto& box = inbox_[int(receiver)];
    for (size_t i = 0; i < box.size(); ++i)
      if (box[i].sender == sender && box[i].tag == tag) {
        Message m = std::move(box[i]);
        box.erase(box.begin() + i);
        return m;
      }
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    pump_inbox(receiver, int(std::min<long long>(left.count(), 50)));
  }
}

std::vector<Message> SocketTransport::fetch_all(UnitId receiver, std::string_view tag_prefix) {
  std::lock_guard lk(inbox_mu_[int(receiver)]);
  pump_inbox(receiver, 0);
  std::vector<Message> out;
  auto& box = inbox_[int(receiver)];
  for (size_t i = 0; i < box.size();) {
    if (box[i].tag.rfind(tag_prefix, 0) == 0) {
      out.push_back(std::move(box[i]));
      box.erase(box.begin() + i);
    } else {
      ++i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Net
// ---------------------------------------------------------------------------

void Net::send(Message m) {
  if (TamperHook& hook = tamper_[int(m.sender)]; hook) {
    std::optional<Message> t = hook(std::move(m));
    if (!t) return;  // swallowed at the source: no wire event
    m = std::move(*t);
  }
  if (m.channel == ChannelClass::Authenticated && auth_) {
    if (!auth_->attach(m)) throw ProtocolAbort(AbortCause::PoolExhausted);
  }
  TranscriptEntry e;
  e.sender = m.sender;
  e.receiver = m.receiver;
  e.channel = m.channel;
  e.tag = m.tag;
  e.note = m.note;
  e.payload_digest = m.payload.digest();
  e.size_bits = m.payload.size();
  e.auth_present = m.has_auth;
  log_.record(std::move(e));
  transport_.deliver(m);
}

void Net::broadcast(Message m, const std::vector<UnitId>& recipients) {
  // Flag the message before the tamper hook runs so a scripted corrupt unit
  // can tell its broadcasts from its point-to-point traffic. A hook returning
  // nullopt models a unit that visibly refuses to broadcast: nothing is
  // recorded, and any complaint this was meant to resolve stays open.
  m.is_broadcast = true;
  m.receiver = m.sender;
  if (TamperHook& hook = tamper_[int(m.sender)]; hook) {
    std::optional<Message> t = hook(std::move(m));
    if (!t) return;
    m = std::move(*t);
  }
  TranscriptEntry e;
  e.sender = m.sender;
  e.receiver = m.sender;  // meaningless for broadcasts
  e.broadcast = true;
  e.channel = m.channel;
  e.tag = m.tag;
  e.note = m.note;
  e.payload_digest = m.payload.digest();
  e.size_bits = m.payload.size();
  e.auth_present = m.has_auth;
  log_.record(std::move(e));
  for (UnitId r : recipients) {
    if (r == m.sender) continue;
    Message copy = m;
    copy.receiver = r;
    transport_.deliver(copy);
  }
}

void Net::complain(UnitId issuer, const std::string& subject,
                   const std::vector<UnitId>& recipients) {
  Message m;
  m.sender = issuer;
  m.receiver = issuer;
  m.is_broadcast = true;
  m.tag = "complaint";
  m.note = subject;
  // Staying silent about one's own grievance is always within a corrupt
  // unit's power, so complaints run through the same outgoing hook.
  if (TamperHook& hook = tamper_[int(issuer)]; hook) {
    std::optional<Message> t = hook(std::move(m));
    if (!t) return;
    m = std::move(*t);
  }
  TranscriptEntry e;
  e.sender = issuer;
  e.receiver = issuer;
  e.broadcast = true;
  e.tag = m.tag;
  e.note = m.note;
  e.complaint = m.tag == "complaint";
  e.payload_digest = m.payload.digest();
  e.size_bits = m.payload.size();
  log_.record(std::move(e));
  for (UnitId r : recipients) {
    if (r == issuer) continue;
    Message copy = m;
    copy.receiver = r;
    transport_.deliver(copy);
  }
}

std::optional<Message> Net::expect_msg(UnitId receiver, UnitId sender, std::string_view tag) {
  std::optional<Message> m = transport_.fetch(receiver, sender, tag);
  if (!m) return std::nullopt;
  if (m->channel == ChannelClass::Authenticated && auth_) {
    if (!m->has_auth || !auth_->verify(*m)) {
      log_.note_event(std::string("auth reject: ") + unit_name(sender) + "->" +
                      unit_name(receiver) + " " + std::string(tag));
      return std::nullopt;
    }
  }
  return m;
}

std::optional<BitVec> Net::expect(UnitId receiver, UnitId sender, std::string_view tag) {
  std::optional<Message> m = expect_msg(receiver, sender, tag);
  if (!m) return std::nullopt;
  return std::move(m->payload);
}

std::vector<Message> Net::sweep(UnitId receiver, std::string_view tag_prefix) {
  return transport_.fetch_all(receiver, tag_prefix);
}

// ---------------------------------------------------------------------------
// PhaseEngine
// ---------------------------------------------------------------------------

void PhaseEngine::phase(std::vector<std::pair<UnitId, std::function<void()>>> work) {
  if (mode_ == Mode::Seeded) {
    // Seed-derived execution order stands in for scheduler nondeterminism.
    for (size_t i = work.size(); i > 1; --i)
      std::swap(work[i - 1], work[rng_.below(i)]);
    for (auto& [u, fn] : work) fn();
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errs(work.size());
  threads.reserve(work.size());
  for (size_t i = 0; i < work.size(); ++i)
    threads.emplace_back([&, i] {
      try {
        work[i].second();
      } catch (...) {
        errs[i] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace qkd
