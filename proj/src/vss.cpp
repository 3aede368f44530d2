#include "qkd/vss.hpp"

#include <stdexcept>

namespace qkd {

namespace {

std::vector<UnitId> all_cp_a() { return {UnitId::A1, UnitId::A2, UnitId::A3, UnitId::A4}; }

BitVec mask_bits(std::initializer_list<bool> bits) {
  BitVec v;
  for (bool b : bits) v.append(b);
  return v;
}

BitVec zeros(uint64_t n) {
  BitVec v;
  v.resize(n);
  return v;
}

// XOR that treats a never-delivered (empty) copy as the zero string.
void xor_into(BitVec& acc, const BitVec& x) {
  if (x.empty()) return;
  if (acc.empty()) acc.resize(x.size());
  acc.xor_with(x);
}

}  // namespace

// ---------------------------------------------------------------------------
// ShareSet
// ---------------------------------------------------------------------------

ShareSet ShareSet::deal(const BitVec& secret, const std::array<BitVec, 3>& rnd) {
  for (const BitVec& r : rnd)
    if (r.size() != secret.size())
      throw std::invalid_argument("ShareSet::deal: randomness length mismatch");
  ShareSet out;
  out.s[0] = rnd[0];
  out.s[1] = rnd[1];
  out.s[2] = rnd[2];
  out.s[3] = rnd[0];
  out.s[3].xor_with(rnd[1]);
  out.s[3].xor_with(rnd[2]);
  out.s[3].xor_with(secret);
  return out;
}

ShareSet ShareSet::deal_seeded(const BitVec& secret, uint64_t seed) {
  CounterRng rng(seed, /*stream=*/3);
  std::array<BitVec, 3> rnd;
  for (BitVec& r : rnd) r = rng.random_bits(secret.size());
  return deal(secret, rnd);
}

BitVec ShareSet::secret() const {
  BitVec out = s[0];
  out.xor_with(s[1]);
  out.xor_with(s[2]);
  out.xor_with(s[3]);
  return out;
}

std::vector<UnitId> sigma(int k) {
  std::vector<UnitId> out;
  for (UnitId u : kAllCpA)
    if (cp_index(u) != k) out.push_back(u);
  return out;
}

// ---------------------------------------------------------------------------
// Majority vote
// ---------------------------------------------------------------------------

std::optional<BitVec> majority_vote(const std::vector<BitVec>& copies) {
  size_t n = copies.size();
  if (n < 3 || n % 2 == 0)
    throw std::invalid_argument("majority_vote: need an odd number >= 3 of copies");

  uint64_t len = 0;
  {
    size_t best = 0;
    for (const BitVec& c : copies) {
      size_t cnt = 0;
      for (const BitVec& d : copies) cnt += d.size() == c.size();
      if (cnt > best) {
        best = cnt;
        len = c.size();
      }
    }
    if (best <= n / 2) return std::nullopt;
  }

  std::vector<std::vector<uint8_t>> bytes;
  for (const BitVec& c : copies)
    if (c.size() == len) bytes.push_back(c.to_bytes());
  std::vector<uint8_t> win((len + 7) / 8);
  for (size_t i = 0; i < win.size(); ++i) {
    bool found = false;
    for (size_t a = 0; a < bytes.size() && !found; ++a) {
      size_t cnt = 0;
      for (size_t b = 0; b < bytes.size(); ++b) cnt += bytes[b][i] == bytes[a][i];
      if (cnt > n / 2) {
        win[i] = bytes[a][i];
        found = true;
      }
    }
    if (!found) return std::nullopt;
  }
  return BitVec::from_bytes(win, len);
}

// ---------------------------------------------------------------------------
// Share protocol
// ---------------------------------------------------------------------------

ShareOutcome run_share(UnitId dealer, const std::string& label, const BitVec& secret,
                       uint64_t declared_len, uint64_t dealer_seed, Net& net, PhaseEngine& eng) {
  ShareOutcome out;
  out.dealt = ShareSet::deal_seeded(secret, dealer_seed);
  auto share_tag = [&label](int k) { return label + ".S" + char('0' + k); };
  std::vector<UnitId> cp = all_cp_a();
  std::vector<UnitId> everyone = cp;
  everyone.push_back(dealer);

  // Step 1-2: dealer distributes share k to every unit in sigma_k.
  eng.phase({{dealer, [&] {
                for (int k = 1; k <= 4; ++k)
                  for (UnitId u : sigma(k)) {
                    Message m;
                    m.sender = dealer;
                    m.receiver = u;
                    m.tag = share_tag(k);
                    m.payload = out.dealt.s[k - 1];
                    net.send(std::move(m));
                  }
              }}});

  // Receive, defaulting missing deliveries to the null string.
  std::vector<std::pair<UnitId, std::function<void()>>> work;
  for (UnitId u : cp)
    work.emplace_back(u, [&, u] {
      for (int k = 1; k <= 4; ++k) {
        if (k == cp_index(u)) continue;
        std::optional<BitVec> got = net.expect(u, dealer, share_tag(k));
        out.held[int(u)][k - 1] = got ? std::move(*got) : zeros(declared_len);
        if (!got)
          net.log().note_event(std::string(unit_name(u)) + " defaulted " + share_tag(k) +
                               " to the null string");
      }
    });
  eng.phase(std::move(work));

  // Step 3: pairwise consistency check within each sigma_k.
  work.clear();
  for (UnitId u : cp)
    work.emplace_back(u, [&, u] {
      for (int k = 1; k <= 4; ++k) {
        if (k == cp_index(u)) continue;
        for (UnitId v : sigma(k)) {
          if (v == u) continue;
          Message m;
          m.sender = u;
          m.receiver = v;
          m.tag = label + ".xchk.S" + char('0' + k) + "." + unit_name(u);
          m.payload = out.held[int(u)][k - 1];
          net.send(std::move(m));
        }
      }
    });
  eng.phase(std::move(work));

  work.clear();
  for (UnitId u : cp)
    work.emplace_back(u, [&, u] {
      for (int k = 1; k <= 4; ++k) {
        if (k == cp_index(u)) continue;
        bool mismatch = false;
        for (UnitId v : sigma(k)) {
          if (v == u) continue;
          std::optional<BitVec> got =
              net.expect(u, v, label + ".xchk.S" + char('0' + k) + "." + unit_name(v));
          if (!got || *got != out.held[int(u)][k - 1]) mismatch = true;
        }
        if (mismatch) net.complain(u, share_tag(k), everyone);
      }
      Message done;
      done.sender = u;
      done.receiver = dealer;
      done.tag = label + ".chk.done";
      net.send(std::move(done));
    });
  eng.phase(std::move(work));

  // Dealer resolves every complaint with a single broadcast of the disputed
  // share, then tells each unit which shares were re-broadcast.
  eng.phase({{dealer, [&] {
                for (UnitId u : cp) net.expect(dealer, u, label + ".chk.done");
                bool disputed[4] = {false, false, false, false};
                for (const Message& c : net.sweep(dealer, "complaint"))
                  for (int k = 1; k <= 4; ++k)
                    if (c.note == share_tag(k)) disputed[k - 1] = true;
                BitVec mask;
                for (int k = 1; k <= 4; ++k) {
                  mask.append(disputed[k - 1]);
                  if (!disputed[k - 1]) continue;
                  out.complaints.push_back(share_tag(k));
                  Message b;
                  b.sender = dealer;
                  b.tag = share_tag(k);
                  b.payload = out.dealt.s[k - 1];
                  net.broadcast(std::move(b), cp);
                }
                for (UnitId u : cp) {
                  Message m;
                  m.sender = dealer;
                  m.receiver = u;
                  m.tag = label + ".resolved";
                  m.payload = mask;
                  net.send(std::move(m));
                }
              }}});

  // Units adopt the broadcast copies (a re-broadcast share is public, so even
  // the unit that was meant to miss it now holds it).
  work.clear();
  for (UnitId u : cp)
    work.emplace_back(u, [&, u] {
      std::optional<BitVec> mask = net.expect(u, dealer, label + ".resolved");
      if (!mask) return;
      for (int k = 1; k <= 4; ++k) {
        if (k - 1 < int(mask->size()) && !mask->get(k - 1)) continue;
        if (std::optional<BitVec> b = net.expect(u, dealer, share_tag(k)))
          out.held[int(u)][k - 1] = std::move(*b);
      }
    });
  eng.phase(std::move(work));
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruct protocol
// ---------------------------------------------------------------------------

std::array<BitVec, 4> run_reconstruct(const std::string& label, const Holdings& held, Net& net,
                                      PhaseEngine& eng) {
  std::array<BitVec, 4> result;
  std::vector<std::pair<UnitId, std::function<void()>>> work;
  for (UnitId u : all_cp_a())
    work.emplace_back(u, [&, u] {
      for (int k = 1; k <= 4; ++k) {
        if (k == cp_index(u)) continue;
        Message m;
        m.sender = u;
        m.receiver = cp_from_index(k);
        m.tag = label + ".rec.S" + char('0' + k) + "." + unit_name(u);
        m.payload = held[int(u)][k - 1];
        net.send(std::move(m));
      }
    });
  eng.phase(std::move(work));

  work.clear();
  for (UnitId u : all_cp_a())
    work.emplace_back(u, [&, u] {
      int k = cp_index(u);
      std::vector<BitVec> copies;
      for (UnitId v : sigma(k)) {
        std::optional<BitVec> got =
            net.expect(u, v, label + ".rec.S" + char('0' + k) + "." + unit_name(v));
        copies.push_back(got ? std::move(*got) : BitVec());
      }
      std::optional<BitVec> voted = majority_vote(copies);
      if (!voted) throw ProtocolAbort(AbortCause::MvFailure);
      net.log().note_event(std::string(unit_name(u)) + " mv " + label + ".S" + char('0' + k) +
                           " digest=" + std::to_string(voted->digest()));
      BitVec acc = std::move(*voted);
      for (int m = 1; m <= 4; ++m)
        if (m != k) xor_into(acc, held[int(u)][m - 1]);
      result[int(u)] = std::move(acc);
    });
  eng.phase(std::move(work));
  return result;
}

// ---------------------------------------------------------------------------
// RBS generation protocol
// ---------------------------------------------------------------------------

RbsOutcome run_rbs(const std::string& label, uint64_t length, uint64_t session_seed, Net& net,
                   PhaseEngine& eng) {
  RbsOutcome out;
  std::vector<UnitId> cp = all_cp_a();
  const UnitId a1 = UnitId::A1, a2 = UnitId::A2, a3 = UnitId::A3, a4 = UnitId::A4;
  BitVec r1 = CounterRng(session_seed, 21).random_bits(length);
  BitVec r2 = CounterRng(session_seed, 22).random_bits(length);
  BitVec r3_r1, r3_r2;  // A3's received copies

  auto p2p = [&net](UnitId s, UnitId r, std::string tag, BitVec payload) {
    Message m;
    m.sender = s;
    m.receiver = r;
    m.tag = std::move(tag);
    m.payload = std::move(payload);
    net.send(std::move(m));
  };

  // Step 1: A1 and A2 commit their strings to A3.
  eng.phase({{a1, [&] { p2p(a1, a3, label + ".R1", r1); }},
             {a2, [&] { p2p(a2, a3, label + ".R2", r2); }}});

  // A3 receives (complaining about anything missing) and reports back what
  // arrived so the senders know whether to resolve by broadcast.
  eng.phase({{a3, [&] {
                std::optional<BitVec> g1 = net.expect(a3, a1, label + ".R1");
                std::optional<BitVec> g2 = net.expect(a3, a2, label + ".R2");
                if (g1) r3_r1 = std::move(*g1);
                else net.complain(a3, label + ".R1", cp);
                if (g2) r3_r2 = std::move(*g2);
                else net.complain(a3, label + ".R2", cp);
                p2p(a3, a1, label + ".got1", mask_bits({bool(g1)}));
                p2p(a3, a2, label + ".got2", mask_bits({bool(g2)}));
              }}});

  // A broadcast resolution is only ever issued in response to a complaint the
  // broadcaster has itself received; the ".got"/".rgot"/".xv" markers act as
  // per-edge FIFO fences that guarantee any such complaint already sits in the
  // inbox when the sweep runs.
  auto complained_about = [&net](UnitId me, const std::string& subject) {
    bool hit = false;
    for (const Message& c : net.sweep(me, "complaint")) hit = hit || c.note == subject;
    return hit;
  };

  eng.phase({{a1, [&] {
                net.expect(a1, a3, label + ".got1");
                if (complained_about(a1, label + ".R1")) {
                  Message b;
                  b.sender = a1;
                  b.tag = label + ".R1";
                  b.payload = r1;
                  net.broadcast(std::move(b), cp);
                }
              }},
             {a2, [&] {
                net.expect(a2, a3, label + ".got2");
                if (complained_about(a2, label + ".R2")) {
                  Message b;
                  b.sender = a2;
                  b.tag = label + ".R2";
                  b.payload = r2;
                  net.broadcast(std::move(b), cp);
                }
              }}});

  // Step 2: A3 completes any missing input from the broadcasts, computes
  // R = R1 xor R2 and returns it to A1 and A2.
  eng.phase({{a3, [&] {
                if (r3_r1.empty())
                  if (std::optional<BitVec> b = net.expect(a3, a1, label + ".R1"))
                    r3_r1 = std::move(*b);
                if (r3_r2.empty())
                  if (std::optional<BitVec> b = net.expect(a3, a2, label + ".R2"))
                    r3_r2 = std::move(*b);
                BitVec r = zeros(length);
                xor_into(r, r3_r1);
                xor_into(r, r3_r2);
                out.r[int(a3)] = std::move(r);
                p2p(a3, a1, label + ".R", out.r[int(a3)]);
                p2p(a3, a2, label + ".R", out.r[int(a3)]);
              }}});

  eng.phase({{a1, [&] {
                std::optional<BitVec> got = net.expect(a1, a3, label + ".R");
                if (got) out.r[int(a1)] = std::move(*got);
                else net.complain(a1, label + ".R", cp);
                p2p(a1, a3, label + ".rgot1", mask_bits({bool(got)}));
              }},
             {a2, [&] {
                std::optional<BitVec> got = net.expect(a2, a3, label + ".R");
                if (got) out.r[int(a2)] = std::move(*got);
                else net.complain(a2, label + ".R", cp);
                p2p(a2, a3, label + ".rgot2", mask_bits({bool(got)}));
              }}});

  // Resolve missing deliveries of R by broadcast before the cross-check.
  eng.phase({{a3, [&] {
                net.expect(a3, a1, label + ".rgot1");
                net.expect(a3, a2, label + ".rgot2");
                bool need = complained_about(a3, label + ".R");
                if (need) {
                  Message b;
                  b.sender = a3;
                  b.tag = label + ".R";
                  b.payload = out.r[int(a3)];
                  net.broadcast(std::move(b), cp);
                }
                p2p(a3, a1, label + ".rstat", mask_bits({need}));
                p2p(a3, a2, label + ".rstat", mask_bits({need}));
              }}});

  eng.phase({{a1, [&] {
                std::optional<BitVec> st = net.expect(a1, a3, label + ".rstat");
                if (st && st->get(0))
                  if (std::optional<BitVec> b = net.expect(a1, a3, label + ".R"))
                    out.r[int(a1)] = std::move(*b);
              }},
             {a2, [&] {
                std::optional<BitVec> st = net.expect(a2, a3, label + ".rstat");
                if (st && st->get(0))
                  if (std::optional<BitVec> b = net.expect(a2, a3, label + ".R"))
                    out.r[int(a2)] = std::move(*b);
              }}});

  // Step 3 with repetition: forward the partner's string, check it against
  // the locally generated one, escalate mismatches to a broadcast of R.
  for (int round = 0;; ++round) {
    if (round >= 8) throw ProtocolAbort(AbortCause::MvFailure);
    std::string rn = std::to_string(round);
    eng.phase({{a1, [&] {
                  BitVec fwd = out.r[int(a1)];
                  if (fwd.empty()) fwd = zeros(length);
                  fwd.xor_with(r1);
                  p2p(a1, a2, label + ".x21." + rn, std::move(fwd));
                }},
               {a2, [&] {
                  BitVec fwd = out.r[int(a2)];
                  if (fwd.empty()) fwd = zeros(length);
                  fwd.xor_with(r2);
                  p2p(a2, a1, label + ".x12." + rn, std::move(fwd));
                }}});
    eng.phase({{a1, [&] {
                  std::optional<BitVec> got = net.expect(a1, a2, label + ".x12." + rn);
                  bool ok = got && *got == r1;
                  if (!ok) net.complain(a1, label + ".R", cp);
                  p2p(a1, a3, label + ".xv1." + rn, mask_bits({ok}));
                }},
               {a2, [&] {
                  std::optional<BitVec> got = net.expect(a2, a1, label + ".x21." + rn);
                  bool ok = got && *got == r2;
                  if (!ok) net.complain(a2, label + ".R", cp);
                  p2p(a2, a3, label + ".xv2." + rn, mask_bits({ok}));
                }}});
    bool redo = false;
    eng.phase({{a3, [&] {
                  net.expect(a3, a1, label + ".xv1." + rn);
                  net.expect(a3, a2, label + ".xv2." + rn);
                  redo = complained_about(a3, label + ".R");
                  if (redo) {
                    Message b;
                    b.sender = a3;
                    b.tag = label + ".R";
                    b.payload = out.r[int(a3)];
                    net.broadcast(std::move(b), cp);
                  }
                  p2p(a3, a1, label + ".xres." + rn, mask_bits({redo}));
                  p2p(a3, a2, label + ".xres." + rn, mask_bits({redo}));
                }}});
    eng.phase({{a1, [&] {
                  std::optional<BitVec> res = net.expect(a1, a3, label + ".xres." + rn);
                  if (res && res->get(0))
                    if (std::optional<BitVec> b = net.expect(a1, a3, label + ".R"))
                      out.r[int(a1)] = std::move(*b);
                }},
               {a2, [&] {
                  std::optional<BitVec> res = net.expect(a2, a3, label + ".xres." + rn);
                  if (res && res->get(0))
                    if (std::optional<BitVec> b = net.expect(a2, a3, label + ".R"))
                      out.r[int(a2)] = std::move(*b);
                }}});
    if (!redo) break;
    ++out.retries;
  }

  // Hand-off: the three working-set units send R to A4, which takes MV.
  eng.phase({{a1, [&] { p2p(a1, a4, label + ".final.A1", out.r[int(a1)]); }},
             {a2, [&] { p2p(a2, a4, label + ".final.A2", out.r[int(a2)]); }},
             {a3, [&] { p2p(a3, a4, label + ".final.A3", out.r[int(a3)]); }}});
  eng.phase({{a4, [&] {
                std::vector<BitVec> copies;
                for (UnitId v : {a1, a2, a3}) {
                  std::optional<BitVec> got =
                      net.expect(a4, v, label + ".final." + unit_name(v));
                  copies.push_back(got ? std::move(*got) : BitVec());
                }
                std::optional<BitVec> voted = majority_vote(copies);
                if (!voted) throw ProtocolAbort(AbortCause::MvFailure);
                net.log().note_event(std::string("A4 mv ") + label +
                                     " digest=" + std::to_string(voted->digest()));
                out.r[int(a4)] = std::move(*voted);
              }}});
  return out;
}

}  // namespace qkd
