#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qkd/bits.hpp"
#include "qkd/privacy.hpp"
#include "qkd/proto.hpp"
#include "qkd/rng.hpp"
#include "qkd/vss.hpp"

using namespace qkd;

namespace {

// One in-process network: transport + transcript + facade + scheduler.
struct Rig {
  BusTransport bus;
  Transcript log;
  Net net{bus, log};
  PhaseEngine eng;
  explicit Rig(uint64_t seed = 1, PhaseEngine::Mode mode = PhaseEngine::Mode::Seeded)
      : eng(mode, seed) {}
};

BitVec rand_bits(uint64_t seed, uint64_t stream, uint64_t n) {
  CounterRng rng(seed, stream);
  return rng.random_bits(n);
}

// Definition-level oracle, written straight from the matrix form
// T[i][j] = seed[(n-1) + i - j]: output bit i is the inner product of row i
// with the input. Deliberately bit-at-a-time so it shares nothing with the
// word-sliced or transform implementations.
BitVec toeplitz_direct(const BitVec& x, const PaSpec& spec) {
  BitVec out(spec.l);
  for (uint64_t i = 0; i < spec.l; ++i) {
    bool bit = false;
    for (uint64_t j = 0; j < spec.n; ++j)
      bit ^= x.get(j) && spec.seed.get(spec.n - 1 + i - j);
    out.set(i, bit);
  }
  return out;
}

PaSpec random_spec(uint64_t n, uint64_t l, uint64_t seed) {
  return make_pa_spec(n, l, rand_bits(seed, 1, pa_seed_size(n, l)));
}

Message auth_msg(UnitId from, UnitId to, std::string tag, BitVec payload) {
  Message m;
  m.sender = from;
  m.receiver = to;
  m.channel = ChannelClass::Authenticated;
  m.tag = std::move(tag);
  m.payload = std::move(payload);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Toeplitz hashing
// ---------------------------------------------------------------------------

TEST_CASE("seed size counts one bit per distinct diagonal") {
  CHECK(pa_seed_size(1, 1) == 1);
  CHECK(pa_seed_size(4, 2) == 5);
  // Session geometry: 3372 reconciled blocks of 2^16 bits feed the hash, and
  // the joint randomness pays one bit per diagonal of the l x n matrix.
  CHECK(uint64_t(65536) * (1675 + 1697) == 220987392);
  CHECK(pa_seed_size(220987392, 4386592) == 225373983);
}

TEST_CASE("micro-size hashing matches the matrix definition exhaustively") {
  // n = 4, l = 2: all 32 seeds x all 16 inputs against the direct oracle.
  for (uint32_t s = 0; s < 32; ++s) {
    BitVec seed(5);
    for (int b = 0; b < 5; ++b) seed.set(b, (s >> b) & 1);
    PaSpec spec{4, 2, seed};
    for (uint32_t v = 0; v < 16; ++v) {
      BitVec x(4);
      for (int b = 0; b < 4; ++b) x.set(b, (v >> b) & 1);
      BitVec want = toeplitz_direct(x, spec);
      CHECK(pa_hash_naive(x, spec) == want);
      CHECK(pa_hash_ntt(x, spec) == want);
      CHECK(pa_hash(x, spec) == want);
    }
  }
}

TEST_CASE("word-sliced and transform paths agree on random geometries") {
  // Small sizes against the definition oracle...
  for (uint64_t t = 0; t < 1024; ++t) {
    CounterRng rng(3000 + t, 0);
    uint64_t n = 1 + rng.u64() % 48, l = 1 + rng.u64() % 16;
    PaSpec spec = random_spec(n, l, 3100 + t);
    BitVec x = rand_bits(3200 + t, 0, n);
    BitVec want = toeplitz_direct(x, spec);
    REQUIRE(pa_hash_naive(x, spec) == want);
    REQUIRE(pa_hash_ntt(x, spec) == want);
  }
  // ...then the two production paths against each other up to n = 2^16.
  for (uint64_t t = 0; t < 24; ++t) {
    CounterRng rng(4000 + t, 0);
    uint64_t n = 1 + rng.u64() % (uint64_t(1) << 16);
    uint64_t l = 1 + rng.u64() % 4096;
    PaSpec spec = random_spec(n, l, 4100 + t);
    BitVec x = rand_bits(4200 + t, 0, n);
    REQUIRE(pa_hash_naive(x, spec) == pa_hash_ntt(x, spec));
  }
  // Degenerate edges.
  for (auto [n, l] : {std::pair<uint64_t, uint64_t>{1, 1}, {1, 64}, {64, 1}, {65537, 1}}) {
    PaSpec spec = random_spec(n, l, 4500 + n + l);
    BitVec x = rand_bits(4600 + n + l, 0, n);
    CHECK(pa_hash_naive(x, spec) == pa_hash_ntt(x, spec));
  }
}

TEST_CASE("hashing is linear, kills zero, and distributes over shares") {
  PaSpec spec = random_spec(1024, 96, 51);
  BitVec zero(1024);
  CHECK(pa_hash_naive(zero, spec) == BitVec(96));
  CHECK(pa_hash_ntt(zero, spec) == BitVec(96));

  BitVec x = rand_bits(52, 0, 1024), y = rand_bits(53, 0, 1024);
  CHECK(pa_hash(x ^ y, spec) == (pa_hash(x, spec) ^ pa_hash(y, spec)));

  // Share-wise hashing: each unit hashes its additive share under the joint
  // seed and the outputs xor back to the hash of the secret.
  ShareSet shares = ShareSet::deal_seeded(x, 54);
  BitVec folded(96);
  for (const BitVec& sh : shares.s) folded.xor_with(pa_hash(sh, spec));
  CHECK(folded == pa_hash(x, spec));
}

TEST_CASE("specs validate their geometry and inputs are checked") {
  CHECK_THROWS_AS((PaSpec{0, 8, BitVec(7)}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((PaSpec{8, 0, BitVec(7)}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((PaSpec{8, 8, BitVec(14)}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((PaSpec{8, 8, BitVec(16)}.validate()), std::invalid_argument);
  CHECK_NOTHROW((PaSpec{8, 8, BitVec(15)}.validate()));

  CHECK_THROWS_AS(make_pa_spec(16, 4, BitVec(18)), std::invalid_argument);
  PaSpec spec = make_pa_spec(16, 4, rand_bits(55, 0, 19));
  CHECK(spec.seed.size() == 19);

  BitVec wrong(15);
  CHECK_THROWS_AS(pa_hash_naive(wrong, spec), std::invalid_argument);
  CHECK_THROWS_AS(pa_hash_ntt(wrong, spec), std::invalid_argument);
  CHECK_THROWS_AS(pa_hash(wrong, spec), std::invalid_argument);
}

TEST_CASE("pairwise collisions concentrate at two to the minus l") {
  BitVec x = rand_bits(60, 0, 16), y = rand_bits(61, 0, 16);
  REQUIRE(x != y);

  PaProbe p = pa_uniformity_probe(x, y, 4, 100000, 62);
  CHECK(p.n_seeds == 100000);
  CHECK(p.expected == doctest::Approx(1.0 / 16));
  CHECK(std::abs(p.fraction() - p.expected) <= 3 * p.sigma());

  PaProbe p1 = pa_uniformity_probe(x, y, 1, 100000, 63);
  CHECK(std::abs(p1.fraction() - 0.5) <= 3 * p1.sigma());

  PaProbe same = pa_uniformity_probe(x, x, 4, 2000, 64);
  CHECK(same.collisions == 2000);
  CHECK(same.expected == doctest::Approx(1.0));

  BitVec big = rand_bits(65, 0, 17);
  CHECK_THROWS_AS(pa_uniformity_probe(big, big, 4, 10, 1), std::invalid_argument);
  CHECK_THROWS_AS(pa_uniformity_probe(x, rand_bits(66, 0, 15), 4, 10, 1), std::invalid_argument);
  CHECK_THROWS_AS(pa_uniformity_probe(x, y, 9, 10, 1), std::invalid_argument);
  CHECK_THROWS_AS(pa_uniformity_probe(x, y, 0, 10, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Authentication pools and the link layer
// ---------------------------------------------------------------------------

TEST_CASE("key pools reserve the construction bits and meter the pads") {
  AuthKeyPool pool(128 + 64 * 3, 70);
  CHECK(pool.size() == 320);
  CHECK(pool.consumed() == 0);
  CHECK(pool.sends() == 0);

  auto d0 = pool.draw();
  REQUIRE(d0.has_value());
  CHECK(d0->first == 0);
  CHECK(pool.consumed() == 64);
  CHECK(pool.sends() == 1);

  // Verification-side lookup never consumes.
  CHECK(pool.pad_at(0) == d0->second);
  CHECK(pool.consumed() == 64);

  auto d1 = pool.draw(), d2 = pool.draw();
  REQUIRE(d1.has_value());
  REQUIRE(d2.has_value());
  CHECK(d1->first == 1);
  CHECK(d2->first == 2);
  CHECK(d1->second != d0->second);
  CHECK(pool.consumed() == 192);

  // Three pads fit; the fourth does not.
  CHECK_FALSE(pool.draw().has_value());
  CHECK(pool.sends() == 3);
  CHECK_FALSE(pool.pad_at(3).has_value());

  // Both endpoints expand the same pre-shared material, so descriptor and
  // pads agree; the 128 construction bits are never spent.
  AuthKeyPool twin(128 + 64 * 3, 70);
  CHECK(twin.descriptor().poly == pool.descriptor().poly);
  CHECK(twin.descriptor().state == pool.descriptor().state);
  CHECK(twin.pad_at(2) == pool.pad_at(2));

  CHECK_THROWS_AS(AuthKeyPool(100, 1), std::invalid_argument);
}

TEST_CASE("link authentication accepts honest traffic and rejects forgeries") {
  LinkAuth auth;
  auth.provision(UnitId::A1, UnitId::B, 128 + 64 * 8, 71);

  Message m = auth_msg(UnitId::A1, UnitId::B, "est.counts", rand_bits(72, 0, 4096));
  REQUIRE(auth.attach(m));
  CHECK(m.has_auth);
  CHECK(m.auth_seq == 0);
  CHECK(auth.verify(m));

  // Any single flipped payload bit invalidates the tag.
  CounterRng rng(73, 0);
  for (int t = 0; t < 1000; ++t) {
    Message f = m;
    f.payload.flip(rng.u64() % 4096);
    CHECK_FALSE(auth.verify(f));
  }

  // So does splicing any covered header field, or the tag itself.
  Message f = m;
  f.sender = UnitId::A2;
  CHECK_THROWS_AS(auth.verify(f), std::logic_error);  // rerouted off the link
  f = m;
  f.auth_seq = 1;
  CHECK_FALSE(auth.verify(f));
  f = m;
  f.tag = "est.countz";
  CHECK_FALSE(auth.verify(f));
  f = m;
  f.note = "x";
  CHECK_FALSE(auth.verify(f));
  f = m;
  f.payload.resize(4095);
  CHECK_FALSE(auth.verify(f));
  f = m;
  f.auth_tag ^= 1;
  CHECK_FALSE(auth.verify(f));
  f = m;
  f.has_auth = false;
  CHECK_FALSE(auth.verify(f));

  // The link is undirected: replies draw from the same pool.
  Message r = auth_msg(UnitId::B, UnitId::A1, "est.ack", rand_bits(74, 0, 64));
  REQUIRE(auth.attach(r));
  CHECK(r.auth_seq == 1);
  CHECK(auth.verify(r));

  CHECK(auth.total_sends() == 2);
  CHECK(auth.total_consumed() == 64 * auth.total_sends());
  REQUIRE(auth.message_lengths().size() == 2);
  CHECK(auth.message_lengths()[0] == 4096);
  CHECK(auth.message_lengths()[1] == 64);
  CHECK(auth.report().find("auth-link A1-B") != std::string::npos);

  Message stray = auth_msg(UnitId::A2, UnitId::B, "x", BitVec(8));
  CHECK_THROWS_AS(auth.attach(stray), std::logic_error);
  CHECK_THROWS_AS(auth.verify(stray), std::logic_error);

  const AuthKeyPool* p = auth.pool(UnitId::B, UnitId::A1);
  REQUIRE(p != nullptr);
  CHECK(p->sends() == 2);
  CHECK(auth.pool(UnitId::A3, UnitId::B) == nullptr);
}

TEST_CASE("the wire facade tags outgoing traffic and drops forged frames") {
  Rig rig(80);
  LinkAuth auth;
  auth.provision(UnitId::A1, UnitId::B, 128 + 64 * 2, 81);
  rig.net.set_auth(&auth);

  BitVec payload = rand_bits(82, 0, 512);
  rig.net.send(auth_msg(UnitId::A1, UnitId::B, "est.counts", payload));
  auto got = rig.net.expect(UnitId::B, UnitId::A1, "est.counts");
  REQUIRE(got.has_value());
  CHECK(*got == payload);
  CHECK(rig.log.entries().back().auth_present);

  // A frame injected on the wire without a valid tag is treated as never
  // received, and the transcript says why.
  Message forged = auth_msg(UnitId::A1, UnitId::B, "est.counts", rand_bits(83, 0, 512));
  forged.has_auth = true;
  forged.auth_seq = 0;
  forged.auth_tag = 0xdeadbeef;
  rig.bus.deliver(forged);
  CHECK_FALSE(rig.net.expect(UnitId::B, UnitId::A1, "est.counts").has_value());
  bool noted = false;
  for (const auto& e : rig.log.entries())
    if (e.note.find("auth reject") != std::string::npos) noted = true;
  CHECK(noted);

  // Exhausting the pool mid-protocol is an abort, not a silent skip.
  rig.net.send(auth_msg(UnitId::A1, UnitId::B, "est.more", BitVec(8)));
  try {
    rig.net.send(auth_msg(UnitId::A1, UnitId::B, "est.again", BitVec(8)));
    FAIL("expected ProtocolAbort");
  } catch (const ProtocolAbort& a) {
    CHECK(a.cause == AbortCause::PoolExhausted);
  }
}

TEST_CASE("five doubly-redundant exchanges cost the ledgered key budget") {
  // The session charges l_AU = 64 * 5 * 3: five authenticated messages, each
  // delivered independently to three units so a single liar is outvoted.
  Rig rig(90);
  LinkAuth auth;
  for (UnitId u : {UnitId::A1, UnitId::A2, UnitId::A3})
    auth.provision(u, UnitId::B, 128 + 64 * 8, 91 + uint64_t(u));
  rig.net.set_auth(&auth);

  const char* tags[] = {"est.counts", "ir.perm", "ir.seed", "ev.tag", "pa.seed"};
  for (const char* tag : tags)
    for (UnitId u : {UnitId::A1, UnitId::A2, UnitId::A3})
      rig.net.send(auth_msg(UnitId::B, u, tag, rand_bits(92, 0, 256)));

  CHECK(auth.total_sends() == 15);
  CHECK(auth.total_consumed() == 960);

  KeyReport rep;
  rep.l_au = auth.total_consumed();
  CHECK(rep.l_au == 64 * 5 * 3);
}

TEST_CASE("the authentication failure budget matches the session ledger") {
  // Total authenticated traffic of one session, by message class.
  std::vector<uint64_t> lens = {578333424, 596429040, 578333424, 596429040, 267375807};

  double tight = auth_error_budget(lens, 64);
  CHECK(tight == doctest::Approx(5.7e-10).epsilon(0.01));
  CHECK(tight == doctest::Approx(5.674e-10).epsilon(0.001));

  double loose = auth_error_budget(lens, 64, AuthPrefactor::Loose);
  CHECK(loose == doctest::Approx(8.5e-10).epsilon(0.01));
  CHECK(loose == doctest::Approx(1.5 * tight).epsilon(1e-12));

  CHECK(auth_error_budget({}, 64) == 0.0);
  CHECK_THROWS_AS(auth_error_budget(lens, 32), std::invalid_argument);

  // Additive in the traffic: splitting the ledger does not change the total.
  double head = auth_error_budget({lens[0], lens[1]}, 64);
  double tail = auth_error_budget({lens[2], lens[3], lens[4]}, 64);
  CHECK(head + tail == doctest::Approx(tight).epsilon(1e-12));
}

TEST_CASE("run reports compose the epsilons additively") {
  KeyReport rep;
  rep.l1 = 4386592;
  rep.l2 = 4694048;
  rep.l = 4386592;
  rep.l_au = 960;
  rep.pool_consumed = 960;
  rep.eps_sec_hat = 1e-8;
  rep.eps_cor_hat = 2.4e-11;
  rep.eps_au = 5.674e-10;
  CHECK(rep.eps_sec() == 1e-8 + 5.674e-10);
  CHECK(rep.eps_cor() == 2.4e-11 + 5.674e-10);
  std::string text = rep.format();
  CHECK(text.find("key-report") != std::string::npos);
  CHECK(text.find("eps-sec") != std::string::npos);
  CHECK(text.find("4386592") != std::string::npos);
}

// ---------------------------------------------------------------------------
// Scale
// ---------------------------------------------------------------------------

TEST_CASE("a product spanning several transform chunks matches the reference") {
  // Just past the chunk cap, so the overlap-add path sees two chunks per
  // operand and two coefficient groups; the word-sliced path is the oracle.
  const uint64_t n = (uint64_t(1) << 24) + 1000, l = 64;
  PaSpec spec = random_spec(n, l, 95);
  BitVec x = rand_bits(96, 0, n);
  CHECK(pa_hash_ntt(x, spec) == pa_hash_naive(x, spec));
}

TEST_CASE("the session-scale hash runs in budget and matches the definition") {
  const uint64_t n = 220987392, l = 4386592;
  BitVec x = rand_bits(97, 0, n);
  PaSpec spec = make_pa_spec(n, l, rand_bits(97, 1, pa_seed_size(n, l)));

  auto t0 = std::chrono::steady_clock::now();
  BitVec out = pa_hash(x, spec);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("session-scale hash: " << secs << " s");
  REQUIRE(out.size() == l);

  // A uniform-looking key: population within 5 sigma of one half.
  double dev = std::abs(double(out.popcount()) - 0.5 * double(l)) / std::sqrt(0.25 * double(l));
  CHECK(dev <= 5.0);

  // Spot-check 64 output bits straight from the definition, word-sliced over
  // the reversed seed so each bit costs one pass over the input.
  BitVec rev(spec.seed.size());
  for (uint64_t m = 0; m < rev.size(); ++m) rev.set(m, spec.seed.get(n + l - 2 - m));
  const size_t rev_words = (rev.size() + 63) / 64;
  auto rev_word = [&](uint64_t w) { return w < rev_words ? rev.word(w) : 0ull; };
  auto direct_bit = [&](uint64_t i) {
    uint64_t base = l - 1 - i, folded = 0;
    for (uint64_t w = 0; w < (n + 63) / 64; ++w) {
      uint64_t b = base + 64 * w, sh = b & 63;
      uint64_t window = rev_word(b >> 6) >> sh;
      if (sh) window |= rev_word((b >> 6) + 1) << (64 - sh);
      folded ^= x.word(w) & window;
    }
    return (__builtin_popcountll(folded) & 1) != 0;
  };
  for (uint64_t i = 0; i < 32; ++i) REQUIRE(out.get(i) == direct_bit(i));
  for (uint64_t i = l - 32; i < l; ++i) REQUIRE(out.get(i) == direct_bit(i));

  // Frozen first-run digest: the committed seeds must keep producing the
  // same key bits.
  CHECK(out.digest() == UINT64_C(3603380238527165612));
}

// ---------------------------------------------------------------------------
// What the hash buys
// ---------------------------------------------------------------------------

TEST_CASE("missing one additive share decorrelates the hashed key") {
  // The strongest allowed coalition sees one pair's raw key and all but one
  // share of the other. Its best reconstruction differs from the truth by an
  // unknown uniform share, and hashing turns that into a coin-flip per bit.
  uint64_t matches = 0, equal_runs = 0;
  const uint64_t runs = 1000, l = 64;
  for (uint64_t t = 0; t < runs; ++t) {
    BitVec z1 = rand_bits(9000 + t, 0, 512);
    BitVec z2 = rand_bits(9000 + t, 1, 512);
    ShareSet shares = ShareSet::deal_seeded(z2, 9500 + t);

    BitVec honest = z1;
    honest.append(z2);
    BitVec eve = z1;
    BitVec guess = shares.s[1];
    guess.xor_with(shares.s[2]);
    guess.xor_with(shares.s[3]);
    eve.append(guess);

    PaSpec spec = make_pa_spec(1024, l, rand_bits(9000 + t, 2, pa_seed_size(1024, l)));
    BitVec ka = pa_hash(honest, spec), ke = pa_hash(eve, spec);
    if (ka == ke) ++equal_runs;
    matches += l - (ka ^ ke).popcount();
  }
  // 64000 Bernoulli(1/2) agreements: stay within 4 sigma of half.
  double sigma = std::sqrt(0.25 * double(runs * l));
  CHECK(std::abs(double(matches) - 0.5 * double(runs * l)) <= 4 * sigma);
  CHECK(equal_runs == 0);
}
