#pragma once
// Packed bit strings with the word-level operations the pipeline leans on:
// XOR (share algebra), popcount (error counting), slicing/appending (sifting,
// block splitting) and a cheap stable digest (transcript entries, MV hashing).
// Invariant: unused high bits of the last word are always zero.

#include <cassert>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace qkd {

class BitVec {
 public:
  BitVec() = default;
  explicit BitVec(uint64_t n) : n_(n), w_(words_for(n), 0) {}

  static BitVec from_string(const std::string& s01) {
    BitVec v(s01.size());
    for (uint64_t i = 0; i < s01.size(); ++i) v.set(i, s01[i] == '1');
    return v;
  }

  uint64_t size() const { return n_; }
  bool empty() const { return n_ == 0; }

  bool get(uint64_t i) const {
    assert(i < n_);
    return (w_[i >> 6] >> (i & 63)) & 1u;
  }
  void set(uint64_t i, bool b) {
    assert(i < n_);
    uint64_t m = uint64_t(1) << (i & 63);
    if (b)
      w_[i >> 6] |= m;
    else
      w_[i >> 6] &= ~m;
  }
  void flip(uint64_t i) {
    assert(i < n_);
    w_[i >> 6] ^= uint64_t(1) << (i & 63);
  }

  void clear() {
    n_ = 0;
    w_.clear();
  }
  void resize(uint64_t n) {
    n_ = n;
    w_.resize(words_for(n), 0);
    mask_tail();
  }

  void xor_with(const BitVec& o) {
    assert(o.n_ == n_);
    for (size_t i = 0; i < w_.size(); ++i) w_[i] ^= o.w_[i];
  }
  friend BitVec operator^(BitVec a, const BitVec& b) {
    a.xor_with(b);
    return a;
  }

  uint64_t popcount() const {
    uint64_t c = 0;
    for (uint64_t w : w_) c += uint64_t(__builtin_popcountll(w));
    return c;
  }

  void append(bool b) {
    if ((n_ & 63) == 0) w_.push_back(0);
    if (b) w_.back() |= uint64_t(1) << (n_ & 63);
    ++n_;
  }
  void append(const BitVec& o) {
    // Word-aligned fast path, bitwise otherwise.
    if ((n_ & 63) == 0) {
      w_.insert(w_.end(), o.w_.begin(), o.w_.end());
      n_ += o.n_;
      w_.resize(words_for(n_));
      mask_tail();
      return;
    }
    for (uint64_t i = 0; i < o.n_; ++i) append(o.get(i));
  }

  BitVec slice(uint64_t begin, uint64_t len) const {
    assert(begin + len <= n_);
    BitVec out(len);
    if ((begin & 63) == 0) {
      size_t w0 = begin >> 6;
      for (size_t i = 0; i < out.w_.size(); ++i) out.w_[i] = w_[w0 + i];
      out.mask_tail();
      return out;
    }
    for (uint64_t i = 0; i < len; ++i) out.set(i, get(begin + i));
    return out;
  }

  std::vector<uint8_t> to_bytes() const {
    std::vector<uint8_t> b((n_ + 7) / 8, 0);
    for (size_t i = 0; i < b.size(); ++i) b[i] = uint8_t(w_[i >> 3] >> ((i & 7) * 8));
    return b;
  }
  static BitVec from_bytes(std::span<const uint8_t> bytes, uint64_t nbits) {
    assert(nbits <= bytes.size() * 8);
    BitVec v(nbits);
    for (size_t i = 0; i < bytes.size() && i < v.w_.size() * 8; ++i)
      v.w_[i >> 3] |= uint64_t(bytes[i]) << ((i & 7) * 8);
    v.mask_tail();
    return v;
  }

  bool operator==(const BitVec& o) const { return n_ == o.n_ && w_ == o.w_; }
  bool operator!=(const BitVec& o) const { return !(*this == o); }

  // FNV-1a over the packed words; stable across runs, used for transcript
  // digests and byte-wise MV consistency hashes.
  uint64_t digest() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto eat = [&h](uint64_t x) {
      for (int i = 0; i < 8; ++i) {
        h ^= (x >> (8 * i)) & 0xff;
        h *= 0x100000001b3ull;
      }
    };
    eat(n_);
    for (uint64_t w : w_) eat(w);
    return h;
  }

  std::span<const uint64_t> words() const { return w_; }
  std::span<uint64_t> words() { return w_; }
  uint64_t word(size_t i) const { return w_[i]; }

  std::string to_string() const {
    std::string s(n_, '0');
    for (uint64_t i = 0; i < n_; ++i)
      if (get(i)) s[i] = '1';
    return s;
  }

 private:
  static uint64_t words_for(uint64_t n) { return (n + 63) / 64; }
  void mask_tail() {
    if (n_ & 63) w_.back() &= (uint64_t(1) << (n_ & 63)) - 1;
    if (w_.size() > words_for(n_)) w_.resize(words_for(n_));
  }

  uint64_t n_ = 0;
  std::vector<uint64_t> w_;
};

}  // namespace qkd
