// Regenerates the committed LDPC fixture (data/ldpc_65536.txt) and prints
// the structural digest that tests pin. Usage:
//   make_ldpc_fixture [out_path] [seed]
#include <cstdio>
#include <cstdlib>
#include <map>
#include <string>

#include "qkd/reconciliation.hpp"

int main(int argc, char** argv) {
  std::string out = argc > 1 ? argv[1] : "data/ldpc_65536.txt";
  uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 0) : qkd::kLdpcSeed;

  qkd::LdpcCode code = qkd::LdpcCode::generate(seed);

  std::map<uint64_t, uint64_t> check_hist;
  for (uint32_t c = 0; c < code.n_checks(); ++c) {
    auto [b, e] = code.check_vars(c);
    ++check_hist[uint64_t(e - b)];
  }
  std::printf("seed        %llu\n", (unsigned long long)seed);
  std::printf("edges       %llu\n", (unsigned long long)code.n_edges());
  std::printf("check degrees:");
  for (auto [d, n] : check_hist) std::printf(" %llu x%llu", (unsigned long long)d, (unsigned long long)n);
  std::printf("\ndigest      0x%016llx\n", (unsigned long long)code.digest());

  code.save(out);
  std::printf("wrote       %s\n", out.c_str());
  return 0;
}
