#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadet {

// Deterministic PRNG (SplitMix64). We deliberately avoid std::*_distribution:
// their output is implementation-defined, and identical streams across
// toolchains is a hard requirement for reproducible runs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi].
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(next_u64() % span);
  }

  // Standard normal via Box-Muller (no cached spare: keeps the stream
  // position independent of call parity).
  double normal();

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(0, int64_t(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample k distinct elements of [0, n) in selection order.
  std::vector<int> sample_without_replacement(int n, int k);

  // Derived stream: decorrelates sub-tasks from the parent without
  // consuming parent state in a call-order-dependent way.
  Rng fork(uint64_t tag) const;

 private:
  uint64_t state_;
};

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64(const std::string& s);

// Run fn(i) for i in [0, n). workers <= 1 runs inline; results must not
// depend on execution order (each index writes only its own slot).
void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn);

// Filesystem helpers shared by commands and tests.
void ensure_dir(const std::string& path);
std::string path_join(const std::string& a, const std::string& b);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
uint64_t file_hash(const std::string& path);
bool file_exists(const std::string& path);

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);

}  // namespace metadet
