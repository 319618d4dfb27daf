#include "ddae/rng.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "ddae/error.hpp"

namespace ddae {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t Rng::derive_seed(std::uint64_t master, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(master) ^ h);
}

Rng Rng::substream(std::uint64_t master, std::string_view name) { return Rng(derive_seed(master, name)); }

int Rng::uniform_int(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return lo + static_cast<int>(r % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double th = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(th);
  has_spare_ = true;
  return r * std::cos(th);
}

void Rng::fill_normal(Tensor& t) {
  for (auto& v : t.values()) v = static_cast<float>(normal());
}

Tensor Rng::normal_like(const Shape& shape) {
  Tensor t(shape);
  fill_normal(t);
  return t;
}

std::string Rng::serialize() const {
  std::ostringstream os;
  char spare[64];
  std::snprintf(spare, sizeof spare, "%a", spare_);
  os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << spare;
  return os.str();
}

void Rng::deserialize(const std::string& state) {
  std::istringstream is(state);
  int has = 0;
  std::string spare;
  is >> engine_ >> has >> spare;
  if (!is) throw DataError("malformed RNG state");
  has_spare_ = has != 0;
  spare_ = std::strtod(spare.c_str(), nullptr);
}

}  // namespace ddae
