// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#include <array>
#include <bit>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "ylab/preference.hpp"

namespace ylab::pref {

namespace {

constexpr std::array<char, 4> kMagic = {'Y', 'L', 'L', 'C'};

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  out.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  std::array<char, sizeof(U)> buf{};
  if (!in.read(buf.data(), buf.size())) {
    throw std::runtime_error(std::string("log-prob cache file truncated reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void write_logp_cache(std::ostream& out, const LogProbCache& cache) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kLogpCacheVersion);
  put_le<std::uint64_t>(out, cache.size());
  for (const auto& [key, logp] : cache.entries()) {
    put_le<std::uint64_t>(out, key.first);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(key.second));
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(logp));
  }
  if (!out) throw std::runtime_error("failed writing log-prob cache");
}

LogProbCache read_logp_cache(std::istream& in, std::uint64_t snapshot_id) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error("not a log-prob cache file (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kLogpCacheVersion) {
    throw std::runtime_error("unsupported log-prob cache version " + std::to_string(version));
  }
  const auto count = get_le<std::uint64_t>(in, "record count");
  LogProbCache cache(snapshot_id);
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto pair_id = get_le<std::uint64_t>(in, "pair id");
    const auto branch = get_le<std::uint8_t>(in, "branch");
    if (branch > 1) {
      throw std::runtime_error("log-prob cache record " + std::to_string(r) + " has branch " +
                               std::to_string(branch));
    }
    const double logp = std::bit_cast<double>(get_le<std::uint64_t>(in, "log-prob"));
    cache.insert(pair_id, static_cast<Branch>(branch), logp);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("log-prob cache file has trailing bytes");
  }
  cache.seal();
  return cache;
}

}  // namespace ylab::pref
