#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace compat {

using Digest32 = std::array<unsigned char, 32>;

// Streaming SHA-256 (OpenSSL EVP underneath).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* data, size_t len);
  Digest32 finish();

 private:
  void* ctx_;
};

Digest32 sha256(const void* data, size_t len);
std::string hex_digest(const Digest32& d);
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

}  // namespace compat
