#include "compat/digest.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace compat {

Sha256::Sha256() {
  EVP_MD_CTX* c = EVP_MD_CTX_new();
  if (!c || EVP_DigestInit_ex(c, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 init failed");
  ctx_ = c;
}

Sha256::~Sha256() {
  if (ctx_) EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_));
}

void Sha256::update(const void* data, size_t len) {
  if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, len) != 1)
    throw std::runtime_error("sha256 update failed");
}

Digest32 Sha256::finish() {
  Digest32 out{};
  unsigned int n = 0;
  if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), out.data(), &n) != 1 ||
      n != out.size())
    throw std::runtime_error("sha256 final failed");
  return out;
}

Digest32 sha256(const void* data, size_t len) {
  Sha256 h;
  h.update(data, len);
  return h.finish();
}

std::string hex_digest(const Digest32& d) {
  static const char* hexd = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (unsigned char b : d) {
    s.push_back(hexd[b >> 4]);
    s.push_back(hexd[b & 0xf]);
  }
  return s;
}

std::string sha256_hex(const void* data, size_t len) {
  return hex_digest(sha256(data, len));
}

std::string sha256_hex(const std::string& s) {
  return sha256_hex(s.data(), s.size());
}

}  // namespace compat
