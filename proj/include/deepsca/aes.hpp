#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

// AES primitives needed for labelling traces and forming CPA hypotheses.
//
// State indexing convention: the 16 state bytes are numbered in the standard
// AES column-major order. Positions are 1-based (1..16), matching the way
// target bytes are usually named in the side-channel literature ("byte 1",
// "byte 3"); position p sits at row (p - 1) % 4 and column (p - 1) / 4.
namespace deepsca::aes {

/// An integer known to lie in [0, 255].
class ByteValue {
 public:
  constexpr ByteValue() = default;
  constexpr ByteValue(std::uint8_t v) noexcept : value_(v) {}  // NOLINT: always in range

  /// Range-checked construction from a wider integer.
  static ByteValue checked(long long v) {
    if (v < 0 || v > 255) {
      throw std::out_of_range("byte value out of range: " + std::to_string(v));
    }
    return ByteValue(static_cast<std::uint8_t>(v));
  }

  constexpr std::uint8_t value() const noexcept { return value_; }
  constexpr operator std::uint8_t() const noexcept { return value_; }  // NOLINT

 private:
  std::uint8_t value_ = 0;
};

using Table = std::array<std::uint8_t, 256>;

/// Forward S-box, generated from the GF(2^8) definition and checked against
/// the published table on first use. A mismatch aborts the process.
const Table& sbox_table();
const Table& inv_sbox_table();

inline ByteValue sbox(ByteValue b) { return sbox_table()[b.value()]; }
inline ByteValue inv_sbox(ByteValue b) { return inv_sbox_table()[b.value()]; }

constexpr int hamming_weight(ByteValue b) noexcept {
  unsigned v = b.value();
  int n = 0;
  while (v != 0) {
    n += static_cast<int>(v & 1u);
    v >>= 1;
  }
  return n;
}

/// Multiplication in GF(2^8) modulo x^8 + x^4 + x^3 + x + 1.
std::uint8_t gf_mul(std::uint8_t a, std::uint8_t b) noexcept;

/// For the last-round register-writing model: given ciphertext byte position
/// i1 (1..16), returns the position i2 that held the same state byte before
/// ShiftRows. Row 0 is unshifted, so 1 -> 1; 12 -> 8.
int inv_shiftrows_partner(int i1);

/// Row and column of a 1-based state byte position.
constexpr int state_row(int pos) { return (pos - 1) % 4; }
constexpr int state_col(int pos) { return (pos - 1) / 4; }
constexpr int state_pos(int row, int col) { return col * 4 + row + 1; }

}  // namespace deepsca::aes
