#include <gtest/gtest.h>

#include <array>
#include <set>

#include "deepsca/aes.hpp"

namespace aes = deepsca::aes;

namespace {

// Reference GF(2^8) arithmetic by shift-and-add, independent of the library's
// log/exp tables.
std::uint8_t slow_mul(std::uint8_t a, std::uint8_t b) {
  std::uint8_t p = 0;
  for (int i = 0; i < 8; ++i) {
    if (b & 1) p ^= a;
    const bool hi = a & 0x80;
    a = static_cast<std::uint8_t>(a << 1);
    if (hi) a ^= 0x1b;
    b >>= 1;
  }
  return p;
}

std::uint8_t slow_inverse(std::uint8_t a) {
  if (a == 0) return 0;
  for (int b = 1; b < 256; ++b) {
    if (slow_mul(a, static_cast<std::uint8_t>(b)) == 1) return static_cast<std::uint8_t>(b);
  }
  return 0;
}

std::uint8_t rotl(std::uint8_t x, int n) {
  return static_cast<std::uint8_t>((x << n) | (x >> (8 - n)));
}

std::uint8_t oracle_sbox(std::uint8_t x) {
  const std::uint8_t b = slow_inverse(x);
  return static_cast<std::uint8_t>(b ^ rotl(b, 1) ^ rotl(b, 2) ^ rotl(b, 3) ^ rotl(b, 4) ^ 0x63);
}

}  // namespace

TEST(Aes, SboxKnownEntries) {
  EXPECT_EQ(aes::sbox(0x00), 0x63);
  EXPECT_EQ(aes::sbox(0x53), 0xED);
  EXPECT_EQ(aes::inv_sbox(0x63), 0x00);
  EXPECT_NE(aes::inv_sbox(0x52), 0x00);
  EXPECT_EQ(aes::inv_sbox(0x52), 0x48);
}

TEST(Aes, SboxMatchesFieldOracle) {
  for (int b = 0; b < 256; ++b) {
    EXPECT_EQ(aes::sbox(static_cast<std::uint8_t>(b)), oracle_sbox(static_cast<std::uint8_t>(b)))
        << "byte " << b;
  }
}

TEST(Aes, GfMulMatchesShiftAndAdd) {
  for (int a = 0; a < 256; a += 7) {
    for (int b = 0; b < 256; ++b) {
      EXPECT_EQ(aes::gf_mul(static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b)),
                slow_mul(static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b)));
    }
  }
}

TEST(Aes, SboxAndInverseArePermutationsAndInverse) {
  std::set<int> seen;
  for (int b = 0; b < 256; ++b) {
    const auto v = static_cast<std::uint8_t>(b);
    EXPECT_EQ(aes::inv_sbox(aes::sbox(v)), v);
    EXPECT_EQ(aes::sbox(aes::inv_sbox(v)), v);
    seen.insert(aes::sbox(v));
  }
  EXPECT_EQ(seen.size(), 256u);
}

TEST(Aes, HammingWeight) {
  EXPECT_EQ(aes::hamming_weight(0x00), 0);
  EXPECT_EQ(aes::hamming_weight(0xFF), 8);
  EXPECT_EQ(aes::hamming_weight(0xA5), 4);
  for (int a = 0; a < 256; ++a) {
    for (int b = 0; b < 256; ++b) {
      const auto x = static_cast<std::uint8_t>(a ^ b);
      ASSERT_LE(aes::hamming_weight(x),
                aes::hamming_weight(static_cast<std::uint8_t>(a)) +
                    aes::hamming_weight(static_cast<std::uint8_t>(b)));
    }
  }
}

TEST(Aes, ByteValueRangeChecked) {
  EXPECT_EQ(aes::ByteValue::checked(255).value(), 255);
  EXPECT_THROW(aes::ByteValue::checked(256), std::out_of_range);
  EXPECT_THROW(aes::ByteValue::checked(-1), std::out_of_range);
}

TEST(Aes, InvShiftRowsPartnerKnownPairs) {
  EXPECT_EQ(aes::inv_shiftrows_partner(12), 8);
  EXPECT_EQ(aes::inv_shiftrows_partner(1), 1);
  EXPECT_THROW(aes::inv_shiftrows_partner(0), std::out_of_range);
  EXPECT_THROW(aes::inv_shiftrows_partner(17), std::out_of_range);
}

TEST(Aes, InvShiftRowsPartnerMatchesStateOracle) {
  // Label each state cell with its 1-based column-major position, apply
  // ShiftRows to the 4x4 grid, and read which label lands at each position.
  int grid[4][4];
  for (int c = 0; c < 4; ++c) {
    for (int r = 0; r < 4; ++r) grid[r][c] = c * 4 + r + 1;
  }
  int shifted[4][4];
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) shifted[r][c] = grid[r][(c + r) % 4];
  }
  std::set<int> image;
  for (int c = 0; c < 4; ++c) {
    for (int r = 0; r < 4; ++r) {
      const int pos = c * 4 + r + 1;
      EXPECT_EQ(aes::inv_shiftrows_partner(pos), shifted[r][c]) << "position " << pos;
      EXPECT_EQ(aes::state_row(aes::inv_shiftrows_partner(pos)), r);
      image.insert(aes::inv_shiftrows_partner(pos));
    }
  }
  EXPECT_EQ(image.size(), 16u);
}
