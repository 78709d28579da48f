#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace cesrace {

// Order follows nesting depth: innermost pair first, outer capital last.
enum class Factor : std::size_t { Ki = 0, Lfh, Lmh, Lfu, Lmu, Ko };

inline constexpr std::size_t kFactors = 6;
inline constexpr std::array<Factor, kFactors> kAllFactors{Factor::Ki,  Factor::Lfh, Factor::Lmh,
                                                          Factor::Lfu, Factor::Lmu, Factor::Ko};
inline constexpr std::array<Factor, 4> kLaborFactors{Factor::Lfh, Factor::Lmh, Factor::Lfu,
                                                     Factor::Lmu};

using FactorArray = std::array<double, kFactors>;
using FactorMatrix = Eigen::Matrix<double, 6, 6>;

constexpr std::size_t idx(Factor f) { return static_cast<std::size_t>(f); }

constexpr bool is_labor(Factor f) { return f != Factor::Ki && f != Factor::Ko; }
constexpr bool is_skilled(Factor f) { return f == Factor::Lfh || f == Factor::Lmh; }

inline std::string_view factor_name(Factor f) {
  static constexpr std::array<std::string_view, kFactors> names{"ki", "lfh", "lmh",
                                                                "lfu", "lmu", "ko"};
  return names[idx(f)];
}

inline std::optional<Factor> parse_factor(std::string_view s) {
  for (Factor f : kAllFactors)
    if (factor_name(f) == s) return f;
  return std::nullopt;
}

enum class Sector : std::size_t { Goods = 0, Service = 1 };
inline constexpr std::size_t kSectors = 2;
inline constexpr std::array<Sector, kSectors> kAllSectors{Sector::Goods, Sector::Service};

constexpr std::size_t idx(Sector s) { return static_cast<std::size_t>(s); }
constexpr Sector other(Sector s) { return s == Sector::Goods ? Sector::Service : Sector::Goods; }

inline std::string_view sector_name(Sector s) { return s == Sector::Goods ? "goods" : "service"; }

inline std::optional<Sector> parse_sector(std::string_view s) {
  if (s == "goods") return Sector::Goods;
  if (s == "service") return Sector::Service;
  return std::nullopt;
}

inline FactorArray filled(double v) {
  FactorArray a;
  a.fill(v);
  return a;
}

}  // namespace cesrace
