#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ietp {

inline constexpr std::size_t kManeuverCount = 6;

enum class Lateral : std::uint8_t { keep = 0, left_change = 1, right_change = 2 };
enum class Longitudinal : std::uint8_t { normal = 0, braking = 1 };

/// One of the six (lateral x longitudinal) driving maneuvers. The combined
/// index 2*lateral + longitudinal + 1 runs over 1..6.
class ManeuverClass {
 public:
  constexpr ManeuverClass() = default;
  constexpr ManeuverClass(Lateral lat, Longitudinal lon) : lateral_(lat), longitudinal_(lon) {}

  /// From the 1-based combined index.
  static ManeuverClass from_index(int index) {
    if (index < 1 || index > static_cast<int>(kManeuverCount)) {
      throw std::out_of_range("maneuver index must be in 1..6, got " + std::to_string(index));
    }
    return from_offset(static_cast<std::size_t>(index - 1));
  }

  /// From the 0-based position used for vectors and one-hots.
  static ManeuverClass from_offset(std::size_t offset) {
    if (offset >= kManeuverCount) throw std::out_of_range("maneuver offset out of range");
    return {static_cast<Lateral>(offset / 2), static_cast<Longitudinal>(offset % 2)};
  }

  constexpr Lateral lateral() const { return lateral_; }
  constexpr Longitudinal longitudinal() const { return longitudinal_; }
  constexpr int index() const { return static_cast<int>(offset()) + 1; }
  constexpr std::size_t offset() const {
    return 2 * static_cast<std::size_t>(lateral_) + static_cast<std::size_t>(longitudinal_);
  }

  std::string name() const {
    static constexpr std::array<const char*, 3> lat{"keep", "left-change", "right-change"};
    static constexpr std::array<const char*, 2> lon{"normal", "braking"};
    return std::string(lat[static_cast<std::size_t>(lateral_)]) + "/" +
           lon[static_cast<std::size_t>(longitudinal_)];
  }

  friend constexpr bool operator==(ManeuverClass, ManeuverClass) = default;

 private:
  Lateral lateral_ = Lateral::keep;
  Longitudinal longitudinal_ = Longitudinal::normal;
};

}  // namespace ietp
