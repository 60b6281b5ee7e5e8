#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace coopdrive {

/// Invalid user-supplied configuration (unknown map, bad flags, incompatible checkpoint).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition. Always a programming error.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// The simulator detected an impossible physical state (two vehicles overlapping on a lane).
class IntegrityError : public std::runtime_error {
 public:
  IntegrityError(const std::string& what, std::uint64_t episode_seed)
      : std::runtime_error(what + " (episode seed " + std::to_string(episode_seed) + ")"),
        episode_seed_(episode_seed) {}

  std::uint64_t episode_seed() const noexcept { return episode_seed_; }

 private:
  std::uint64_t episode_seed_;
};

/// More vehicles on the map than the state encoding has slots for.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite losses or gradients during optimization.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const char* message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace coopdrive
