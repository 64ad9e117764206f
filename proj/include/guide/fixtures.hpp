#pragma once

// Synthetic subjects: CGM-like records simulated from the surrogate model
// with a scripted patient (meals, meal boluses, corrections, hypo treatment).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "guide/data.hpp"
#include "guide/predictor.hpp"

namespace guide::fixtures {

struct SubjectProfile {
  std::string id;
  predictor::SurrogateParams params;
  double carb_ratio = 12.0;       // g per U for meal boluses
  double bolus_adherence = 0.85;  // probability a meal gets a bolus
  double snack_probability = 0.3; // per day
  double cgm_noise_sd = 3.0;      // mg/dL
};

/// Deterministic profile for subject number `index` (1-based, id "S01"...).
SubjectProfile subject_profile(int index, std::uint64_t seed);

inline constexpr std::int64_t kDefaultStart = 1704067200;  // 2024-01-01T00:00

data::SubjectRecord synthesize(const SubjectProfile& profile, int days, std::uint64_t seed,
                               std::int64_t start = kDefaultStart);

/// Writes <id>.csv and <id>.surrogate.json for `subjects` subjects; returns their ids.
std::vector<std::string> write_fixtures(const std::filesystem::path& dir, int subjects, int days, std::uint64_t seed);

/// Surrogate parameters stored next to a subject's CSV, or the defaults when absent.
predictor::SurrogateParams load_subject_params(const std::filesystem::path& dir, const std::string& subject);

}  // namespace guide::fixtures
