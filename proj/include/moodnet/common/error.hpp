#ifndef MOODNET_COMMON_ERROR_HPP
#define MOODNET_COMMON_ERROR_HPP

#include <stdexcept>
#include <string>

namespace moodnet {

// All library errors carry a stable machine-parsable category plus a
// human-readable message. The CLI prints "error: <category>: <message>".
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(category + ": " + message),
        category_(std::move(category)) {}

  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

namespace errc {
inline constexpr const char* shape_mismatch = "shape-mismatch";
inline constexpr const char* non_finite = "non-finite";
inline constexpr const char* not_scalar = "not-scalar";
inline constexpr const char* backward_consumed = "backward-consumed";
inline constexpr const char* unknown_variant = "unknown-variant";
inline constexpr const char* malformed_header = "malformed-header";
inline constexpr const char* unsupported_encoding = "unsupported-encoding";
inline constexpr const char* empty_audio = "empty-audio";
inline constexpr const char* wrong_sample_rate = "wrong-sample-rate";
inline constexpr const char* over_length = "over-length";
inline constexpr const char* empty_corpus = "empty-corpus";
inline constexpr const char* zero_variance = "zero-variance";
inline constexpr const char* invalid_interval = "invalid-interval";
inline constexpr const char* missing_modality = "missing-modality";
inline constexpr const char* missing_column = "missing-column";
inline constexpr const char* non_numeric_label = "non-numeric-label";
inline constexpr const char* duplicate_id = "duplicate-id";
inline constexpr const char* track_set_mismatch = "track-set-mismatch";
inline constexpr const char* non_convergence = "non-convergence";
inline constexpr const char* divergence = "divergence";
inline constexpr const char* dimension_mismatch = "dimension-mismatch";
inline constexpr const char* empty_data = "empty-data";
inline constexpr const char* bad_argument = "bad-argument";
inline constexpr const char* io = "io";
inline constexpr const char* usage = "usage";
}  // namespace errc

}  // namespace moodnet

#endif
