#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace convattn {

/// Levenshtein distance with unit costs, O(min(|a|, |b|)) memory.
template <typename T>
std::size_t edit_distance(std::span<const T> a, std::span<const T> b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

template <typename T>
std::size_t edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
  return edit_distance(std::span<const T>(a), std::span<const T>(b));
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  return edit_distance(std::span<const char>(a), std::span<const char>(b));
}

struct ErrorCounts {
  std::size_t reference_length = 0;  // Z
  std::size_t edits = 0;
  double rate() const;  // edits / Z; throws when Z == 0
};

/// Sum of edit distances over (reference, hypothesis) pairs.
template <typename T>
ErrorCounts count_errors(const std::vector<std::pair<std::vector<T>, std::vector<T>>>& pairs) {
  ErrorCounts c;
  for (const auto& [ref, hyp] : pairs) {
    c.reference_length += ref.size();
    c.edits += edit_distance(ref, hyp);
  }
  return c;
}

/// Total edit distance divided by total reference length.
template <typename T>
double error_rate(const std::vector<std::pair<std::vector<T>, std::vector<T>>>& pairs) {
  return count_errors(pairs).rate();
}

/// Label folding applied before scoring. A target of std::nullopt deletes
/// the label.
class PhoneMap {
 public:
  PhoneMap() = default;

  /// Lines "source target" or "source -". A '#' at the start of a field
/// starts a comment; inside a label ("h#") it is an ordinary character.
  static PhoneMap load(const std::filesystem::path& path);
  static PhoneMap parse(const std::string& text, const std::string& origin = "<string>");
  static PhoneMap identity(const std::vector<std::string>& labels);

  void set(const std::string& source, std::optional<std::string> target);
  bool contains(const std::string& label) const { return map_.count(label) != 0; }
  std::size_t size() const { return map_.size(); }

  /// Throws DataError naming the first unmapped label.
  std::vector<std::string> apply(const std::vector<std::string>& seq) const;

 private:
  std::map<std::string, std::optional<std::string>> map_;
};

inline std::vector<std::string> map_phones(const std::vector<std::string>& seq, const PhoneMap& pm) {
  return pm.apply(seq);
}

/// Text block with Z, total edits and the rate to 4 decimal places.
std::string format_score_report(const ErrorCounts& counts, std::size_t utterances);

}  // namespace convattn
