#include "convattn/evaluation.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "convattn/errors.hpp"

namespace convattn {

double ErrorCounts::rate() const {
  if (reference_length == 0) throw std::invalid_argument("error rate undefined: total reference length is zero");
  return static_cast<double>(edits) / static_cast<double>(reference_length);
}

PhoneMap PhoneMap::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open phone map " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

PhoneMap PhoneMap::parse(const std::string& text, const std::string& origin) {
  PhoneMap pm;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    // '#' opens a comment only at the start of a field, so "h#" is a label.
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '#' && (i == 0 || std::isspace(static_cast<unsigned char>(line[i - 1])))) {
        line.erase(i);
        break;
      }
    }
    std::istringstream fields(line);
    std::string src, dst, extra;
    if (!(fields >> src)) continue;
    if (!(fields >> dst) || (fields >> extra)) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": expected \"source target\" or \"source -\"");
    }
    if (pm.contains(src)) throw FormatError(origin + ":" + std::to_string(lineno) + ": duplicate entry for " + src);
    pm.set(src, dst == "-" ? std::nullopt : std::optional<std::string>(dst));
  }
  return pm;
}

PhoneMap PhoneMap::identity(const std::vector<std::string>& labels) {
  PhoneMap pm;
  for (const auto& l : labels) pm.set(l, l);
  return pm;
}

void PhoneMap::set(const std::string& source, std::optional<std::string> target) { map_[source] = std::move(target); }

std::vector<std::string> PhoneMap::apply(const std::vector<std::string>& seq) const {
  std::vector<std::string> out;
  out.reserve(seq.size());
  for (const auto& label : seq) {
    auto it = map_.find(label);
    if (it == map_.end()) throw DataError("phone map has no entry for label \"" + label + "\"");
    if (it->second) out.push_back(*it->second);
  }
  return out;
}

std::string format_score_report(const ErrorCounts& counts, std::size_t utterances) {
  char rate[32];
  std::snprintf(rate, sizeof rate, "%.4f", counts.rate());
  std::ostringstream os;
  os << "utterances " << utterances << "\n"
     << "reference_length " << counts.reference_length << "\n"
     << "edits " << counts.edits << "\n"
     << "error_rate " << rate << "\n";
  return os.str();
}

}  // namespace convattn
