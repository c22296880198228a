#include "convattn/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <variant>
#include <vector>

#include "convattn/errors.hpp"

namespace convattn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Seeds are 64-bit on every platform; counts follow size_t.
struct Seed {
  std::uint64_t* p;
};

using Field = std::variant<std::size_t*, Seed, double*, std::string*>;

struct Entry {
  const char* key;
  Field field;
};

std::vector<Entry> run_fields(RunConfig& c) {
  auto& e = c.model.encoder;
  auto& d = c.model.decoder;
  auto& t = c.train;
  return {
      {"seed", Seed{&c.seed}},
      {"manifest", &c.manifest},
      {"vocab", &c.vocab},
      {"norm_stats", &c.norm_stats},
      {"out", &c.out},
      {"model.conv_maps", &e.conv_maps},
      {"model.kernel", &e.kernel},
      {"model.time_stride", &e.time_stride},
      {"model.residual_blocks", &e.residual_blocks},
      {"model.residual_maps", &e.residual_maps},
      {"model.dense_units", &e.dense_units},
      {"model.lstm_layers", &e.lstm_layers},
      {"model.lstm_units", &e.lstm_units},
      {"model.decoder_units", &d.lstm_units},
      {"model.attention_units", &d.attention_units},
      {"model.vocab_size", &d.vocab_size},
      {"train.batch_size", &t.batch_size},
      {"train.optimizer", &t.optimizer},
      {"train.learning_rate", &t.learning_rate},
      {"train.clip_norm", &t.clip_norm},
      {"train.dropout", &t.dropout},
      {"train.fine_tune_lr", &t.fine_tune_lr},
      {"train.weight_decay", &t.weight_decay},
      {"train.patience", &t.patience},
      {"train.max_epochs", &t.max_epochs},
      {"train.beam", &t.beam},
      {"train.dev_limit", &t.dev_limit},
      {"train.target_dev_per", &t.target_dev_per},
      {"train.max_seconds", &t.max_seconds},
      {"train.max_steps", &t.max_steps},
  };
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key " + key + ": cannot parse \"" + value + "\"");
  return out;
}

void assign(const std::string& key, const Field& field, const std::string& value) {
  std::visit(
      [&](auto f) {
        if constexpr (std::is_same_v<decltype(f), Seed>) {
          *f.p = parse_number<std::uint64_t>(key, value);
        } else {
          using T = std::remove_pointer_t<decltype(f)>;
          if constexpr (std::is_same_v<T, std::string>) {
            *f = value;
          } else {
            *f = parse_number<T>(key, value);
          }
        }
      },
      field);
}

std::string render(const Field& field) {
  return std::visit(
      [](auto f) -> std::string {
        if constexpr (std::is_same_v<decltype(f), Seed>) {
          return std::to_string(*f.p);
        } else {
          using T = std::remove_pointer_t<decltype(f)>;
          if constexpr (std::is_same_v<T, std::string>) {
            return *f;
          } else if constexpr (std::is_same_v<T, double>) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", *f);
            return buf;
          } else {
            return std::to_string(*f);
          }
        }
      },
      field);
}

}  // namespace

ConfigMap parse_config(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected \"key = value\"");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key");
    if (!out.emplace(key, value).second) throw ConfigError(where + "repeated key " + key);
  }
  return out;
}

ConfigMap read_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

void RunConfig::apply(const ConfigMap& values) {
  auto fields = run_fields(*this);
  for (const auto& [key, value] : values) {
    auto it = std::find_if(fields.begin(), fields.end(), [&](const Entry& e) { return key == e.key; });
    if (it == fields.end()) throw ConfigError("unknown config key " + key);
    assign(key, it->field, value);
  }
  if (train.optimizer != "adam" && train.optimizer != "sgd") {
    throw ConfigError("config key train.optimizer: expected adam or sgd, got " + train.optimizer);
  }
  if (train.dropout < 0.0 || train.dropout >= 1.0) throw ConfigError("config key train.dropout: must lie in [0, 1)");
  if (train.batch_size == 0) throw ConfigError("config key train.batch_size: must be positive");
  if (train.beam == 0) throw ConfigError("config key train.beam: must be positive");
  if (!(train.learning_rate > 0.0)) throw ConfigError("config key train.learning_rate: must be positive");
  if (!(train.clip_norm > 0.0)) throw ConfigError("config key train.clip_norm: must be positive");
  model.validate();
}

ConfigMap RunConfig::to_map() const {
  ConfigMap out;
  for (const auto& e : run_fields(const_cast<RunConfig&>(*this))) out[e.key] = render(e.field);
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  // Keep the declaration order rather than the map's sorted order.
  for (const auto& e : run_fields(const_cast<RunConfig&>(*this))) out += std::string(e.key) + " = " + render(e.field) + "\n";
  return out;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c;
  c.apply(read_config(path));
  return c;
}

ConfigMap model_config_map(const ModelConfig& config) {
  RunConfig c;
  c.model = config;
  ConfigMap out;
  for (const auto& [k, v] : c.to_map()) {
    if (k.rfind("model.", 0) == 0) out[k] = v;
  }
  out["model.freq_bins"] = std::to_string(config.encoder.freq_bins);
  out["model.in_channels"] = std::to_string(config.encoder.in_channels);
  return out;
}

ModelConfig model_config_from_map(const ConfigMap& values) {
  RunConfig c;
  ConfigMap rest;
  for (const auto& [k, v] : values) {
    if (k == "model.freq_bins") {
      c.model.encoder.freq_bins = parse_number<std::size_t>(k, v);
    } else if (k == "model.in_channels") {
      c.model.encoder.in_channels = parse_number<std::size_t>(k, v);
    } else {
      rest[k] = v;
    }
  }
  c.apply(rest);
  c.model.validate();
  return c.model;
}

}  // namespace convattn
