#include "run_config.hpp"

#include <charconv>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>

namespace stp::cli {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("config: bad value for " + std::string(key) + ": '" + std::string(text) + "'");
  }
  return v;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field size_field(T RunConfig::*member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { c.*member = parse_number<T>(k, v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

template <class T>
Field model_field(T UNetConfig::*member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { c.model.*member = parse_number<T>(k, v); },
          [member](const RunConfig& c) { return std::to_string(c.model.*member); }};
}

Field double_field(double RunConfig::*member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) {
            c.*member = parse_number<double>(k, v);
          },
          [member](const RunConfig& c) { return format_double(c.*member); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> f;
    f.emplace_back("mode", Field{[](RunConfig& c, std::string_view, std::string_view v) {
                                   try {
                                     c.model.mode = parse_wiring_mode(v);
                                   } catch (const std::exception& e) {
                                     throw ConfigError(std::string("config: ") + e.what());
                                   }
                                 },
                                 [](const RunConfig& c) { return std::string(to_string(c.model.mode)); }});
    f.emplace_back("tuning", Field{[](RunConfig& c, std::string_view, std::string_view v) {
                                     try {
                                       c.tuning = parse_tuning_mode(v);
                                     } catch (const std::exception& e) {
                                       throw ConfigError(std::string("config: ") + e.what());
                                     }
                                   },
                                   [](const RunConfig& c) { return std::string(to_string(c.tuning)); }});
    f.emplace_back("seed", size_field(&RunConfig::seed));
    f.emplace_back("in_channels", model_field(&UNetConfig::in_channels));
    f.emplace_back("base_width", model_field(&UNetConfig::base_width));
    f.emplace_back("channel_multipliers",
                   Field{[](RunConfig& c, std::string_view k, std::string_view v) {
                           std::vector<std::size_t> out;
                           std::size_t pos = 0;
                           while (true) {
                             const auto comma = v.find(',', pos);
                             out.push_back(parse_number<std::size_t>(k, trim(v.substr(pos, comma - pos))));
                             if (comma == std::string_view::npos) break;
                             pos = comma + 1;
                           }
                           c.model.channel_multipliers = out;
                         },
                         [](const RunConfig& c) {
                           std::string s;
                           for (std::size_t m : c.model.channel_multipliers) {
                             if (!s.empty()) s += ',';
                             s += std::to_string(m);
                           }
                           return s;
                         }});
    f.emplace_back("frames", model_field(&UNetConfig::frames));
    f.emplace_back("height", model_field(&UNetConfig::height));
    f.emplace_back("width", model_field(&UNetConfig::width));
    f.emplace_back("num_timesteps", model_field(&UNetConfig::num_timesteps));
    f.emplace_back("cond_vocab", model_field(&UNetConfig::cond_vocab));
    f.emplace_back("norm_groups", model_field(&UNetConfig::norm_groups));
    f.emplace_back("fusion_kernel", model_field(&UNetConfig::fusion_kernel));
    f.emplace_back("beta_start", double_field(&RunConfig::beta_start));
    f.emplace_back("beta_end", double_field(&RunConfig::beta_end));
    f.emplace_back("steps", size_field(&RunConfig::steps));
    f.emplace_back("batch", size_field(&RunConfig::batch));
    f.emplace_back("accumulation", size_field(&RunConfig::accumulation));
    f.emplace_back("lr", double_field(&RunConfig::lr));
    f.emplace_back("clips_per_class", size_field(&RunConfig::clips_per_class));
    f.emplace_back("shape_size", size_field(&RunConfig::shape_size));
    f.emplace_back("sample_steps", size_field(&RunConfig::sample_steps));
    f.emplace_back("sample_class", size_field(&RunConfig::sample_class));
    f.emplace_back("warmup", size_field(&RunConfig::warmup));
    f.emplace_back("repetitions", size_field(&RunConfig::repetitions));
    f.emplace_back("bench_batch", size_field(&RunConfig::bench_batch));
    f.emplace_back("gradcheck_samples", size_field(&RunConfig::gradcheck_samples));
    f.emplace_back("gradcheck_seed", size_field(&RunConfig::gradcheck_seed));
    return f;
  }();
  return table;
}

const Field& field(std::string_view key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    fail("need 0 < beta_start < beta_end < 1");
  }
  if (batch == 0 || accumulation == 0) fail("batch and accumulation must be positive");
  if (!(lr >= 0.0)) fail("lr must be non-negative");
  if (clips_per_class == 0) fail("clips_per_class must be positive");
  if (shape_size == 0 || shape_size > model.height || shape_size > model.width) {
    fail("shape_size must be in [1, min(height, width)]");
  }
  if (sample_steps == 0 || sample_steps > model.num_timesteps) fail("sample_steps must be in [1, num_timesteps]");
  if (sample_class >= model.cond_vocab) fail("sample_class must be below cond_vocab");
  if (repetitions == 0) fail("repetitions must be positive");
  if (bench_batch == 0) fail("bench_batch must be positive");
}

UNetConfig RunConfig::unet() const {
  UNetConfig c = model;
  c.seed = seed;
  return c;
}

SyntheticVideoSpec RunConfig::dataset_spec() const {
  SyntheticVideoSpec s;
  s.num_classes = model.cond_vocab;
  s.frames = model.frames;
  s.channels = model.in_channels;
  s.height = model.height;
  s.width = model.width;
  s.shape_size = shape_size;
  s.clips_per_class = clips_per_class;
  s.seed = seed;
  return s;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.steps = steps;
  o.batch = batch;
  o.accumulation = accumulation;
  o.lr = lr;
  o.seed = seed;
  return o;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_key(RunConfig& cfg, std::string_view key, std::string_view value) {
  field(trim(key)).set(cfg, trim(key), trim(value));
}

std::vector<std::string> apply_config_text(RunConfig& cfg, std::string_view text) {
  std::vector<std::string> seen;
  std::set<std::string, std::less<>> keys;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (!keys.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": repeated key '" + key + "'");
    }
    try {
      set_key(cfg, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
    seen.push_back(key);
  }
  return seen;
}

std::string echo(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& [k, f] : fields()) os << k << '=' << f.get(cfg) << '\n';
  return os.str();
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MOBIUS_SEED");
  if (!v) return std::nullopt;
  return parse_number<std::uint64_t>("MOBIUS_SEED", trim(v));
}

}  // namespace stp::cli
