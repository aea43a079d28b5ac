#include "hetreg/config.hpp"

#include "hetreg/errors.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace hetreg {

namespace {

std::string trim(const std::string &s)
{
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) { return {}; }
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string &s)
{
  std::vector<std::string> out;
  std::stringstream        ss(s);
  std::string              item;
  while (std::getline(ss, item, ',')) { out.push_back(trim(item)); }
  return out;
}

template <class T> T number(const std::string &key, const std::string &v)
{
  T    out{};
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) {
    throw ConfigError("config: bad value '" + v + "' for " + key);
  }
  return out;
}

bool boolean(const std::string &key, const std::string &v)
{
  if (v == "true" || v == "1" || v == "yes") { return true; }
  if (v == "false" || v == "0" || v == "no") { return false; }
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

std::vector<int> int_list(const std::string &key, const std::string &v)
{
  std::vector<int> out;
  for (auto &s : split_list(v)) { out.push_back(number<int>(key, s)); }
  return out;
}

template <class C> std::string join(const C &c)
{
  std::ostringstream os;
  bool               first = true;
  for (auto &v : c) {
    os << (first ? "" : ",") << v;
    first = false;
  }
  return os.str();
}

std::string real(double v)
{
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

using Setter = std::function<void(RunConfig &, const std::string &, const std::string &)>;

const std::map<std::string, Setter> &setters()
{
  static const std::map<std::string, Setter> table{
    {"seed", [](RunConfig &c, auto &k, auto &v) { c.seed = number<std::uint64_t>(k, v); }},
    {"size", [](RunConfig &c, auto &k, auto &v) { c.size = number<Index>(k, v); }},
    {"spacing",
     [](RunConfig &c, auto &k, auto &v) {
       auto parts = split_list(v);
       if (parts.size() != 3) { throw ConfigError("config: spacing needs three values"); }
       for (std::size_t i = 0; i < 3; ++i) { c.spacing[i] = number<double>(k, parts[i]); }
     }},
    {"max_disp", [](RunConfig &c, auto &k, auto &v) { c.max_disp = number<double>(k, v); }},
    {"smoothness", [](RunConfig &c, auto &k, auto &v) { c.smoothness = number<double>(k, v); }},
    {"patch_size", [](RunConfig &c, auto &k, auto &v) { c.encoder.patch_size = number<Index>(k, v); }},
    {"embed_dim", [](RunConfig &c, auto &k, auto &v) { c.encoder.embed_dim = number<Index>(k, v); }},
    {"depths", [](RunConfig &c, auto &k, auto &v) { c.encoder.depths = int_list(k, v); }},
    {"window", [](RunConfig &c, auto &k, auto &v) { c.encoder.window = number<Index>(k, v); }},
    {"mlp_ratio", [](RunConfig &c, auto &k, auto &v) { c.encoder.mlp_ratio = number<Index>(k, v); }},
    {"attention",
     [](RunConfig &c, auto &, auto &v) {
       if (v == "moa") {
         c.encoder.attention = AttentionKind::Mixture;
       } else if (v == "mha") {
         c.encoder.attention = AttentionKind::MultiHead;
       } else {
         throw ConfigError("config: attention must be moa or mha, got '" + v + "'");
       }
     }},
    {"moa_experts", [](RunConfig &c, auto &k, auto &v) { c.encoder.experts = number<int>(k, v); }},
    {"moa_topk", [](RunConfig &c, auto &k, auto &v) { c.encoder.topk = number<int>(k, v); }},
    {"mha_heads", [](RunConfig &c, auto &k, auto &v) { c.encoder.heads = number<int>(k, v); }},
    {"shmoe_levels", [](RunConfig &c, auto &, auto &v) { c.decoder.shmoe_factors = parse_level_list(v); }},
    {"shmoe_kernels", [](RunConfig &c, auto &k, auto &v) { c.decoder.kernel_sizes = int_list(k, v); }},
    {"shmoe_topk", [](RunConfig &c, auto &k, auto &v) { c.decoder.shmoe_topk = number<int>(k, v); }},
    {"router_kernel", [](RunConfig &c, auto &k, auto &v) { c.decoder.router_kernel = number<int>(k, v); }},
    {"stem_channels", [](RunConfig &c, auto &k, auto &v) { c.decoder.stem_channels = number<Index>(k, v); }},
    {"quantile", [](RunConfig &c, auto &k, auto &v) { c.quantile = number<double>(k, v); }},
    {"lambda_reg", [](RunConfig &c, auto &k, auto &v) { c.weights.reg = number<double>(k, v); }},
    {"lambda_rc", [](RunConfig &c, auto &k, auto &v) { c.weights.routing = number<double>(k, v); }},
    {"learning_rate", [](RunConfig &c, auto &k, auto &v) { c.learning_rate = number<double>(k, v); }},
    {"iterations", [](RunConfig &c, auto &k, auto &v) { c.iterations = number<int>(k, v); }},
    {"diffeomorphic", [](RunConfig &c, auto &k, auto &v) { c.decoder.diffeomorphic = boolean(k, v); }},
    {"velocity_steps", [](RunConfig &c, auto &k, auto &v) { c.decoder.velocity_steps = number<int>(k, v); }},
  };
  return table;
}

} // namespace

std::set<int> parse_level_list(const std::string &text)
{
  auto t = trim(text);
  if (t.empty() || t == "none") { return {}; }
  std::set<int> out;
  for (auto &s : split_list(t)) {
    int f = number<int>("levels", s);
    if (f < 1 || (f & (f - 1)) != 0) { throw ConfigError("levels: '" + s + "' is not a power-of-two factor"); }
    out.insert(f);
  }
  return out;
}

RunConfig RunConfig::parse(const std::string &text)
{
  RunConfig          cfg;
  std::istringstream in(text);
  std::string        line;
  int                lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) { line.erase(hash); }
    line = trim(line);
    if (line.empty()) { continue; }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    auto val = trim(line.substr(eq + 1));
    auto it  = setters().find(key);
    if (it == setters().end()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    it->second(cfg, key, val);
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::string &path)
{
  std::ifstream f(path, std::ios::binary);
  if (!f) { throw IoError("cannot open config " + path); }
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const
{
  std::ostringstream os;
  os << "seed = " << seed << '\n'
     << "size = " << size << '\n'
     << "spacing = " << real(spacing[0]) << ',' << real(spacing[1]) << ',' << real(spacing[2]) << '\n'
     << "max_disp = " << real(max_disp) << '\n'
     << "smoothness = " << real(smoothness) << '\n'
     << "patch_size = " << encoder.patch_size << '\n'
     << "embed_dim = " << encoder.embed_dim << '\n'
     << "depths = " << join(encoder.depths) << '\n'
     << "window = " << encoder.window << '\n'
     << "mlp_ratio = " << encoder.mlp_ratio << '\n'
     << "attention = " << (encoder.attention == AttentionKind::Mixture ? "moa" : "mha") << '\n'
     << "moa_experts = " << encoder.experts << '\n'
     << "moa_topk = " << encoder.topk << '\n'
     << "mha_heads = " << encoder.heads << '\n'
     << "shmoe_levels = " << (decoder.shmoe_factors.empty() ? "none" : join(decoder.shmoe_factors)) << '\n'
     << "shmoe_kernels = " << join(decoder.kernel_sizes) << '\n'
     << "shmoe_topk = " << decoder.shmoe_topk << '\n'
     << "router_kernel = " << decoder.router_kernel << '\n'
     << "stem_channels = " << decoder.stem_channels << '\n'
     << "quantile = " << real(quantile) << '\n'
     << "lambda_reg = " << real(weights.reg) << '\n'
     << "lambda_rc = " << real(weights.routing) << '\n'
     << "learning_rate = " << real(learning_rate) << '\n'
     << "iterations = " << iterations << '\n'
     << "diffeomorphic = " << (decoder.diffeomorphic ? "true" : "false") << '\n'
     << "velocity_steps = " << decoder.velocity_steps << '\n';
  return os.str();
}

void RunConfig::validate() const
{
  if (size < 4) { throw ConfigError("config: size must be at least 4"); }
  for (double s : spacing) {
    if (!(s > 0.0)) { throw ConfigError("config: spacing must be positive"); }
  }
  if (!(quantile > 0.0 && quantile < 1.0)) { throw ConfigError("config: quantile must lie in (0, 1)"); }
  if (weights.reg < 0.0 || weights.routing < 0.0) { throw ConfigError("config: loss weights must be non-negative"); }
  if (!(learning_rate > 0.0)) { throw ConfigError("config: learning_rate must be positive"); }
  if (iterations < 0) { throw ConfigError("config: iterations must be non-negative"); }
  if (encoder.topk < 1 || encoder.topk > encoder.experts) { throw ConfigError("config: need 1 <= moa_topk <= moa_experts"); }
  if (encoder.heads < 1) { throw ConfigError("config: mha_heads must be positive"); }
  if (decoder.kernel_sizes.empty()) { throw ConfigError("config: shmoe_kernels must not be empty"); }
  for (int s : decoder.kernel_sizes) {
    if (s < 1 || s % 2 == 0) { throw ConfigError("config: shmoe kernel sizes must be odd"); }
  }
  if (decoder.shmoe_topk < 1 || decoder.shmoe_topk > static_cast<int>(decoder.kernel_sizes.size())) {
    throw ConfigError("config: need 1 <= shmoe_topk <= number of shmoe kernels");
  }
  if (decoder.router_kernel < 1 || decoder.router_kernel % 2 == 0) { throw ConfigError("config: router_kernel must be odd"); }
  if (decoder.stem_channels < 1) { throw ConfigError("config: stem_channels must be positive"); }
  if (decoder.velocity_steps < 1) { throw ConfigError("config: velocity_steps must be positive"); }
  if (encoder.patch_size < 2 || (encoder.patch_size & (encoder.patch_size - 1)) != 0) {
    throw ConfigError("config: patch_size must be a power of two >= 2");
  }
  encoder.validate(size, size, size);
}

} // namespace hetreg
