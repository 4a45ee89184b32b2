#include "revcs/train_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace revcs {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip
  return std::string(buf, res.ptr);
}

int64_t parse_int(const std::string& v, const std::string& key) {
  int64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  require(res.ec == std::errc() && res.ptr == v.data() + v.size(), Errc::parse_error,
          "config key '" + key + "': not an integer: '" + v + "'");
  return out;
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
  uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  require(res.ec == std::errc() && res.ptr == v.data() + v.size(), Errc::parse_error,
          "config key '" + key + "': not an unsigned integer: '" + v + "'");
  return out;
}

double parse_double(const std::string& v, const std::string& key) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  require(res.ec == std::errc() && res.ptr == v.data() + v.size(), Errc::parse_error,
          "config key '" + key + "': not a number: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail(Errc::parse_error, "config key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace

TrainConfig TrainConfig::parse(const std::string& text, const std::string& origin) {
  TrainConfig c;
  std::map<std::string, std::function<void(const std::string&)>> setters;
  setters["precision"] = [&](const std::string& v) { c.precision = v; };
  setters["T"] = [&](const std::string& v) { c.steps = parse_int(v, "T"); };
  setters["batch_size"] = [&](const std::string& v) { c.batch_size = parse_int(v, "batch_size"); };
  setters["patch_size"] = [&](const std::string& v) { c.patch_size = parse_int(v, "patch_size"); };
  setters["block_size"] = [&](const std::string& v) { c.block_size = parse_int(v, "block_size"); };
  setters["ratio"] = [&](const std::string& v) { c.ratio = parse_double(v, "ratio"); };
  setters["seed"] = [&](const std::string& v) { c.seed = parse_u64(v, "seed"); };
  setters["lr"] = [&](const std::string& v) { c.lr = parse_double(v, "lr"); };
  setters["lr_halve_every"] = [&](const std::string& v) {
    c.lr_halve_every = parse_int(v, "lr_halve_every");
  };
  setters["iters"] = [&](const std::string& v) { c.iters = parse_int(v, "iters"); };
  setters["e2e"] = [&](const std::string& v) { c.e2e = parse_bool(v, "e2e"); };
  setters["invertible"] = [&](const std::string& v) { c.invertible = parse_bool(v, "invertible"); };
  setters["injectors"] = [&](const std::string& v) { c.injectors = parse_bool(v, "injectors"); };
  setters["init"] = [&](const std::string& v) { c.init = v; };
  setters["reuse"] = [&](const std::string& v) { c.reuse = parse_bool(v, "reuse"); };
  setters["pruning"] = [&](const std::string& v) { c.pruning = parse_bool(v, "pruning"); };
  setters["channels"] = [&](const std::string& v) {
    size_t comma = v.find(',');
    require(comma != std::string::npos, Errc::parse_error,
            "config key 'channels': expected c0,c1 got '" + v + "'");
    c.channels0 = parse_int(trim(v.substr(0, comma)), "channels");
    c.channels1 = parse_int(trim(v.substr(comma + 1)), "channels");
  };
  setters["blocks_per_group"] = [&](const std::string& v) {
    c.blocks_per_group = parse_int(v, "blocks_per_group");
  };
  setters["attention"] = [&](const std::string& v) { c.attention = parse_bool(v, "attention"); };
  setters["eval_interval"] = [&](const std::string& v) {
    c.eval_interval = parse_int(v, "eval_interval");
  };
  setters["val_patches"] = [&](const std::string& v) { c.val_patches = parse_int(v, "val_patches"); };
  setters["data_dir"] = [&](const std::string& v) { c.data_dir = v; };
  setters["out_dir"] = [&](const std::string& v) { c.out_dir = v; };

  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  std::map<std::string, bool> seen;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    require(eq != std::string::npos, Errc::parse_error,
            origin + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    auto it = setters.find(key);
    require(it != setters.end(), Errc::parse_error,
            origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    require(!seen[key], Errc::parse_error,
            origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = true;
    it->second(val);
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), Errc::io_error, "cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path);
}

std::string TrainConfig::emit() const {
  std::ostringstream os;
  os << "precision = " << precision << '\n';
  os << "T = " << steps << '\n';
  os << "batch_size = " << batch_size << '\n';
  os << "patch_size = " << patch_size << '\n';
  os << "block_size = " << block_size << '\n';
  os << "ratio = " << fmt_double(ratio) << '\n';
  os << "seed = " << seed << '\n';
  os << "lr = " << fmt_double(lr) << '\n';
  os << "lr_halve_every = " << lr_halve_every << '\n';
  os << "iters = " << iters << '\n';
  os << "e2e = " << (e2e ? "true" : "false") << '\n';
  os << "invertible = " << (invertible ? "true" : "false") << '\n';
  os << "injectors = " << (injectors ? "true" : "false") << '\n';
  os << "init = " << init << '\n';
  os << "reuse = " << (reuse ? "true" : "false") << '\n';
  os << "pruning = " << (pruning ? "true" : "false") << '\n';
  os << "channels = " << channels0 << ',' << channels1 << '\n';
  os << "blocks_per_group = " << blocks_per_group << '\n';
  os << "attention = " << (attention ? "true" : "false") << '\n';
  os << "eval_interval = " << eval_interval << '\n';
  os << "val_patches = " << val_patches << '\n';
  os << "data_dir = " << data_dir << '\n';
  os << "out_dir = " << out_dir << '\n';
  return os.str();
}

void TrainConfig::save(const std::string& path) const {
  std::ofstream os(path);
  require(os.good(), Errc::io_error, "cannot open config for writing: " + path);
  os << emit();
  require(os.good(), Errc::io_error, "config write failed: " + path);
}

void TrainConfig::validate() const {
  require(precision == "f32" || precision == "f64", Errc::bad_argument,
          "precision must be f32 or f64");
  require(steps >= 1 && steps <= 64, Errc::bad_argument, "T must be in [1, 64]");
  require(batch_size >= 1, Errc::bad_argument, "batch_size must be positive");
  require(patch_size >= 4 && patch_size % 2 == 0, Errc::bad_argument,
          "patch_size must be even and >= 4");
  require(block_size >= 1, Errc::bad_argument, "block_size must be positive");
  require(patch_size % block_size == 0, Errc::bad_argument,
          "patch_size must be divisible by block_size");
  require(ratio > 0.0 && ratio <= 1.0, Errc::bad_argument, "ratio must be in (0, 1]");
  require(lr >= 0.0, Errc::bad_argument, "lr must be non-negative");
  require(lr_halve_every >= 1, Errc::bad_argument, "lr_halve_every must be positive");
  require(iters >= 0, Errc::bad_argument, "iters must be non-negative");
  require(init == "backproj" || init == "noise", Errc::bad_argument,
          "init must be backproj or noise");
  require(channels0 >= 1 && channels1 >= 4 && channels1 % 4 == 0, Errc::bad_argument,
          "channels: c1 must be a positive multiple of 4");
  require(blocks_per_group >= 1, Errc::bad_argument, "blocks_per_group must be positive");
  require(eval_interval >= 1, Errc::bad_argument, "eval_interval must be positive");
  require(val_patches >= 1, Errc::bad_argument, "val_patches must be positive");
  require(e2e || !invertible, Errc::bad_argument,
          "invertible training requires e2e (one-step regression has no multi-step graph)");
}

uint64_t TrainConfig::hash() const {
  std::string s = emit();
  uint64_t h = 0xCBF29CE484222325ull;
  for (char ch : s) {
    h ^= uint8_t(ch);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace revcs
