#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "mlomae/io.hpp"

namespace mlomae {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return d;
}

long to_long(const std::string& v) {
  long x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError("expected an integer, got '" + v + "'");
  return x;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

std::string fmt_double(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

RatioSchedule parse_schedule(const std::string& v) {
  const auto parts = split(v, ':');
  if (parts.size() == 2 && parts[0] == "fixed") return FixedRatio{to_double(parts[1])};
  if (parts.size() == 4 && parts[0] == "linear")
    return LinearRatio{to_double(parts[1]), to_double(parts[2]), to_long(parts[3])};
  throw ConfigError("ratio_schedule must be fixed:<r> or linear:<start>:<end>:<steps>, got '" + v + "'");
}

std::string fmt_schedule(const RatioSchedule& s) {
  if (const auto* f = std::get_if<FixedRatio>(&s)) return "fixed:" + fmt_double(f->r);
  const auto& l = std::get<LinearRatio>(s);
  return "linear:" + fmt_double(l.start) + ":" + fmt_double(l.end) + ":" + std::to_string(l.total_steps);
}

AugmentPolicy parse_policy(const std::string& v) {
  if (v == "none") return AugmentPolicy::None;
  if (v == "flip") return AugmentPolicy::Flip;
  if (v == "flip+crop") return AugmentPolicy::FlipCrop;
  throw ConfigError("augment must be none, flip or flip+crop, got '" + v + "'");
}

std::string fmt_policy(AugmentPolicy p) {
  switch (p) {
    case AugmentPolicy::None: return "none";
    case AugmentPolicy::Flip: return "flip";
    case AugmentPolicy::FlipCrop: return "flip+crop";
  }
  return "none";
}

IndexList parse_index_list(const std::string& v) {
  IndexList out;
  for (const auto& p : split(v, ',')) out.push_back(to_long(p));
  return out;
}

std::string fmt_index_list(const IndexList& l) {
  std::string s;
  for (std::size_t i = 0; i < l.size(); ++i) s += (i ? "," : "") + std::to_string(l[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Get>
Field num_field(Get g) {
  return {[g](RunConfig& c, const std::string& v) { g(c) = to_double(v); },
          [g](const RunConfig& c) { return fmt_double(g(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field int_field(Get g) {
  return {[g](RunConfig& c, const std::string& v) { g(c) = to_long(v); },
          [g](const RunConfig& c) { return std::to_string(g(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field bool_field(Get g) {
  return {[g](RunConfig& c, const std::string& v) { g(c) = to_bool(v); },
          [g](const RunConfig& c) { return std::string(g(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

// Ordered key table; serialization follows this order.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"lr_E", num_field([](RunConfig& c) -> double& { return c.mlo.lr_E; })},
      {"lr_C", num_field([](RunConfig& c) -> double& { return c.mlo.lr_C; })},
      {"lr_T", num_field([](RunConfig& c) -> double& { return c.mlo.lr_T; })},
      {"unroll_E", int_field([](RunConfig& c) -> long& { return c.mlo.unroll_E; })},
      {"unroll_C", int_field([](RunConfig& c) -> long& { return c.mlo.unroll_C; })},
      {"beta1", num_field([](RunConfig& c) -> double& { return c.mlo.beta1; })},
      {"beta2", num_field([](RunConfig& c) -> double& { return c.mlo.beta2; })},
      {"weight_decay", num_field([](RunConfig& c) -> double& { return c.mlo.weight_decay; })},
      {"ratio_schedule",
       {[](RunConfig& c, const std::string& v) { c.mlo.ratio_schedule = parse_schedule(v); },
        [](const RunConfig& c) { return fmt_schedule(c.mlo.ratio_schedule); }}},
      {"fda_eps_scale", num_field([](RunConfig& c) -> double& { return c.mlo.fda_eps_scale; })},
      {"t_update_every", int_field([](RunConfig& c) -> long& { return c.mlo.t_update_every; })},
      {"mode",
       {[](RunConfig& c, const std::string& v) {
          if (v == "mlo") c.mlo.mode = Mode::MLO;
          else if (v == "blo") c.mlo.mode = Mode::BLO;
          else throw ConfigError("mode must be mlo or blo, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.mlo.mode == Mode::MLO ? "mlo" : "blo"); }}},
      {"gamma", num_field([](RunConfig& c) -> double& { return c.mlo.gamma; })},
      {"total_epochs", int_field([](RunConfig& c) -> long& { return c.mlo.total_epochs; })},
      {"batch_size", int_field([](RunConfig& c) -> Index& { return c.mlo.batch_size; })},
      {"seed",
       {[](RunConfig& c, const std::string& v) { c.mlo.seed = to_u64(v); },
        [](const RunConfig& c) { return std::to_string(c.mlo.seed); }}},
      {"cosine_schedule", bool_field([](RunConfig& c) -> bool& { return c.mlo.cosine_schedule; })},
      {"min_lr_scale", num_field([](RunConfig& c) -> double& { return c.mlo.min_lr_scale; })},
      {"oracle_mode", bool_field([](RunConfig& c) -> bool& { return c.mlo.oracle_mode; })},
      {"freeze_masking", bool_field([](RunConfig& c) -> bool& { return c.mlo.freeze_masking; })},
      {"augment",
       {[](RunConfig& c, const std::string& v) { c.mlo.augmentation.policy = parse_policy(v); },
        [](const RunConfig& c) { return fmt_policy(c.mlo.augmentation.policy); }}},
      {"augment_pad", int_field([](RunConfig& c) -> Index& { return c.mlo.augmentation.pad; })},
      {"image_side", int_field([](RunConfig& c) -> Index& { return c.dims.image_side; })},
      {"channels", int_field([](RunConfig& c) -> Index& { return c.dims.channels; })},
      {"patch_size", int_field([](RunConfig& c) -> Index& { return c.dims.patch_size; })},
      {"emb_dim", int_field([](RunConfig& c) -> Index& { return c.dims.emb_dim; })},
      {"dec_dim", int_field([](RunConfig& c) -> Index& { return c.dims.dec_dim; })},
      {"enc_blocks", int_field([](RunConfig& c) -> Index& { return c.dims.enc_blocks; })},
      {"dec_blocks", int_field([](RunConfig& c) -> Index& { return c.dims.dec_blocks; })},
      {"heads", int_field([](RunConfig& c) -> Index& { return c.dims.heads; })},
      {"num_classes", int_field([](RunConfig& c) -> Index& { return c.dims.num_classes; })},
      {"mask_hidden", int_field([](RunConfig& c) -> Index& { return c.dims.mask_hidden; })},
      {"mlp_ratio", int_field([](RunConfig& c) -> Index& { return c.dims.mlp_ratio; })},
      {"dataset",
       {[](RunConfig& c, const std::string& v) { c.dataset = v; },
        [](const RunConfig& c) { return c.dataset; }}},
      {"cifar_limit",
       {[](RunConfig& c, const std::string& v) {
          if (v == "none") c.cifar_limit.reset();
          else c.cifar_limit = static_cast<std::size_t>(to_u64(v));
        },
        [](const RunConfig& c) { return c.cifar_limit ? std::to_string(*c.cifar_limit) : std::string("none"); }}},
      {"synth_informative",
       {[](RunConfig& c, const std::string& v) { c.synth.informative = parse_index_list(v); },
        [](const RunConfig& c) { return fmt_index_list(c.synth.informative); }}},
      {"synth_amplitude", num_field([](RunConfig& c) -> double& { return c.synth.amplitude; })},
      {"synth_noise", num_field([](RunConfig& c) -> double& { return c.synth.noise; })},
      {"synth_samples_per_class", int_field([](RunConfig& c) -> Index& { return c.synth.samples_per_class; })},
      {"output_dir",
       {[](RunConfig& c, const std::string& v) { c.output_dir = v; },
        [](const RunConfig& c) { return c.output_dir; }}},
      {"checkpoint_every", int_field([](RunConfig& c) -> long& { return c.checkpoint_every; })},
      {"probe_epochs", int_field([](RunConfig& c) -> long& { return c.probe_epochs; })},
      {"probe_lr", num_field([](RunConfig& c) -> double& { return c.probe_lr; })},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  mlo.validate();
  dims.validate();
  if (dataset != "synthetic" && dataset.rfind("cifar10:", 0) != 0)
    throw ConfigError("dataset must be 'synthetic' or 'cifar10:<path>'");
  if (dataset.rfind("cifar10:", 0) == 0 && (dims.channels != 3 || dims.image_side != 32 || dims.num_classes != 10))
    throw ConfigError("cifar10 requires channels = 3, image_side = 32, num_classes = 10");
  if (dataset == "synthetic") effective_synth(*this).validate();
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (probe_epochs < 1 || !(probe_lr > 0.0)) throw ConfigError("probe settings must be positive");
}

RunConfig parse_config(std::istream& is, const std::string& source) {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    auto where = [&](const std::string& key) { return source + ":" + std::to_string(lineno) + ": " + key + ": "; };
    if (eq == std::string::npos) throw ConfigError(where("") + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == key; });
    if (it == table.end()) throw ConfigError(where(key) + "unknown key");
    try {
      it->second.set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  return parse_config(is, path);
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, f] : fields()) out += key + " = " + f.get(cfg) + "\n";
  return out;
}

SynthSpec effective_synth(const RunConfig& cfg) {
  SynthSpec s = cfg.synth;
  s.side = cfg.dims.image_side;
  s.channels = cfg.dims.channels;
  s.patch_size = cfg.dims.patch_size;
  s.num_classes = cfg.dims.num_classes;
  return s;
}

DatasetBundle load_dataset(const RunConfig& cfg) {
  if (cfg.dataset == "synthetic") return synth_generate(effective_synth(cfg), cfg.mlo.seed);
  const std::string path = cfg.dataset.substr(std::string("cifar10:").size());
  return make_bundle(cifar10_read(path, cfg.cifar_limit), cfg.mlo.seed);
}

}  // namespace mlomae
