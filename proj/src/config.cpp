#include "tdrl/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace tdrl {

using nlohmann::json;

GenSpec DataConfig::gen_spec(const NetworkConfig& net) const {
  GenSpec g;
  g.classes = net.classes;
  g.frames = net.frames;
  g.height = net.height;
  g.width = net.width;
  g.square = square;
  g.speed = speed;
  g.background_max = static_cast<float>(background_max);
  return g;
}

namespace {

json block_to_json(const BlockSpec& b) {
  return {{"id", b.id},
          {"channels_in", b.channels_in},
          {"channels_out", b.channels_out},
          {"mid_channels", b.mid_channels},
          {"spatial_stride", b.spatial_stride},
          {"use_pem", b.use_pem},
          {"pem_position", to_string(b.pem_position)},
          {"tm_kind", to_string(b.tm_kind)},
          {"td_regularized", b.td_regularized},
          {"td_position", to_string(b.td_position)}};
}

// Reads known keys from an object and rejects anything else.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + " has the wrong type");
    }
  }

  template <typename T, typename Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string name;
    get(key, name);
    if (name.empty()) return;
    try {
      out = parse(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where_ + "." + it.key());
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename T>
void get_unsigned(Reader& r, const char* key, T& out) {
  long long v = static_cast<long long>(out);
  r.get(key, v);
  if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
  out = static_cast<T>(v);
}

BlockSpec block_from_json(const json& j, std::size_t index) {
  Reader r(j, "network.blocks[" + std::to_string(index) + "]");
  BlockSpec b;
  b.id = static_cast<int>(index);
  r.get("id", b.id);
  get_unsigned(r, "channels_in", b.channels_in);
  get_unsigned(r, "channels_out", b.channels_out);
  b.mid_channels = std::max<std::size_t>(1, b.channels_out / 2);
  get_unsigned(r, "mid_channels", b.mid_channels);
  get_unsigned(r, "spatial_stride", b.spatial_stride);
  r.get("use_pem", b.use_pem);
  r.get_enum("pem_position", b.pem_position, parse_placement);
  r.get_enum("tm_kind", b.tm_kind, parse_tm_kind);
  r.get("td_regularized", b.td_regularized);
  r.get_enum("td_position", b.td_position, parse_placement);
  r.finish();
  return b;
}

}  // namespace

json ExperimentConfig::to_json() const {
  json blocks = json::array();
  for (const auto& b : network.blocks) blocks.push_back(block_to_json(b));
  return {
      {"network",
       {{"frames", network.frames},
        {"classes", network.classes},
        {"image_channels", network.image_channels},
        {"height", network.height},
        {"width", network.width},
        {"stem_channels", network.stem_channels},
        {"stem_stride", network.stem_stride},
        {"pem_reduction", network.pem_reduction},
        {"memory_init", to_string(network.memory_init)},
        {"temporal_kernel", network.temporal_kernel},
        {"shift_fold", network.shift_fold},
        {"input_mean", network.input_mean},
        {"input_std", network.input_std},
        {"blocks", blocks}}},
      {"td", {{"ratio", network.td.ratio}, {"eps", network.td.eps}, {"lambda", network.td.lambda}}},
      {"optim",
       {{"base_lr", optim.base_lr},
        {"momentum", optim.momentum},
        {"weight_decay", optim.weight_decay},
        {"batch_size", optim.batch_size},
        {"epochs", optim.epochs},
        {"grad_clip", optim.grad_clip}}},
      {"data",
       {{"n_train", data.n_train},
        {"n_val", data.n_val},
        {"seed", data.seed},
        {"square", data.square},
        {"speed", data.speed},
        {"background_max", data.background_max}}},
      {"run", {{"seed", run.seed}, {"output_dir", run.output_dir}}},
  };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  Reader top(j, "config");

  if (const json* n = top.child("network")) {
    Reader r(*n, "network");
    NetworkConfig& net = cfg.network;
    get_unsigned(r, "frames", net.frames);
    get_unsigned(r, "classes", net.classes);
    get_unsigned(r, "image_channels", net.image_channels);
    get_unsigned(r, "height", net.height);
    get_unsigned(r, "width", net.width);
    get_unsigned(r, "stem_channels", net.stem_channels);
    get_unsigned(r, "stem_stride", net.stem_stride);
    get_unsigned(r, "pem_reduction", net.pem_reduction);
    r.get_enum("memory_init", net.memory_init, parse_memory_init);
    get_unsigned(r, "temporal_kernel", net.temporal_kernel);
    r.get("shift_fold", net.shift_fold);
    r.get("input_mean", net.input_mean);
    r.get("input_std", net.input_std);
    if (const json* blocks = r.child("blocks")) {
      if (!blocks->is_array()) throw ConfigError("network.blocks must be an array");
      net.blocks.clear();
      for (std::size_t i = 0; i < blocks->size(); ++i) net.blocks.push_back(block_from_json((*blocks)[i], i));
    }
    r.finish();
  }
  if (const json* t = top.child("td")) {
    Reader r(*t, "td");
    r.get("ratio", cfg.network.td.ratio);
    r.get("eps", cfg.network.td.eps);
    r.get("lambda", cfg.network.td.lambda);
    r.finish();
  }
  if (const json* o = top.child("optim")) {
    Reader r(*o, "optim");
    r.get("base_lr", cfg.optim.base_lr);
    r.get("momentum", cfg.optim.momentum);
    r.get("weight_decay", cfg.optim.weight_decay);
    get_unsigned(r, "batch_size", cfg.optim.batch_size);
    get_unsigned(r, "epochs", cfg.optim.epochs);
    r.get("grad_clip", cfg.optim.grad_clip);
    r.finish();
  }
  if (const json* d = top.child("data")) {
    Reader r(*d, "data");
    get_unsigned(r, "n_train", cfg.data.n_train);
    get_unsigned(r, "n_val", cfg.data.n_val);
    r.get("seed", cfg.data.seed);
    get_unsigned(r, "square", cfg.data.square);
    get_unsigned(r, "speed", cfg.data.speed);
    r.get("background_max", cfg.data.background_max);
    r.finish();
  }
  if (const json* u = top.child("run")) {
    Reader r(*u, "run");
    r.get("seed", cfg.run.seed);
    r.get("output_dir", cfg.run.output_dir);
    r.finish();
  }
  top.finish();

  cfg.network.seed = cfg.run.seed;
  cfg.network.sync_td_blocks();
  try {
    cfg.network.validate();
    cfg.data.gen_spec(cfg.network).validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (cfg.optim.batch_size == 0 || cfg.optim.epochs == 0) throw ConfigError("optim.batch_size and epochs must be positive");
  if (!(cfg.optim.base_lr > 0.0)) throw ConfigError("optim.base_lr must be positive");
  if (!(cfg.optim.grad_clip >= 0.0)) throw ConfigError("optim.grad_clip must be non-negative");
  if (cfg.data.n_train == 0 || cfg.data.n_val == 0) throw ConfigError("data.n_train and n_val must be positive");
  return cfg;
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j["run"].erase("output_dir");  // where results go does not change them
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  std::vector<std::string> parts;
  for (std::size_t start = 0;;) {
    const auto dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }

  auto assign = [&](auto& self, json& node, std::size_t depth) -> void {
    const std::string& key = parts[depth];
    const bool last = depth + 1 == parts.size();
    if (node.is_array()) {
      if (key == "*") {
        for (auto& el : node) last ? void(el = value) : self(self, el, depth + 1);
        return;
      }
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw ConfigError("override path '" + path + "': '" + key + "' is not an array index");
      }
      if (idx >= node.size()) throw ConfigError("override path '" + path + "': index " + key + " out of range");
      last ? void(node[idx] = value) : self(self, node[idx], depth + 1);
      return;
    }
    if (node.is_null()) node = json::object();  // new key; from_json decides whether it is allowed
    if (!node.is_object()) throw ConfigError("override path '" + path + "' descends into a scalar");
    if (last) {
      node[key] = value;
    } else {
      self(self, node[key], depth + 1);
    }
  };
  assign(assign, doc, 0);
}

ExperimentConfig config_with_overrides(const ExperimentConfig& base, const std::vector<std::string>& overrides) {
  json doc = base.to_json();
  for (const auto& o : overrides) apply_override(doc, o);
  return ExperimentConfig::from_json(doc);
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);
  return ExperimentConfig::from_json(doc);
}

}  // namespace tdrl
