#include "mome/config.hpp"

#include <cstdlib>
#include <fstream>

#include "json.hpp"

extern "C" char** environ;

namespace mome {

using nlohmann::json;

namespace {

// Pull a field if present, erase it from the working copy so leftovers can be
// reported as unknown keys.
template <typename T>
void take(json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
  j.erase(it);
}

void expect_empty(const json& j, const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError("config section '" + where + "' must be an object");
  }
  if (!j.empty()) {
    std::string keys;
    for (const auto& [k, _] : j.items()) {
      if (!keys.empty()) keys += ", ";
      keys += k;
    }
    throw ConfigError("unknown config key(s) in " + where + ": " + keys);
  }
}

void parse_model(json j, ModelConfig& m) {
  take(j, "width", m.adt.width);
  take(j, "pooled_h", m.adt.pooled_h);
  take(j, "pooled_w", m.adt.pooled_w);
  take(j, "layers", m.adt.layers);
  take(j, "heads", m.adt.n_heads);
  take(j, "points", m.adt.n_points);
  take(j, "value_bias", m.adt.value_bias);
  take(j, "host_layers", m.host_layers);
  take(j, "host_hidden", m.host_hidden);
  take(j, "adapter_bottleneck", m.adapter_bottleneck);
  take(j, "mole_experts", m.mole_experts);
  take(j, "gumbel_temperature", m.gumbel_temperature);
  take(j, "host_trainable", m.host_trainable);
  take(j, "importance_token_mean", m.importance_token_mean);
  take(j, "single_expert", m.single_expert);
  std::string variant = to_string(m.mole_variant);
  std::string balance = to_string(m.balance);
  std::string fusion = to_string(m.fusion);
  take(j, "mole_variant", variant);
  take(j, "balance", balance);
  take(j, "fusion", fusion);
  m.mole_variant = router_variant_from_string(variant);
  m.balance = balance_mode_from_string(balance);
  m.fusion = fusion_from_string(fusion);
  expect_empty(j, "model");
}

void parse_data(json j, SynthConfig& d) {
  take(j, "d_instr", d.d_instr);
  take(j, "subspace_dim", d.subspace_dim);
  take(j, "n_experts", d.n_experts);
  take(j, "tasks_per_group", d.tasks_per_group);
  take(j, "groups", d.groups);
  take(j, "label_noise", d.label_noise);
  take(j, "centroid_norm", d.centroid_norm);
  take(j, "task_jitter", d.task_jitter);
  take(j, "instr_sigma", d.instr_sigma);
  take(j, "group_mean_scale", d.group_mean_scale);
  take(j, "group_offsets", d.group_offsets);
  take(j, "informative_expert", d.informative_expert);
  expect_empty(j, "data");
}

void parse_train(json j, TrainConfig& t, std::string& stage1_checkpoint) {
  take(j, "stage", t.stage);
  take(j, "steps", t.steps);
  take(j, "batch", t.batch);
  take(j, "warmup", t.warmup);
  take(j, "peak_lr", t.peak_lr);
  take(j, "beta1", t.beta1);
  take(j, "beta2", t.beta2);
  take(j, "weight_decay", t.weight_decay);
  take(j, "lb_coefficient", t.lb_coefficient);
  take(j, "eval_batches", t.eval_batches);
  take(j, "threads", t.threads);
  take(j, "stage1_checkpoint", stage1_checkpoint);
  expect_empty(j, "train");
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.model.mole_experts = 4;
  return c;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = defaults();
  take(j, "seed", c.seed);
  take(j, "output_dir", c.output_dir);
  take(j, "ablation_seeds", c.ablation_seeds);
  if (auto it = j.find("model"); it != j.end()) {
    parse_model(*it, c.model);
    j.erase(it);
  }
  if (auto it = j.find("data"); it != j.end()) {
    parse_data(*it, c.data);
    j.erase(it);
  }
  if (auto it = j.find("train"); it != j.end()) {
    parse_train(*it, c.train, c.stage1_checkpoint);
    j.erase(it);
  }
  expect_empty(j, "top level");
  c.model.d_instr = c.data.d_instr;
  c.train.seed = c.seed;
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path,
                                        bool apply_env) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  ExperimentConfig c = from_json_text(text);
  if (apply_env) c.apply_env_overrides();
  return c;
}

void ExperimentConfig::apply_env_overrides() {
  // MOME_<SECTION>_<KEY> (or MOME_<TOPKEY>) patched into the JSON snapshot,
  // then reparsed so types and key checks behave exactly like file input.
  json snapshot = json::parse(to_json_text());
  bool changed = false;
  for (char** env = environ; *env != nullptr; ++env) {
    std::string entry(*env);
    if (!entry.starts_with("MOME_")) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(5, eq - 5);
    const std::string value = entry.substr(eq + 1);
    for (char& ch : key) ch = static_cast<char>(std::tolower(ch));

    json parsed_value;
    try {
      parsed_value = json::parse(value);
    } catch (const json::exception&) {
      parsed_value = value;  // plain strings pass through
    }

    if (snapshot.contains(key)) {
      snapshot[key] = parsed_value;
      changed = true;
      continue;
    }
    const auto us = key.find('_');
    if (us == std::string::npos) {
      throw ConfigError("environment override MOME_" + key +
                        " matches no config path");
    }
    const std::string section = key.substr(0, us);
    const std::string field = key.substr(us + 1);
    if (!snapshot.contains(section) || !snapshot[section].contains(field)) {
      throw ConfigError("environment override MOME_" + key +
                        " matches no config path");
    }
    snapshot[section][field] = parsed_value;
    changed = true;
  }
  if (changed) *this = from_json_text(snapshot.dump());
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  j["ablation_seeds"] = ablation_seeds;
  j["model"] = {
      {"width", model.adt.width},
      {"pooled_h", model.adt.pooled_h},
      {"pooled_w", model.adt.pooled_w},
      {"layers", model.adt.layers},
      {"heads", model.adt.n_heads},
      {"points", model.adt.n_points},
      {"value_bias", model.adt.value_bias},
      {"host_layers", model.host_layers},
      {"host_hidden", model.host_hidden},
      {"adapter_bottleneck", model.adapter_bottleneck},
      {"mole_experts", model.mole_experts},
      {"mole_variant", to_string(model.mole_variant)},
      {"balance", to_string(model.balance)},
      {"gumbel_temperature", model.gumbel_temperature},
      {"fusion", to_string(model.fusion)},
      {"single_expert", model.single_expert},
      {"host_trainable", model.host_trainable},
      {"importance_token_mean", model.importance_token_mean},
  };
  j["data"] = {
      {"d_instr", data.d_instr},
      {"subspace_dim", data.subspace_dim},
      {"n_experts", data.n_experts},
      {"tasks_per_group", data.tasks_per_group},
      {"groups", data.groups},
      {"label_noise", data.label_noise},
      {"centroid_norm", data.centroid_norm},
      {"task_jitter", data.task_jitter},
      {"instr_sigma", data.instr_sigma},
      {"group_mean_scale", data.group_mean_scale},
      {"group_offsets", data.group_offsets},
      {"informative_expert", data.informative_expert},
  };
  j["train"] = {
      {"stage", train.stage},
      {"steps", train.steps},
      {"batch", train.batch},
      {"warmup", train.warmup},
      {"peak_lr", train.peak_lr},
      {"beta1", train.beta1},
      {"beta2", train.beta2},
      {"weight_decay", train.weight_decay},
      {"lb_coefficient", train.lb_coefficient},
      {"eval_batches", train.eval_batches},
      {"threads", train.threads},
      {"stage1_checkpoint", stage1_checkpoint},
  };
  return j.dump(2);
}

}  // namespace mome
