#include "lipsync/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace lipsync::config {
namespace {

using nlohmann::json;

constexpr const char* kExpertPrefix = "syncnet.";

bool is_expert_key(const std::string& key) {
  return key.rfind(kExpertPrefix, 0) == 0;
}

void flatten_into(const json& j, const std::string& prefix, json& out) {
  for (const auto& [key, value] : j.items()) {
    const auto name = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      flatten_into(value, name, out);
    } else {
      out[name] = value;
    }
  }
}

}  // namespace

json flatten(const json& j) {
  if (!j.is_object()) {
    throw std::invalid_argument("config must be a JSON object");
  }
  json out = json::object();
  flatten_into(j, "", out);
  return out;
}

json load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open config " + path.string());
  }
  try {
    return flatten(json::parse(in));
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

std::pair<std::string, json> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("expected key=value, got \"" + text + "\"");
  }
  const auto key = text.substr(0, eq);
  const auto raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) {
    value = raw;
  }
  return {key, value};
}

void apply_ablation(json& flat, const std::string& rung) {
  // Cumulative ladder: each rung adds terms on top of the previous one.
  static const std::vector<std::pair<std::string, std::vector<std::string>>> ladder{
      {"reconstruction", {}},
      {"sync", {"loss.lambda_l2", "loss.lambda_sync"}},
      {"perceptual", {"loss.lambda_l2", "loss.lambda_sync", "loss.lambda_lpips"}},
      {"gan", {"loss.lambda_l2", "loss.lambda_sync", "loss.lambda_lpips", "loss.lambda_gan"}}};
  const auto it = std::find_if(ladder.begin(), ladder.end(),
                               [&](const auto& r) { return r.first == rung; });
  if (it == ladder.end()) {
    throw std::invalid_argument("unknown ablation \"" + rung +
                                "\" (expected reconstruction, sync, perceptual or gan)");
  }
  const auto defaults = train::to_json(train::TrainConfig{});
  for (const char* key : {"loss.lambda_l2", "loss.lambda_sync", "loss.lambda_lpips", "loss.lambda_gan"}) {
    const bool active = std::find(it->second.begin(), it->second.end(), key) != it->second.end();
    if (!active) {
      flat[key] = 0.0;
    } else if (!flat.contains(key)) {
      flat[key] = defaults.at(key);
    }
  }
}

void apply_env_seed(json& flat) {
  const char* env = std::getenv("D2L_SEED");
  if (env == nullptr || *env == '\0') {
    return;
  }
  char* end = nullptr;
  const auto seed = std::strtoull(env, &end, 10);
  if (end == nullptr || *end != '\0') {
    throw std::invalid_argument(std::string("D2L_SEED is not an unsigned integer: ") + env);
  }
  flat["seed"] = seed;
  flat["syncnet.seed"] = seed;
}

json training_part(const json& flat) {
  json out = json::object();
  for (const auto& [key, value] : flat.items()) {
    if (!is_expert_key(key)) {
      out[key] = value;
    }
  }
  return out;
}

json expert_part(const json& flat) {
  json out = json::object();
  for (const auto& [key, value] : flat.items()) {
    if (is_expert_key(key)) {
      out[key] = value;
    }
  }
  return out;
}

json to_json(const ExpertSettings& s) {
  return json{{"syncnet.image_size", s.net.image_size},
              {"syncnet.channels", s.net.channels},
              {"syncnet.embedding_width", s.net.embedding_width},
              {"syncnet.max_steps", s.hyper.max_steps},
              {"syncnet.batch_size", s.hyper.batch_size},
              {"syncnet.lr", s.hyper.lr},
              {"syncnet.eval_every", s.hyper.eval_every},
              {"syncnet.eval_pairs", s.hyper.eval_pairs},
              {"syncnet.patience", s.hyper.patience},
              {"syncnet.min_improvement", s.hyper.min_improvement},
              {"syncnet.lr_drops", s.hyper.lr_drops},
              {"syncnet.lr_drop_factor", s.hyper.lr_drop_factor},
              {"syncnet.seed", s.hyper.seed}};
}

ExpertSettings expert_settings_from_json(const json& flat) {
  auto merged = to_json(ExpertSettings{});
  const auto given = expert_part(flat);
  for (const auto& [key, value] : given.items()) {
    if (!merged.contains(key)) {
      throw std::invalid_argument("unknown sync expert config key: " + key);
    }
    merged[key] = value;
  }
  ExpertSettings s;
  try {
    s.net.image_size = merged.at("syncnet.image_size").get<int>();
    s.net.channels = merged.at("syncnet.channels").get<int>();
    s.net.embedding_width = merged.at("syncnet.embedding_width").get<int>();
    s.hyper.max_steps = merged.at("syncnet.max_steps").get<int>();
    s.hyper.batch_size = merged.at("syncnet.batch_size").get<int>();
    s.hyper.lr = merged.at("syncnet.lr").get<double>();
    s.hyper.eval_every = merged.at("syncnet.eval_every").get<int>();
    s.hyper.eval_pairs = merged.at("syncnet.eval_pairs").get<int>();
    s.hyper.patience = merged.at("syncnet.patience").get<int>();
    s.hyper.min_improvement = merged.at("syncnet.min_improvement").get<double>();
    s.hyper.lr_drops = merged.at("syncnet.lr_drops").get<int>();
    s.hyper.lr_drop_factor = merged.at("syncnet.lr_drop_factor").get<double>();
    s.hyper.seed = merged.at("syncnet.seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("sync expert config: ") + e.what());
  }
  if (s.hyper.max_steps < 1 || s.hyper.batch_size < 2 || s.hyper.eval_every < 1 ||
      s.hyper.eval_pairs < 2 || s.hyper.patience < 1 || !(s.hyper.lr > 0.0) || s.hyper.lr_drops < 0 ||
      !(s.hyper.lr_drop_factor > 0.0 && s.hyper.lr_drop_factor < 1.0)) {
    throw std::invalid_argument("sync expert config: steps, batch, eval sizes and lr must be positive");
  }
  return s;
}

}  // namespace lipsync::config
