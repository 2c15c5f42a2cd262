#include "lipsync/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <zlib.h>

namespace lipsync::ckpt {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

uint32_t crc_of(const torch::Tensor& t) {
  const auto bytes = static_cast<size_t>(t.numel()) * t.element_size();
  const auto* data = static_cast<const Bytef*>(t.data_ptr());
  uLong crc = crc32(0L, Z_NULL, 0);
  size_t done = 0;
  while (done < bytes) {
    const auto chunk = static_cast<uInt>(std::min<size_t>(bytes - done, 1u << 30));
    crc = crc32(crc, data + done, chunk);
    done += chunk;
  }
  return static_cast<uint32_t>(crc);
}

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [key, value] : tensors) {
    if (key == name) {
      return &value;
    }
  }
  return nullptr;
}

void save(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir / "tensors");
  json index = json::array();
  for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const auto& [name, tensor] = ckpt.tensors[i];
    auto t = tensor.detach().to(torch::kFloat32).contiguous();
    char file[32];
    std::snprintf(file, sizeof(file), "tensors/%05zu.f32", i);
    std::ofstream out(dir / file, std::ios::binary);
    out.write(static_cast<const char*>(t.data_ptr()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) {
      throw std::runtime_error("checkpoint: failed writing tensor " + name);
    }
    index.push_back({{"name", name},
                     {"shape", t.sizes().vec()},
                     {"dtype", "float32"},
                     {"file", file},
                     {"crc32", crc_of(t)}});
  }
  json manifest{{"role", ckpt.role},
                {"step", ckpt.step},
                {"config", ckpt.config},
                {"extra", ckpt.extra},
                {"tensors", index}};
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    out << manifest.dump(2) << "\n";
    if (!out) {
      throw std::runtime_error("checkpoint: failed writing manifest in " + dir.string());
    }
  }
  fs::rename(tmp, dir / "manifest.json");
}

Checkpoint load(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    throw std::runtime_error("checkpoint: no manifest.json in " + dir.string());
  }
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: malformed manifest in " + dir.string() + ": " + e.what());
  }
  Checkpoint ckpt;
  ckpt.role = manifest.value("role", std::string{});
  ckpt.step = manifest.value("step", int64_t{0});
  ckpt.config = manifest.value("config", json::object());
  ckpt.extra = manifest.value("extra", json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    if (entry.value("dtype", std::string{"float32"}) != "float32") {
      throw std::runtime_error("checkpoint: tensor " + name + " has unsupported dtype");
    }
    auto t = torch::empty(shape, torch::kFloat32);
    const auto path = dir / entry.at("file").get<std::string>();
    const auto expected = static_cast<std::uintmax_t>(t.numel()) * sizeof(float);
    if (!fs::exists(path) || fs::file_size(path) != expected) {
      throw std::runtime_error("checkpoint: blob for tensor " + name + " is missing or has " +
                               "the wrong size (" + path.string() + ")");
    }
    std::ifstream blob(path, std::ios::binary);
    blob.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(expected));
    if (!blob) {
      throw std::runtime_error("checkpoint: short read for tensor " + name);
    }
    if (entry.contains("crc32") && entry.at("crc32").get<uint32_t>() != crc_of(t)) {
      throw std::runtime_error("checkpoint: checksum mismatch for tensor " + name);
    }
    ckpt.tensors.emplace_back(name, t);
  }
  return ckpt;
}

namespace {

// Parameters plus floating-point buffers (normalisation running statistics).
// Integer buffers such as batch counters are not needed for inference.
std::vector<std::pair<std::string, torch::Tensor>> module_state(const torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : m.named_parameters()) {
    out.emplace_back(item.key(), item.value());
  }
  for (const auto& item : m.named_buffers()) {
    if (item.value().is_floating_point()) {
      out.emplace_back(item.key(), item.value());
    }
  }
  return out;
}

}  // namespace

void add_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& [key, value] : module_state(m)) {
    ckpt.tensors.emplace_back(prefix + "/" + key, value.detach().clone());
  }
}

void restore_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& m) {
  torch::NoGradGuard guard;
  for (auto& [key, value] : module_state(m)) {
    const auto name = prefix + "/" + key;
    const auto* t = ckpt.find(name);
    if (t == nullptr) {
      throw std::runtime_error("checkpoint: missing tensor " + name);
    }
    if (t->sizes() != value.sizes()) {
      std::ostringstream os;
      os << "checkpoint: shape mismatch for tensor " << name << ": stored " << t->sizes()
         << ", model " << value.sizes();
      throw std::runtime_error(os.str());
    }
    value.copy_(*t);
  }
}

void add_adam_state(Checkpoint& ckpt, const std::string& prefix, torch::optim::Adam& opt,
                    const torch::nn::Module& m) {
  auto& state = opt.state();
  for (const auto& item : m.named_parameters()) {
    const auto it = state.find(item.value().unsafeGetTensorImpl());
    if (it == state.end()) {
      continue;
    }
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    ckpt.tensors.emplace_back(prefix + "/" + item.key() + "/exp_avg", s.exp_avg().clone());
    ckpt.tensors.emplace_back(prefix + "/" + item.key() + "/exp_avg_sq", s.exp_avg_sq().clone());
    ckpt.extra[prefix + "_steps"][item.key()] = s.step();
  }
}

void restore_adam_state(const Checkpoint& ckpt, const std::string& prefix, torch::optim::Adam& opt,
                        torch::nn::Module& m) {
  auto& state = opt.state();
  const auto steps = ckpt.extra.value(prefix + "_steps", json::object());
  for (auto& item : m.named_parameters()) {
    const auto* avg = ckpt.find(prefix + "/" + item.key() + "/exp_avg");
    const auto* avg_sq = ckpt.find(prefix + "/" + item.key() + "/exp_avg_sq");
    if (avg == nullptr || avg_sq == nullptr || !steps.contains(item.key())) {
      continue;
    }
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(steps.at(item.key()).get<int64_t>());
    s->exp_avg(avg->clone());
    s->exp_avg_sq(avg_sq->clone());
    state[item.value().unsafeGetTensorImpl()] = std::move(s);
  }
}

std::string fingerprint(const torch::nn::Module& m) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [key, value] : module_state(m)) {
    auto t = value.detach().contiguous();
    crc = crc32(crc, reinterpret_cast<const Bytef*>(key.data()), static_cast<uInt>(key.size()));
    const auto part = crc_of(t);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(&part), sizeof(part));
  }
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

}  // namespace lipsync::ckpt
