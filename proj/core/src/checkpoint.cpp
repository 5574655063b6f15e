#include "pianet/train/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "pianet/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace pianet::train {

namespace {

constexpr char kMagic[8] = {'P', 'I', 'A', 'N', 'E', 'T', 'C', 'K'};

std::size_t shape_count(const Tensor5::Shape& s) {
  return s[0] * s[1] * s[2] * s[3] * s[4];
}

nlohmann::json model_to_json(const model::PiaNetConfig& m) {
  nlohmann::json j;
  j["input_cube_side"] = m.input_cube_side;
  j["contracting_widths"] = m.contracting_widths;
  j["expanding_widths"] = m.expanding_widths;
  nlohmann::json scales = nlohmann::json::array();
  for (const auto& [s, a] : m.prediction_scales) scales.push_back({s, a});
  j["prediction_scales"] = scales;
  j["anchor_sides_mm"] = m.anchor_sides_mm;
  return j;
}

model::PiaNetConfig model_from_json(const nlohmann::json& j) {
  model::PiaNetConfig m;
  m.input_cube_side = j.at("input_cube_side").get<std::size_t>();
  m.contracting_widths = j.at("contracting_widths");
  m.expanding_widths = j.at("expanding_widths");
  m.prediction_scales.clear();
  for (const auto& s : j.at("prediction_scales"))
    m.prediction_scales.emplace_back(s.at(0).get<std::size_t>(),
                                     s.at(1).get<std::size_t>());
  m.anchor_sides_mm = j.at("anchor_sides_mm").get<std::vector<double>>();
  m.validate();
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["version"] = ck.version;
  manifest["stage"] = ck.stage;
  manifest["epoch"] = ck.epoch;
  manifest["step"] = ck.step;
  manifest["rng_state"] = ck.rng_state;
  manifest["model"] = model_to_json(ck.model);
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : ck.history)
    hist.push_back({h.total, h.confidence_term, h.localization_term,
                    h.positives, h.negatives});
  manifest["history"] = hist;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : ck.tensors) {
    if (t.data.size() != shape_count(t.shape))
      throw ConfigError("checkpoint: tensor " + name +
                        " payload does not match its shape");
    tensors.push_back({{"name", name}, {"shape", t.shape}});
  }
  manifest["tensors"] = tensors;

  const std::string m = manifest.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kMagic, 8);
  const std::uint32_t version = ck.version;
  f.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t mlen = m.size();
  f.write(reinterpret_cast<const char*>(&mlen), 8);
  f.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& [name, t] : ck.tensors)
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * 8));
  if (!f) throw IoError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError(path + ": not a checkpoint file (bad magic)");
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (!f || version != 1)
    throw DataError(path + ": unsupported checkpoint version " +
                    std::to_string(version));
  std::uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), 8);
  if (!f) throw DataError(path + ": truncated manifest length");
  std::string m(mlen, '\0');
  f.read(m.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw DataError(path + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": manifest parse failure: " + e.what());
  }
  Checkpoint ck;
  try {
    ck.version = manifest.at("version").get<std::uint32_t>();
    ck.stage = manifest.at("stage").get<int>();
    ck.epoch = manifest.at("epoch").get<std::uint64_t>();
    ck.step = manifest.at("step").get<std::uint64_t>();
    ck.rng_state = manifest.at("rng_state").get<std::string>();
    ck.model = model_from_json(manifest.at("model"));
    for (const auto& h : manifest.at("history"))
      ck.history.push_back({h.at(0).get<double>(), h.at(1).get<double>(),
                            h.at(2).get<double>(), h.at(3).get<std::size_t>(),
                            h.at(4).get<std::size_t>()});
    for (const auto& t : manifest.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      NamedTensor nt;
      nt.shape = t.at("shape");
      nt.data.resize(shape_count(nt.shape));
      f.read(reinterpret_cast<char*>(nt.data.data()),
             static_cast<std::streamsize>(nt.data.size() * 8));
      if (!f)
        throw DataError(path + ": truncated payload for tensor " + name);
      if (!ck.tensors.emplace(name, std::move(nt)).second)
        throw DataError(path + ": duplicate tensor " + name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": malformed manifest: " + e.what());
  }
  f.peek();
  if (!f.eof()) throw DataError(path + ": trailing bytes after tensor payload");
  return ck;
}

void capture_params(Checkpoint& ck, const std::vector<nn::ParamRef>& refs) {
  for (const auto& r : refs) {
    if (r.value->size() != shape_count(r.shape))
      throw ConfigError("checkpoint: live tensor " + r.name +
                        " does not match its declared shape");
    ck.tensors[r.name] = {r.shape, *r.value};
  }
}

void capture_optimizer(Checkpoint& ck, const nn::Sgd& opt) {
  for (const auto& [name, v] : opt.velocity())
    ck.tensors["opt." + name] = {{v.size(), 1, 1, 1, 1}, v};
}

void restore_params(const Checkpoint& ck, const std::vector<nn::ParamRef>& refs) {
  for (const auto& r : refs) {
    auto it = ck.tensors.find(r.name);
    if (it == ck.tensors.end())
      throw DataError("checkpoint: missing tensor " + r.name);
    if (it->second.shape != r.shape)
      throw DataError("checkpoint: shape mismatch for tensor " + r.name);
  }
  for (const auto& r : refs) *r.value = ck.tensors.at(r.name).data;
}

void restore_optimizer(const Checkpoint& ck, nn::Sgd& opt) {
  opt.velocity().clear();
  for (const auto& [name, t] : ck.tensors)
    if (name.starts_with("opt."))
      opt.velocity()[name.substr(4)] = t.data;
}

std::size_t transfer_features(const Checkpoint& ck,
                              const std::vector<nn::ParamRef>& refs) {
  std::size_t copied = 0;
  for (const auto& r : refs) {
    if (!r.name.starts_with("fe.")) continue;
    auto it = ck.tensors.find(r.name);
    if (it == ck.tensors.end())
      throw DataError("checkpoint: missing feature tensor " + r.name);
    if (it->second.shape != r.shape)
      throw DataError("checkpoint: shape mismatch for feature tensor " + r.name);
    *r.value = it->second.data;
    ++copied;
  }
  if (copied == 0)
    throw DataError("checkpoint: no feature tensors to transfer");
  return copied;
}

}  // namespace pianet::train
