#include "trackletmr/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>

#include <json.hpp>

#include "trackletmr/errors.hpp"

namespace tmr {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'T', 'M', 'R', 'C', 'K', 'P', 'T', '1'};

void append_u64(std::uint64_t v, std::string& out) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

json config_to_json(const ModelConfig& cfg) {
  return json{{"d_model", cfg.d_model},
              {"num_blocks", cfg.num_blocks},
              {"strided_blocks", cfg.strided_blocks},
              {"heads", cfg.heads},
              {"mlp_ratio", cfg.mlp_ratio},
              {"head_depth", cfg.head_depth},
              {"dropout", cfg.dropout},
              {"d_in", cfg.d_in},
              {"d_t", cfg.d_t},
              {"d_frame", cfg.d_frame},
              {"L_max", cfg.L_max}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.num_blocks = j.at("num_blocks").get<int>();
  cfg.strided_blocks = j.at("strided_blocks").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.mlp_ratio = j.at("mlp_ratio").get<int>();
  cfg.head_depth = j.at("head_depth").get<int>();
  cfg.dropout = j.at("dropout").get<double>();
  cfg.d_in = j.at("d_in").get<int>();
  cfg.d_t = j.at("d_t").get<int>();
  cfg.d_frame = j.at("d_frame").get<int>();
  cfg.L_max = j.at("L_max").get<int>();
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStore<float>& params) {
  json tensors = json::array();
  for (const auto& [name, tensor] : params.tensors) {
    json shape = json::array();
    for (auto d : tensor.shape) shape.push_back(d);
    tensors.push_back(json{{"name", name}, {"shape", std::move(shape)}});
  }
  const json header{{"config", config_to_json(cfg)}, {"params", std::move(tensors)}};
  const std::string header_str = header.dump();

  std::string bytes(kMagic, sizeof(kMagic));
  append_u64(header_str.size(), bytes);
  bytes += header_str;
  for (const auto& [name, tensor] : params.tensors)
    for (const float f : tensor.data) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);

  if (bytes.size() < sizeof(kMagic) + 8 ||
      !std::equal(kMagic, kMagic + sizeof(kMagic), bytes.begin()))
    throw FormatError("not a checkpoint file: " + path);
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i)
    header_len |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[sizeof(kMagic) + i]))
                  << (8 * i);
  const std::size_t payload_off = sizeof(kMagic) + 8 + header_len;
  if (payload_off > bytes.size()) throw FormatError("checkpoint header truncated");

  json header;
  try {
    header = json::parse(bytes.substr(sizeof(kMagic) + 8, header_len));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  try {
    Checkpoint ckpt;
    ckpt.config = config_from_json(header.at("config"));
    ckpt.config.validate();

    std::size_t off = payload_off;
    for (const auto& jt : header.at("params")) {
      const std::string name = jt.at("name").get<std::string>();
      ad::Shape shape;
      for (const auto& d : jt.at("shape")) shape.push_back(d.get<std::int64_t>());
      const auto numel = ad::shape_numel(shape);
      if (off + static_cast<std::size_t>(numel) * 4 > bytes.size())
        throw FormatError("checkpoint payload truncated at '" + name + "'");
      ad::Tensor<float> t = ad::Tensor<float>::zeros(shape);
      for (std::int64_t i = 0; i < numel; ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k)
          u |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[off + 4 * i + k]))
               << (8 * k);
        t.data[static_cast<std::size_t>(i)] = std::bit_cast<float>(u);
      }
      off += static_cast<std::size_t>(numel) * 4;
      if (!ckpt.params.tensors.emplace(name, std::move(t)).second)
        throw FormatError("duplicate parameter '" + name + "' in checkpoint");
    }
    if (off != bytes.size()) throw FormatError("checkpoint has trailing bytes");

    // The fresh registry for this config defines the expected names/shapes.
    const auto expected = init_params<float>(ckpt.config, 0);
    if (expected.tensors.size() != ckpt.params.tensors.size())
      throw FormatError("checkpoint parameter set disagrees with its config");
    for (const auto& [name, tensor] : expected.tensors) {
      auto it = ckpt.params.tensors.find(name);
      if (it == ckpt.params.tensors.end())
        throw FormatError("checkpoint is missing parameter '" + name + "'");
      if (it->second.shape != tensor.shape)
        throw FormatError("checkpoint shape mismatch for '" + name + "': got " +
                          ad::shape_str(it->second.shape) + ", want " +
                          ad::shape_str(tensor.shape));
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header field error: ") + e.what());
  }
}

}  // namespace tmr
