#include "issnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "issnet/errors.hpp"

namespace issnet {

namespace {

void put_le(std::vector<std::uint8_t>& out, std::uint64_t bits, std::size_t bytes) {
  for (std::size_t b = 0; b < bytes; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

std::uint64_t get_le(const std::uint8_t* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t b = 0; b < bytes; ++b) v |= std::uint64_t{p[b]} << (8 * b);
  return v;
}

struct Writer {
  ElementType type;
  std::vector<std::uint8_t> payload;
  Json tensors = Json::array();
  Json masks = Json::array();

  void tensor(const std::string& name, const Tensor& t) {
    const std::size_t offset = payload.size();
    for (double v : t.values()) {
      if (type == ElementType::f64)
        put_le(payload, std::bit_cast<std::uint64_t>(v), 8);
      else
        put_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    }
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"bytes", payload.size() - offset}});
  }

  void mask(const std::string& name, const std::vector<std::uint8_t>& bits) {
    const std::size_t offset = payload.size();
    for (std::size_t i = 0; i < bits.size(); i += 8) {
      std::uint8_t byte = 0;
      for (std::size_t b = 0; b < 8 && i + b < bits.size(); ++b)
        if (bits[i + b]) byte |= static_cast<std::uint8_t>(1u << b);
      payload.push_back(byte);
    }
    masks.push_back({{"name", name}, {"bits", bits.size()}, {"offset", offset}, {"bytes", payload.size() - offset}});
  }
};

struct Reader {
  ElementType type;
  const std::vector<std::uint8_t>& payload;
  std::string origin;

  const Json& find(const Json& table, const std::string& name) const {
    for (const Json& e : table)
      if (e.at("name") == name) return e;
    throw FormatError(origin + ": manifest has no entry '" + name + "'");
  }

  void check_range(const Json& e, std::size_t expected_bytes) const {
    const std::size_t offset = e.at("offset"), bytes = e.at("bytes");
    if (bytes != expected_bytes)
      throw FormatError(origin + ": entry '" + e.at("name").get<std::string>() + "' declares " +
                        std::to_string(bytes) + " bytes, expected " + std::to_string(expected_bytes));
    if (offset + bytes > payload.size())
      throw FormatError(origin + ": entry '" + e.at("name").get<std::string>() + "' at payload offset " +
                        std::to_string(offset) + " runs past the payload end (" + std::to_string(payload.size()) +
                        " bytes)");
  }

  Tensor tensor(const Json& table, const std::string& name, const Shape& expected) const {
    const Json& e = find(table, name);
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != expected)
      throw FormatError(origin + ": tensor '" + name + "' has shape " + shape_to_string(shape) + ", expected " +
                        shape_to_string(expected));
    const std::size_t esize = type == ElementType::f64 ? 8 : 4;
    check_range(e, shape_size(shape) * esize);
    const std::uint8_t* p = payload.data() + e.at("offset").get<std::size_t>();
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i, p += esize) {
      t[i] = type == ElementType::f64 ? std::bit_cast<double>(get_le(p, 8))
                                      : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p, 4))));
    }
    return t;
  }

  std::vector<std::uint8_t> mask(const Json& e) const {
    const std::size_t bits = e.at("bits");
    check_range(e, (bits + 7) / 8);
    const std::uint8_t* p = payload.data() + e.at("offset").get<std::size_t>();
    std::vector<std::uint8_t> out(bits);
    for (std::size_t i = 0; i < bits; ++i) out[i] = (p[i / 8] >> (i % 8)) & 1u;
    return out;
  }
};

}  // namespace

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t epoch) {
  char name[64];
  std::snprintf(name, sizeof name, "ckpt-epoch-%04zu.bin", epoch);
  return dir / name;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, ElementType type) {
  validate_params(ckpt.net, ckpt.state.params);
  Writer w{type, {}, Json::array(), Json::array()};
  Json penalties = Json::array();
  for (std::size_t i = 0; i < ckpt.state.params.size(); ++i) {
    const LayerParams& p = ckpt.state.params[i];
    const CoupledLayer& c = ckpt.state.layers[i];
    penalties.push_back(to_json(c.penalty));
    w.tensor(p.name + ".weight", p.weight);
    w.tensor(p.name + ".momentum", c.momentum);
    if (p.has_bias) {
      w.tensor(p.name + ".bias", p.bias);
      w.tensor(p.name + ".bias_momentum", c.bias_momentum);
    }
    if (c.penalty) {
      w.tensor(p.name + ".V", c.v);
      w.tensor(p.name + ".Gamma", c.gamma);
      w.tensor(p.name + ".g", c.g);
    }
  }
  Json mask = nullptr;
  if (ckpt.mask) {
    for (std::size_t i = 0; i < ckpt.mask->layers.size(); ++i)
      w.mask(ckpt.state.params[i].name + ".mask", ckpt.mask->layers[i]);
    mask = {{"level", mask_level_name(ckpt.mask->level)}, {"entries", w.masks}};
  }
  const Json manifest = {{"format", kCheckpointFormat},
                         {"element_type", type == ElementType::f64 ? "f64" : "f32"},
                         {"byte_order", "little"},
                         {"epoch", ckpt.epoch},
                         {"step", ckpt.state.step},
                         {"seed", ckpt.seed},
                         {"config_hash", ckpt.config_hash},
                         {"network", to_json(ckpt.net)},
                         {"penalties", penalties},
                         {"tensors", w.tensors},
                         {"mask", mask},
                         {"payload_bytes", w.payload.size()}};
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw NotFoundError("cannot write " + tmp.string());
    const std::string header = manifest.dump() + "\n";
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(w.payload.data()), static_cast<std::streamsize>(w.payload.size()));
    if (!out) throw NotFoundError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("checkpoint not found: " + path.string());
  std::string header;
  std::getline(in, header);
  std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string origin = path.string();
  Json m = Json::parse(header, nullptr, false);
  if (m.is_discarded() || !m.is_object()) throw FormatError(origin + ": manifest line is not a JSON object (offset 0)");
  try {
    if (m.at("format") != kCheckpointFormat)
      throw FormatError(origin + ": unsupported format '" + m.at("format").dump() + "'");
    const std::string et = m.at("element_type");
    if (et != "f64" && et != "f32") throw FormatError(origin + ": unknown element type '" + et + "'");
    const std::size_t declared = m.at("payload_bytes");
    if (declared != payload.size())
      throw FormatError(origin + ": payload at byte offset " + std::to_string(header.size() + 1) + " should hold " +
                        std::to_string(declared) + " bytes, found " + std::to_string(payload.size()));
    Checkpoint ck;
    ck.epoch = m.at("epoch");
    ck.seed = m.at("seed");
    ck.config_hash = m.at("config_hash");
    ck.net = network_from_json(m.at("network"));
    Reader r{et == "f64" ? ElementType::f64 : ElementType::f32, payload, origin};
    const Json& tensors = m.at("tensors");
    const std::vector<ParamSlot> slots = parameter_slots(ck.net);
    const Json& penalties = m.at("penalties");
    if (penalties.size() != slots.size()) throw FormatError(origin + ": penalty table does not match the network");
    ParamSet params;
    std::vector<std::optional<PenaltySpec>> pens;
    for (const ParamSlot& s : slots) {
      LayerParams p{s.name, r.tensor(tensors, s.name + ".weight", s.weight_shape), Tensor(), s.conv, s.has_bias};
      if (s.has_bias) p.bias = r.tensor(tensors, s.name + ".bias", {s.weight_shape[0]});
      params.layers.push_back(std::move(p));
      pens.push_back(penalty_from_json(penalties[pens.size()]));
    }
    ck.state = CoupledState::init(params, pens);
    ck.state.step = m.at("step");
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const ParamSlot& s = slots[i];
      CoupledLayer& c = ck.state.layers[i];
      c.momentum = r.tensor(tensors, s.name + ".momentum", s.weight_shape);
      if (s.has_bias) c.bias_momentum = r.tensor(tensors, s.name + ".bias_momentum", {s.weight_shape[0]});
      if (c.penalty) {
        c.v = r.tensor(tensors, s.name + ".V", s.weight_shape);
        c.gamma = r.tensor(tensors, s.name + ".Gamma", s.weight_shape);
        c.g = r.tensor(tensors, s.name + ".g", s.weight_shape);
      }
    }
    if (const Json& mask = m.at("mask"); !mask.is_null()) {
      Mask mk{parse_mask_level(mask.at("level")), {}};
      for (const ParamSlot& s : slots) mk.layers.push_back(r.mask(r.find(mask.at("entries"), s.name + ".mask")));
      ck.mask = std::move(mk);
    }
    return ck;
  } catch (const Json::exception& e) {
    throw FormatError(origin + ": malformed manifest: " + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(origin + ": " + e.what());
  }
}

}  // namespace issnet
