#include "dgp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dgp {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"family", family_name(c.family)},
                     {"input", c.input_shape},
                     {"widths", c.widths},
                     {"output_dim", c.output_dim},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.family = family_from_name(j.at("family").get<std::string>());
  c.input_shape = j.at("input").get<std::vector<int>>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.output_dim = j.at("output_dim").get<int>();
  c.seed = j.value("seed", std::uint64_t{0});
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

constexpr char kMagic[8] = {'D', 'G', 'P', 'C', 'K', 'P', 'T', '\x01'};

void put_u32(std::ofstream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::ofstream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::ifstream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t get_u64(std::ifstream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (!ckpt.mask.empty() && ckpt.mask.size() != ckpt.params.size())
    throw std::invalid_argument("checkpoint: mask/params length mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for write");

  os.write(kMagic, sizeof kMagic);
  nlohmann::json header{{"format_version", 1},
                        {"model", ckpt.model},
                        {"seed", ckpt.seed}};
  const std::string hs = header.dump();
  put_u32(os, static_cast<std::uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  put_u64(os, ckpt.params.size());
  os.write(reinterpret_cast<const char*>(ckpt.params.data()),
           static_cast<std::streamsize>(ckpt.params.size() * sizeof(double)));

  put_u64(os, ckpt.params.size());
  std::vector<std::uint8_t> packed((ckpt.params.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const bool alive = ckpt.mask.empty() || ckpt.mask[i] != 0;
    if (alive) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  os.write(reinterpret_cast<const char*>(packed.data()),
           static_cast<std::streamsize>(packed.size()));
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");

  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("'" + path.string() + "' is not a checkpoint file");

  const std::uint32_t hlen = get_u32(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  const nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("format_version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint format version");

  Checkpoint ckpt;
  ckpt.model = header.at("model").get<ModelConfig>();
  ckpt.seed = header.at("seed").get<std::uint64_t>();

  const std::uint64_t pcount = get_u64(is);
  ckpt.params.resize(pcount);
  is.read(reinterpret_cast<char*>(ckpt.params.data()),
          static_cast<std::streamsize>(pcount * sizeof(double)));

  const std::uint64_t mcount = get_u64(is);
  if (mcount != pcount)
    throw std::runtime_error("checkpoint mask count mismatch");
  std::vector<std::uint8_t> packed((pcount + 7) / 8);
  is.read(reinterpret_cast<char*>(packed.data()),
          static_cast<std::streamsize>(packed.size()));
  if (!is) throw std::runtime_error("truncated checkpoint '" + path.string() + "'");
  ckpt.mask.resize(pcount);
  for (std::uint64_t i = 0; i < pcount; ++i)
    ckpt.mask[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return ckpt;
}

}  // namespace dgp
