#include "pother/net/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pother/core/error.hpp"

namespace pother::net {

namespace {

constexpr std::array<char, 8> kMagic = {'P', 'O', 'T', 'H', 'R', 'C', 'K', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

std::uint64_t read_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

nlohmann::json read_header(std::istream& in, const std::filesystem::path& path) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw DataError("not a checkpoint file: " + path.string());
  const auto len = read_u64(in);
  if (!in || len > (1u << 26)) throw DataError("corrupt checkpoint header: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("truncated checkpoint header: " + path.string());
  return nlohmann::json::parse(text);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, torch::nn::Module& module) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::string text = header.dump();
  out.write(kMagic.data(), kMagic.size());
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to(out);
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_header(in, path);
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  auto header = read_header(in, path);
  std::stringstream blob;
  blob << in.rdbuf();
  torch::serialize::InputArchive archive;
  archive.load_from(blob);
  module.load(archive);
  return header;
}

}  // namespace pother::net
