#include "evd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "evd/errors.hpp"

namespace evd::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

using nlohmann::json;

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

std::string head_string(models::Head h) { return h == models::Head::segmentation ? "segmentation" : "recognition"; }
std::string codomain_string(models::Codomain c) {
  return c == models::Codomain::unit_interval ? "unit_interval" : "unbounded";
}

}  // namespace

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  json header = archive.header;
  header["schema_version"] = kSchemaVersion;
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, bytes] : archive.blobs) {
    index.push_back({{"name", name}, {"offset", offset}, {"size", bytes.size()}});
    offset += bytes.size();
  }
  header["blobs"] = index;
  const std::string h = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write("EVDC", 4);
    put_u32(os, static_cast<std::uint32_t>(h.size()));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, bytes] : archive.blobs) {
      os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || bytes.compare(0, 4, "EVDC") != 0) {
    throw FormatError(FormatErrc::bad_magic, path.string() + ": expected 'EVDC'");
  }
  if (bytes.size() < 8) throw FormatError(FormatErrc::truncated, path.string() + ": short header");
  std::uint32_t hlen = 0;
  for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  if (bytes.size() < 8 + static_cast<std::size_t>(hlen)) {
    throw FormatError(FormatErrc::truncated, path.string() + ": header exceeds file");
  }
  Archive a;
  try {
    a.header = json::parse(bytes.substr(8, hlen));
  } catch (const json::exception& e) {
    throw FormatError(FormatErrc::bad_header, path.string() + ": " + e.what());
  }
  if (a.header.value("schema_version", -1) != kSchemaVersion) {
    throw FormatError(FormatErrc::bad_header,
                      path.string() + ": unsupported schema_version " +
                          a.header.value("schema_version", json(-1)).dump());
  }
  const std::size_t base = 8 + hlen;
  for (const auto& b : a.header.at("blobs")) {
    const auto off = b.at("offset").get<std::uint64_t>();
    const auto size = b.at("size").get<std::uint64_t>();
    if (base + off + size > bytes.size()) {
      throw FormatError(FormatErrc::truncated, path.string() + ": blob '" +
                                                   b.at("name").get<std::string>() + "' truncated");
    }
    a.blobs[b.at("name").get<std::string>()] = bytes.substr(base + off, size);
  }
  return a;
}

json to_json(const models::ArchConfig& a) {
  return {{"in_channels", a.in_channels}, {"out_channels", a.out_channels},
          {"base_width", a.base_width},   {"stages", a.stages},
          {"head", head_string(a.head)},  {"codomain", codomain_string(a.codomain)},
          {"seed", a.seed}};
}

models::ArchConfig arch_from_json(const json& j) {
  models::ArchConfig a;
  a.in_channels = j.at("in_channels").get<int>();
  a.out_channels = j.at("out_channels").get<int>();
  a.base_width = j.at("base_width").get<int>();
  a.stages = j.at("stages").get<int>();
  a.head = j.at("head").get<std::string>() == "recognition" ? models::Head::recognition
                                                             : models::Head::segmentation;
  a.codomain = j.at("codomain").get<std::string>() == "unbounded" ? models::Codomain::unbounded
                                                                  : models::Codomain::unit_interval;
  a.seed = j.at("seed").get<std::uint64_t>();
  return a;
}

void put_module(Archive& archive, const std::string& prefix, const torch::nn::Module& m) {
  json shapes = json::object();
  auto store = [&](const std::string& name, const torch::Tensor& t) {
    const auto c = t.detach().to(torch::kFloat32).contiguous();
    archive.blobs[prefix + "/" + name] =
        std::string(static_cast<const char*>(c.data_ptr()), static_cast<std::size_t>(c.numel()) * 4);
    shapes[name] = c.sizes().vec();
  };
  for (const auto& p : m.named_parameters()) store(p.key(), p.value());
  for (const auto& b : m.named_buffers()) store(b.key(), b.value());
  archive.header["modules"][prefix] = shapes;
}

void get_module(const Archive& archive, const std::string& prefix, torch::nn::Module& m) {
  torch::NoGradGuard guard;
  auto load = [&](const std::string& name, torch::Tensor& t) {
    const auto it = archive.blobs.find(prefix + "/" + name);
    if (it == archive.blobs.end()) {
      throw FormatError(FormatErrc::bad_record, "checkpoint lacks tensor '" + prefix + "/" + name + "'");
    }
    if (it->second.size() != static_cast<std::size_t>(t.numel()) * 4) {
      throw FormatError(FormatErrc::bad_record, "shape mismatch for '" + prefix + "/" + name + "'");
    }
    auto src = torch::empty(t.sizes(), torch::kFloat32);
    std::memcpy(src.data_ptr(), it->second.data(), it->second.size());
    t.copy_(src);
  };
  for (auto& p : m.named_parameters()) load(p.key(), p.value());
  for (auto& b : m.named_buffers()) load(b.key(), b.value());
}

void put_network(Archive& archive, const std::string& name, const models::Network& net) {
  archive.header["networks"][name] = {{"role", models::to_string(net.role)}, {"arch", to_json(net.arch)}};
  put_module(archive, name, *net.module());
}

models::Network get_network(const Archive& archive, const std::string& name) {
  const auto& nets = archive.header.at("networks");
  if (!nets.contains(name)) {
    throw FormatError(FormatErrc::bad_record, "checkpoint has no network '" + name + "'");
  }
  const auto& entry = nets.at(name);
  auto net = models::build(models::role_from_string(entry.at("role").get<std::string>()),
                           arch_from_json(entry.at("arch")));
  get_module(archive, name, *net.module());
  return net;
}

std::string serialize_optimizer(const torch::optim::Optimizer& opt) {
  torch::serialize::OutputArchive out;
  opt.save(out);
  std::ostringstream os;
  out.save_to(os);
  return os.str();
}

void deserialize_optimizer(const std::string& bytes, torch::optim::Optimizer& opt) {
  torch::serialize::InputArchive in;
  std::istringstream is(bytes);
  in.load_from(is);
  opt.load(in);
}

models::Network clone(const models::Network& net) {
  Archive a;
  put_network(a, "net", net);
  return get_network(a, "net");
}

void save_network(const std::filesystem::path& path, const models::Network& net) {
  Archive a;
  a.header["kind"] = "network";
  put_network(a, "net", net);
  write_archive(path, a);
}

models::Network load_network(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  return get_network(a, "net");
}

}  // namespace evd::ckpt
