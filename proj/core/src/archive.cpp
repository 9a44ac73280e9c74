#include "lwd/archive.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "lwd/errors.hpp"

namespace lwd {

namespace {

constexpr char kMagic[8] = {'L', 'W', 'D', 'A', 'R', 'C', 'H', '1'};

static_assert(std::endian::native == std::endian::little, "archive payloads assume a little-endian host");

template <typename T>
void append_pod(std::vector<unsigned char>& out, T v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T read_pod(const std::vector<unsigned char>& in, std::size_t& pos, const std::string& origin) {
  if (pos + sizeof(T) > in.size()) throw LoadError(origin + ": truncated archive");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md.data(), &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

void Archive::put(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

const Tensor& Archive::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LoadError("archive of kind '" + kind_ + "' has no tensor '" + name + "'");
  return it->second;
}

std::vector<unsigned char> Archive::serialize() const {
  nlohmann::json header;
  header["kind"] = kind_;
  header["meta"] = meta_;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  }
  const std::string h = header.dump();

  std::vector<unsigned char> out(kMagic, kMagic + 8);
  append_pod<std::uint32_t>(out, kFormatVersion);
  append_pod<std::uint32_t>(out, 0);
  append_pod<std::uint64_t>(out, h.size());
  out.insert(out.end(), h.begin(), h.end());
  for (const auto& [name, t] : tensors_) {
    const auto* p = reinterpret_cast<const unsigned char*>(t.ptr());
    out.insert(out.end(), p, p + t.size() * sizeof(double));
  }
  return out;
}

Archive Archive::deserialize(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw LoadError(origin + ": not an lwd archive (bad magic)");
  }
  std::size_t pos = 8;
  const auto version = read_pod<std::uint32_t>(bytes, pos, origin);
  if (version != kFormatVersion) {
    throw LoadError(origin + ": unsupported archive version " + std::to_string(version));
  }
  read_pod<std::uint32_t>(bytes, pos, origin);
  const auto hlen = read_pod<std::uint64_t>(bytes, pos, origin);
  if (pos + hlen > bytes.size()) throw LoadError(origin + ": truncated archive header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + hlen));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(origin + ": corrupt archive header: " + e.what());
  }
  pos += hlen;

  Archive a(header.at("kind").get<std::string>());
  a.meta_ = header.value("meta", nlohmann::json::object());
  const std::size_t base = pos;
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (count != shape_numel(shape)) throw LoadError(origin + ": tensor table inconsistent");
    const std::size_t start = base + offset * sizeof(double);
    if (start + count * sizeof(double) > bytes.size()) throw LoadError(origin + ": truncated tensor payload");
    std::vector<double> data(count);
    std::memcpy(data.data(), bytes.data() + start, count * sizeof(double));
    a.tensors_[entry.at("name").get<std::string>()] = Tensor(shape, std::move(data));
  }
  return a;
}

void Archive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Archive Archive::load(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open archive " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Archive a;
  try {
    a = deserialize(bytes, path.string());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  if (!expected_kind.empty() && a.kind() != expected_kind) {
    throw LoadError(path.string() + ": expected archive kind '" + expected_kind + "', found '" + a.kind() + "'");
  }
  return a;
}

std::string Archive::sha256() const {
  const auto bytes = serialize();
  return sha256_hex(bytes.data(), bytes.size());
}

std::string sha256_hex(const void* data, std::size_t size) {
  Sha256 h;
  h.update(data, size);
  return h.hex();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string tensor_fingerprint(const std::map<std::string, Tensor>& tensors) {
  Sha256 h;
  for (const auto& [name, t] : tensors) {
    h.update(name.data(), name.size());
    for (int d : t.shape()) h.update(&d, sizeof d);
    h.update(t.ptr(), t.size() * sizeof(double));
  }
  return h.hex().substr(0, 16);
}

}  // namespace lwd
