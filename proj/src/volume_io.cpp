#include "jbf/volume_io.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <vector>

namespace jbf {

Volume::Volume(int nx_, int ny_, int nz_, float fill) : nx(nx_), ny(ny_), nz(nz_) {
  if (nx <= 0 || ny <= 0 || nz <= 0) throw std::invalid_argument("volume extents must be positive");
  data.assign(static_cast<std::size_t>(nx) * ny * nz, fill);
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// Little-endian encoding written byte by byte so the files do not depend on
// host byte order.
template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_le(out, bits);
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  float f32() {
    const auto bits = le<std::uint32_t>();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw TruncatedError(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  const std::vector<unsigned char>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string shortest(float f) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, f);
  return std::string(buf, res.ptr);
}

// Reads one '\n'-terminated header line starting at `pos`.
std::string header_line(const std::vector<unsigned char>& bytes, std::size_t& pos, const std::string& what) {
  const auto begin = bytes.begin() + static_cast<std::ptrdiff_t>(pos);
  const auto nl = std::find(begin, bytes.end(), '\n');
  if (nl == bytes.end()) throw TruncatedError(what + ": header ends early");
  std::string line(begin, nl);
  pos = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  return line;
}

}  // namespace

Volume read_volume(const std::filesystem::path& path) {
  const std::string what = path.string();
  const auto bytes = read_file(path);
  static constexpr char kMagic[] = "jbfvol ";
  if (bytes.size() < 7 || std::memcmp(bytes.data(), kMagic, 7) != 0) throw BadMagicError(what + ": not a jbfvol file");

  std::size_t pos = 0;
  if (header_line(bytes, pos, what) != "jbfvol 1") throw FormatError(what + ": unsupported jbfvol version");

  Volume v;
  {
    std::istringstream dims(header_line(bytes, pos, what));
    std::string key;
    long long nx = 0, ny = 0, nz = 0;
    if (!(dims >> key >> nx >> ny >> nz) || key != "dims" || nx <= 0 || ny <= 0 || nz <= 0 ||
        nx * ny * nz > (1LL << 32)) {
      throw FormatError(what + ": bad dims line");
    }
    v.nx = static_cast<int>(nx);
    v.ny = static_cast<int>(ny);
    v.nz = static_cast<int>(nz);
  }
  {
    std::istringstream sp(header_line(bytes, pos, what));
    std::string key;
    if (!(sp >> key >> v.spacing[0] >> v.spacing[1] >> v.spacing[2]) || key != "spacing") {
      throw FormatError(what + ": bad spacing line");
    }
  }
  if (header_line(bytes, pos, what) != "dtype f32") throw FormatError(what + ": unsupported dtype");
  if (!header_line(bytes, pos, what).empty()) throw FormatError(what + ": missing blank line after header");

  const std::size_t n = static_cast<std::size_t>(v.nx) * v.ny * v.nz;
  const std::size_t have = bytes.size() - pos;
  if (have < 4 * n) {
    throw TruncatedError(what + ": payload has " + std::to_string(have / 4) + " of " + std::to_string(n) + " values");
  }
  if (have > 4 * n) throw FormatError(what + ": trailing bytes after payload");

  Reader r(bytes, what);
  r.str(pos);
  v.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    v.data[i] = r.f32();
    if (!std::isfinite(v.data[i])) throw NonFiniteError(what + ": non-finite value at index " + std::to_string(i));
  }
  return v;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
  if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0 || v.data.size() != static_cast<std::size_t>(v.nx) * v.ny * v.nz) {
    throw std::invalid_argument("write_volume: data length does not match extents");
  }
  std::string out = "jbfvol 1\ndims " + std::to_string(v.nx) + " " + std::to_string(v.ny) + " " +
                    std::to_string(v.nz) + "\nspacing " + shortest(v.spacing[0]) + " " + shortest(v.spacing[1]) +
                    " " + shortest(v.spacing[2]) + "\ndtype f32\n\n";
  out.reserve(out.size() + 4 * v.data.size());
  for (float f : v.data) {
    if (!std::isfinite(f)) throw NonFiniteError("write_volume: non-finite value");
    put_f32(out, f);
  }
  write_file(path, out);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string out = "JBFN";
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& e : ckpt.tensors.entries()) {
    if (e.name.size() > 0xffff) throw std::invalid_argument("tensor name too long: " + e.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.tensor.rank()));
    for (int d : e.tensor.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float f : e.tensor.values()) put_f32(out, f);
  }
  for (const auto& [k, val] : ckpt.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || val.find('\n') != std::string::npos) {
      throw std::invalid_argument("metadata entries may not contain '=' in keys or newlines: " + k);
    }
    out += k + "=" + val + "\n";
  }
  write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string what = path.string();
  const auto bytes = read_file(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "JBFN", 4) != 0) throw BadMagicError(what + ": not a checkpoint");
  Reader r(bytes, what);
  r.str(4);
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(what + ": checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.le<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.le<std::uint16_t>());
    const int rank = r.le<std::uint8_t>();
    if (rank == 0) throw FormatError(what + ": tensor " + name + " has rank 0");
    Shape shape(rank);
    for (int& d : shape) {
      const auto ext = r.le<std::uint32_t>();
      if (ext == 0 || ext > (1u << 30)) throw FormatError(what + ": tensor " + name + " has a bad extent");
      d = static_cast<int>(ext);
    }
    const std::size_t n = element_count(shape);
    if (r.remaining() / 4 < n) throw TruncatedError(what + ": tensor " + name + " payload is truncated");
    std::vector<float> values(n);
    for (float& f : values) f = r.f32();
    if (ckpt.tensors.contains(name)) throw FormatError(what + ": duplicate tensor " + name);
    ckpt.tensors.add(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  std::istringstream meta(r.str(r.remaining()));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(what + ": bad metadata line: " + line);
    ckpt.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return ckpt;
}

void restore_params(const Checkpoint& ckpt, ParamSet<float>& params, std::string_view ignore_prefix) {
  for (const auto& e : ckpt.tensors.entries()) {
    if (!ignore_prefix.empty() && std::string_view(e.name).substr(0, ignore_prefix.size()) == ignore_prefix) continue;
    if (!params.contains(e.name)) throw UnknownTensorError("checkpoint has unknown tensor: " + e.name);
  }
  for (auto& p : params.entries()) {
    if (!ckpt.tensors.contains(p.name)) throw FormatError("checkpoint is missing tensor: " + p.name);
    const auto& src = ckpt.tensors.at(p.name);
    if (src.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint tensor " + p.name + " has shape " + to_string(src.shape()) + ", expected " +
                        to_string(p.tensor.shape()));
    }
    std::copy(src.values().begin(), src.values().end(), p.tensor.values().begin());
  }
}

void export_png_slice(const Volume& v, int z, double lo, double hi, const std::filesystem::path& path) {
  if (z < 0 || z >= v.nz) throw std::out_of_range("slice " + std::to_string(z) + " outside 0.." + std::to_string(v.nz - 1));
  if (!(hi > lo)) throw std::invalid_argument("window upper bound must exceed lower bound");

  std::vector<png_byte> pixels(static_cast<std::size_t>(v.nx) * v.ny);
  const float* s = v.slice(z);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double t = std::clamp((static_cast<double>(s[i]) - lo) / (hi - lo), 0.0, 1.0);
    pixels[i] = static_cast<png_byte>(std::floor(255.0 * t));
  }

  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot create " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(v.nx), static_cast<png_uint_32>(v.ny), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < v.ny; ++y) png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * v.nx);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace jbf
