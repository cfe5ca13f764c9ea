#include "sepvqa/num/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sepvqa::num {

namespace {

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size()) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_tensors(const TensorMap& tensors) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  return out;
}

TensorMap decode_tensors(const std::string& bytes) {
  Reader in(bytes);
  if (in.get_bytes(sizeof(kCheckpointMagic), "magic") != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw CheckpointError("bad checkpoint magic");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = in.get<std::uint64_t>("record count");
  TensorMap out;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto name_len = in.get<std::uint32_t>("name length");
    if (name_len > in.remaining()) throw CheckpointError("record " + std::to_string(r) + " name length exceeds file");
    std::string name = in.get_bytes(name_len, "name");
    const auto rank = in.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw CheckpointError("record '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t total = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto dim = in.get<std::uint64_t>("dimension");
      if (dim == 0 || dim > in.remaining()) throw CheckpointError("record '" + name + "' has invalid dimension");
      shape.push_back(static_cast<std::size_t>(dim));
      total *= dim;
    }
    if (total * sizeof(double) > in.remaining()) throw CheckpointError("truncated payload for '" + name + "'");
    std::vector<double> data(static_cast<std::size_t>(total));
    for (auto& v : data) v = in.get<double>("payload");
    try {
      out.insert_or_assign(name, Tensor(std::move(shape), std::move(data)));
    } catch (const TensorError& e) {
      throw CheckpointError("record '" + name + "': " + e.what());
    }
  }
  if (!in.done()) throw CheckpointError("trailing bytes after " + std::to_string(count) + " records");
  return out;
}

void save_tensors(const std::filesystem::path& path, const TensorMap& tensors) {
  const std::string bytes = encode_tensors(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

TensorMap load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

}  // namespace sepvqa::num
