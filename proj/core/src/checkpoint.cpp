#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ace/error.hpp"
#include "ace/model.hpp"

namespace ace {

namespace {

constexpr char kMagic[4] = {'A', 'C', 'E', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& path, std::string bytes) : path_(path), bytes_(std::move(bytes)) {}

  std::uint64_t u64(const char* what) { return uint(8, what); }
  std::uint32_t u32(const char* what) { return std::uint32_t(uint(4, what)); }

  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(path_ + ": " + what + " at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }

  std::uint64_t uint(int width, const char* what) {
    need(std::size_t(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t(std::uint8_t(bytes_[pos_ + i])) << (8 * i);
    pos_ += std::size_t(width);
    return v;
  }

  std::string path_;
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& Checkpoint::blob(const std::string& name) const {
  for (const auto& [n, t] : blobs) {
    if (n == name) return t;
  }
  throw FormatError("checkpoint has no blob '" + name + "'");
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  std::string header;
  for (const auto& [k, v] : ckpt.header) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ParameterError("checkpoint header entry '" + k + "' contains a reserved character");
    }
    header += k + "=" + v + "\n";
  }
  put_u32(out, std::uint32_t(header.size()));
  out += header;
  put_u32(out, std::uint32_t(ckpt.blobs.size()));
  for (const auto& [name, t] : ckpt.blobs) {
    put_u32(out, std::uint32_t(name.size()));
    out += name;
    put_u32(out, std::uint32_t(t.rank()));
    for (std::size_t e : t.shape()) put_u64(out, e);
    for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw IoError("write to '" + tmp + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into '" + path + "': " + ec.message());
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  Reader r(path, std::string(std::istreambuf_iterator<char>(f), {}));

  if (r.text(4, "magic") != std::string(kMagic, 4)) r.fail("bad magic (expected ACE1)");
  Checkpoint ckpt;
  std::istringstream lines(r.text(r.u32("header length"), "header"));
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("header line '" + line + "' has no '='");
    ckpt.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::uint32_t count = r.u32("blob count");
  for (std::uint32_t b = 0; b < count; ++b) {
    std::string name = r.text(r.u32("blob name length"), "blob name");
    const std::uint32_t rank = r.u32("blob rank");
    if (rank == 0 || rank > 8) r.fail("blob '" + name + "' has rank " + std::to_string(rank));
    num::Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint64_t e = r.u64("blob extent");
      if (e == 0 || e > (std::uint64_t(1) << 32)) r.fail("blob '" + name + "' has extent " + std::to_string(e));
      shape.push_back(std::size_t(e));
      n *= e;
    }
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(r.u64("blob values"));
    ckpt.blobs.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) r.fail("trailing bytes");
  return ckpt;
}

std::map<std::string, std::string> config_echo(const EncoderConfig& c) {
  return {{"model.embed_dim", std::to_string(c.embed_dim)}, {"model.token_side", std::to_string(c.token_side)},
          {"model.input_side", std::to_string(c.input_side)}, {"model.depth", std::to_string(c.depth)},
          {"model.hidden", std::to_string(c.hidden)},         {"model.seed", std::to_string(c.seed)}};
}

EncoderConfig config_from_echo(const std::map<std::string, std::string>& header) {
  auto get = [&](const std::string& key) -> std::uint64_t {
    const auto it = header.find(key);
    if (it == header.end()) throw FormatError("checkpoint header lacks '" + key + "'");
    try {
      std::size_t used = 0;
      const auto v = std::stoull(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint header '" + key + "' is not an unsigned integer: '" + it->second + "'");
    }
  };
  EncoderConfig c;
  c.embed_dim = get("model.embed_dim");
  c.token_side = get("model.token_side");
  c.input_side = get("model.input_side");
  c.depth = get("model.depth");
  c.hidden = get("model.hidden");
  c.seed = get("model.seed");
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  return c;
}

Checkpoint to_checkpoint(const EncoderState& state) {
  Checkpoint ckpt;
  ckpt.header = config_echo(state.config);
  ckpt.header["step"] = std::to_string(state.step);
  for (const auto& [name, t] : state.student.entries()) ckpt.blobs.emplace_back("student/" + name, t.detach());
  for (const auto& [name, t] : state.teacher.entries()) ckpt.blobs.emplace_back("teacher/" + name, t.detach());
  ckpt.blobs.emplace_back("center", Tensor({state.center.size()}, state.center));
  return ckpt;
}

EncoderState state_from_checkpoint(const Checkpoint& ckpt) {
  const EncoderConfig config = config_from_echo(ckpt.header);
  // A fresh init provides the expected names and shapes.
  EncoderState state = init(config);
  auto fill = [&](ParamSet& params, const std::string& prefix, bool requires_grad) {
    ParamSet out;
    for (const auto& [name, t] : params.entries()) {
      const Tensor& src = ckpt.blob(prefix + name);
      if (src.shape() != t.shape()) {
        throw FormatError("checkpoint blob '" + prefix + name + "' has shape " + num::to_string(src.shape()) +
                          ", expected " + num::to_string(t.shape()));
      }
      out.add(name, Tensor(t.shape(), std::vector<double>(src.values().begin(), src.values().end()), requires_grad));
    }
    params = std::move(out);
  };
  fill(state.student, "student/", true);
  fill(state.teacher, "teacher/", false);
  const Tensor& center = ckpt.blob("center");
  if (center.size() != config.embed_dim) throw FormatError("checkpoint center has the wrong length");
  state.center.assign(center.values().begin(), center.values().end());
  const auto it = ckpt.header.find("step");
  if (it == ckpt.header.end()) throw FormatError("checkpoint header lacks 'step'");
  try {
    state.step = std::stoull(it->second);
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint step is not an integer: '" + it->second + "'");
  }
  return state;
}

}  // namespace ace
