#include "ttav/tlat.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "ttav/binary_io.hpp"

namespace ttav::io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to '" + path.string() + "'");
}

}  // namespace ttav::io

namespace ttav::tlat {

std::vector<std::uint8_t> encode(const codec::LatentStream& stream) {
  stream.validate();
  if (stream.frame_count() > UINT32_MAX) throw ShapeError("tlat: too many frames");
  io::ByteWriter w;
  w.text("TLAT");
  w.u16(kVersion);
  w.u8(static_cast<std::uint8_t>(stream.modality));
  w.u8(0);
  w.u32(static_cast<std::uint32_t>(stream.frame_count()));
  w.u16(static_cast<std::uint16_t>(stream.dim()));
  w.u16(static_cast<std::uint16_t>(stream.frame_rate));
  for (float v : stream.frames.data()) w.f32(v);
  return w.bytes();
}

codec::LatentStream decode(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes, "corrupt TLAT stream");
  if (r.text(4) != "TLAT") r.fail("bad magic");
  const auto version = r.u16();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  const auto modality = r.u8();
  if (modality > 1) r.fail("unknown modality " + std::to_string(modality));
  r.u8();
  const auto frames = r.u32();
  const auto dim = r.u16();
  const auto rate = r.u16();
  const auto m = static_cast<codec::Modality>(modality);
  if (dim != codec::modality_dim(m)) r.fail("dimension " + std::to_string(dim) + " invalid for modality");
  if (rate == 0) r.fail("zero frame rate");
  const std::size_t n = static_cast<std::size_t>(frames) * dim;
  if (r.remaining() != n * sizeof(float)) {
    r.fail("payload holds " + std::to_string(r.remaining()) + " bytes, expected " +
           std::to_string(n * sizeof(float)));
  }
  codec::LatentStream s{Tensor<float>({static_cast<std::int64_t>(frames), dim}), m, rate};
  r.f32_array(s.frames.storage().data(), n);
  if (!s.frames.all_finite()) r.fail("non-finite sample");
  return s;
}

void write(const std::filesystem::path& path, const codec::LatentStream& stream) {
  io::write_file(path, encode(stream));
}

codec::LatentStream read(const std::filesystem::path& path) { return decode(io::read_file(path)); }

}  // namespace ttav::tlat
