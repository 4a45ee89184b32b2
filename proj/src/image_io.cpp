#include "revcs/image_io.hpp"

#include <cstdio>
#include <fstream>

#include "revcs/binio.hpp"

namespace revcs {

namespace {

struct PnmScanner {
  std::string path;
  std::vector<char> bytes;
  size_t pos = 0;

  explicit PnmScanner(const std::string& p) : path(p) {
    std::ifstream is(p, std::ios::binary);
    require(is.good(), Errc::io_error, "cannot open: " + p);
    bytes.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  }

  [[noreturn]] void err(const std::string& what) const {
    fail(Errc::parse_error, path + ": " + what + " at byte offset " + std::to_string(pos));
  }

  char peek() const { return pos < bytes.size() ? bytes[pos] : '\0'; }
  bool eof() const { return pos >= bytes.size(); }

  // whitespace and '#'-comments between header tokens
  void skip_space() {
    while (!eof()) {
      char c = peek();
      if (c == '#') {
        while (!eof() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  int64_t read_int() {
    skip_space();
    if (eof() || peek() < '0' || peek() > '9') err("expected decimal integer");
    int64_t v = 0;
    while (!eof() && peek() >= '0' && peek() <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (int64_t(1) << 30)) err("integer too large");
      ++pos;
    }
    return v;
  }
};

}  // namespace

Image read_pnm(const std::string& path) {
  PnmScanner sc(path);
  if (sc.bytes.size() < 2) sc.err("missing magic");
  char m0 = sc.bytes[0], m1 = sc.bytes[1];
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    fail(Errc::parse_error, path + ": unsupported magic at byte offset 0 (want P5 or P6)");
  sc.pos = 2;
  int64_t w = sc.read_int();
  int64_t h = sc.read_int();
  int64_t maxval = sc.read_int();
  if (w <= 0 || h <= 0) sc.err("degenerate dimensions");
  if (maxval != 255) sc.err("unsupported maxval (only 255)");
  // exactly one whitespace byte separates header and payload
  if (sc.eof() || !(sc.peek() == ' ' || sc.peek() == '\t' || sc.peek() == '\n' || sc.peek() == '\r'))
    sc.err("expected single whitespace before payload");
  ++sc.pos;

  Image img;
  img.channels = (m1 == '6') ? 3 : 1;
  img.height = h;
  img.width = w;
  int64_t n = img.size();
  if (int64_t(sc.bytes.size() - sc.pos) < n) {
    sc.pos = sc.bytes.size();
    sc.err("truncated payload, need " + std::to_string(n) + " bytes");
  }
  img.data.resize(size_t(n));
  // interleaved on disk -> planar in memory
  const unsigned char* p = reinterpret_cast<const unsigned char*>(sc.bytes.data() + sc.pos);
  int64_t hw = h * w;
  for (int64_t i = 0; i < hw; ++i)
    for (int64_t c = 0; c < img.channels; ++c)
      img.data[size_t(c * hw + i)] = float(p[i * img.channels + c]) / 255.0f;
  return img;
}

static void write_pnm_impl(const std::string& path, const Image& img, bool color) {
  require(img.channels == (color ? 3 : 1), Errc::shape_mismatch,
          color ? "PPM needs a 3-channel image" : "PGM needs a 1-channel image");
  std::ofstream os(path, std::ios::binary);
  require(os.good(), Errc::io_error, "cannot open for writing: " + path);
  os << (color ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << '\n' << "255\n";
  int64_t hw = img.height * img.width;
  std::vector<unsigned char> row(size_t(img.channels * img.width));
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x)
      for (int64_t c = 0; c < img.channels; ++c)
        row[size_t(x * img.channels + c)] = to_u8(img.data[size_t(c * hw + y * img.width + x)]);
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  os.close();
  require(os.good(), Errc::io_error, "write failed: " + path);
}

void write_pgm(const std::string& path, const Image& img) { write_pnm_impl(path, img, false); }
void write_ppm(const std::string& path, const Image& img) { write_pnm_impl(path, img, true); }

Image read_rcsi(const std::string& path) {
  binio::Reader r(path);
  r.expect_magic("RCSI");
  uint16_t ver = r.u16();
  require(ver == 1, Errc::parse_error, path + ": unsupported RCSI version");
  Image img;
  img.channels = r.u32();
  img.height = r.u32();
  img.width = r.u32();
  require(img.channels >= 1 && img.channels <= 4 && img.height >= 1 && img.width >= 1,
          Errc::parse_error, path + ": implausible RCSI dimensions");
  img.data.resize(size_t(img.size()));
  r.f32_array(img.data.data(), img.data.size());
  return img;
}

void write_rcsi(const std::string& path, const Image& img) {
  binio::Writer w(path);
  w.magic("RCSI");
  w.u16(1);
  w.u32(uint32_t(img.channels));
  w.u32(uint32_t(img.height));
  w.u32(uint32_t(img.width));
  w.f32_array(img.data.data(), img.data.size());
  w.close();
}

static bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

Image read_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), Errc::io_error, "cannot open: " + path);
  char magic[4] = {};
  is.read(magic, 4);
  is.close();
  if (magic[0] == 'P' && (magic[1] == '5' || magic[1] == '6')) return read_pnm(path);
  if (std::string(magic, 4) == "RCSI") return read_rcsi(path);
  fail(Errc::parse_error, path + ": unrecognized image format at byte offset 0");
}

void write_image(const std::string& path, const Image& img) {
  if (ends_with(path, ".pgm")) {
    write_pgm(path, img);
  } else if (ends_with(path, ".ppm")) {
    write_ppm(path, img);
  } else if (ends_with(path, ".rcsi")) {
    write_rcsi(path, img);
  } else {
    fail(Errc::bad_argument, path + ": unknown image extension (use .pgm/.ppm/.rcsi)");
  }
}

}  // namespace revcs
