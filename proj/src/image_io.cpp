#include "lift3d/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <vector>

namespace lift3d {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void png_error_handler(png_structp png, png_const_charp msg) {
  (void)png;
  throw FormatError(std::string("png: ") + msg);
}

void png_warning_handler(png_structp, png_const_charp) {}

uint8_t to_byte(double v) {
  double c = clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<uint8_t>(c + 0.5);
}

bool host_is_little_endian() {
  uint16_t probe = 1;
  uint8_t byte;
  std::memcpy(&byte, &probe, 1);
  return byte == 1;
}

void byteswap32(unsigned char* p) {
  std::swap(p[0], p[3]);
  std::swap(p[1], p[2]);
}

}  // namespace

void save_png(const std::string& path, const ImageBuffer& image) {
  if (image.empty()) throw ConfigError("save_png: empty image");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("save_png: cannot open '" + path + "' for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) throw IoError("save_png: failed to initialize encoder");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("save_png: failed to initialize encoder");
  }

  try {
    int color_type = image.channels() == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, image.width(), image.height(), 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(image.width()) * image.channels());
    for (int y = 0; y < image.height(); ++y) {
      size_t k = 0;
      for (int x = 0; x < image.width(); ++x)
        for (int c = 0; c < image.channels(); ++c) row[k++] = to_byte(image.at(y, x, c));
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

ImageBuffer load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("load_png: cannot open '" + path + "'");

  unsigned char header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
    throw FormatError("load_png: '" + path + "' is not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) throw IoError("load_png: failed to initialize decoder");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("load_png: failed to initialize decoder");
  }

  ImageBuffer image;
  try {
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_uint_32 width = png_get_image_width(png, info);
    png_uint_32 height = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);
    if (bit_depth != 8) throw FormatError("load_png: only 8-bit images are supported");
    if (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_RGB)
      throw FormatError("load_png: only 8-bit grayscale or RGB images are supported");
    int channels = color_type == PNG_COLOR_TYPE_GRAY ? 1 : 3;

    image = ImageBuffer(static_cast<int>(height), static_cast<int>(width), channels);
    std::vector<uint8_t> row(static_cast<size_t>(width) * channels);
    for (png_uint_32 y = 0; y < height; ++y) {
      png_read_row(png, row.data(), nullptr);
      size_t k = 0;
      for (png_uint_32 x = 0; x < width; ++x)
        for (int c = 0; c < channels; ++c) image.at(static_cast<int>(y), static_cast<int>(x), c) = row[k++] / 255.0;
    }
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

void save_pfm(const std::string& path, const ImageBuffer& image) {
  if (image.empty()) throw ConfigError("save_pfm: empty image");
  if (image.channels() != 1) throw ConfigError("save_pfm: only single-channel images are supported");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_pfm: cannot open '" + path + "' for writing");
  out << "Pf\n" << image.width() << " " << image.height() << "\n-1.0\n";

  bool le = host_is_little_endian();
  std::vector<float> row(static_cast<size_t>(image.width()));
  for (int y = image.height() - 1; y >= 0; --y) {  // bottom-to-top
    for (int x = 0; x < image.width(); ++x) row[static_cast<size_t>(x)] = static_cast<float>(image.at(y, x));
    if (!le)
      for (auto& f : row) byteswap32(reinterpret_cast<unsigned char*>(&f));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw IoError("save_pfm: write to '" + path + "' failed");
}

ImageBuffer load_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_pfm: cannot open '" + path + "'");

  std::string magic;
  in >> magic;
  if (magic == "PF") throw FormatError("load_pfm: color PFM is not supported, expected single-channel 'Pf'");
  if (magic != "Pf") throw FormatError("load_pfm: '" + path + "' is not a PFM file");

  int width = 0, height = 0;
  double scale = 0.0;
  in >> width >> height >> scale;
  if (!in || width <= 0 || height <= 0) throw FormatError("load_pfm: malformed header in '" + path + "'");
  if (scale == 0.0) throw FormatError("load_pfm: zero scale in '" + path + "'");
  in.get();  // single whitespace byte after the scale

  bool file_little_endian = scale < 0.0;
  bool swap = file_little_endian != host_is_little_endian();

  ImageBuffer image(height, width, 1);
  std::vector<float> row(static_cast<size_t>(width));
  for (int y = height - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(row.size() * sizeof(float)))
      throw FormatError("load_pfm: truncated payload in '" + path + "'");
    for (int x = 0; x < width; ++x) {
      float f = row[static_cast<size_t>(x)];
      if (swap) byteswap32(reinterpret_cast<unsigned char*>(&f));
      image.at(y, x) = static_cast<double>(f);
    }
  }
  return image;
}

}  // namespace lift3d
