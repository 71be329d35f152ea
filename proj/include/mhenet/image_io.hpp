#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mhenet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved image with 1 (gray) or 3 (RGB) channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x, int ch = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
};

/// Decodes PNG (8-bit gray/RGB, alpha dropped, palette expanded) or binary and
/// ASCII PGM/PPM, chosen by file signature.
Image read_image(const std::string& path);

/// Format chosen by extension: .png, .pgm (1 channel) or .ppm (3 channels).
void write_image(const std::string& path, const Image& image);

bool has_image_extension(const std::string& path);

}  // namespace mhenet
