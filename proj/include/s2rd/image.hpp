#ifndef S2RD_IMAGE_HPP
#define S2RD_IMAGE_HPP

#include <string>
#include <vector>

#include "s2rd/tensor.hpp"

namespace s2rd {

// Interleaved RGB float image, values in [-1, 1], row-major (y, x, channel).
struct Image {
    int h = 0;
    int w = 0;
    std::vector<float> px;

    Image() = default;
    Image(int h_, int w_) : h(h_), w(w_), px(static_cast<size_t>(h_) * w_ * 3, 0.0f) {}

    float& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    float at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

// 8-bit RGB PNG I/O (zlib-backed). The writer emits fixed-layout,
// deterministic files; the reader handles 8-bit gray/RGB/RGBA non-interlaced.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// [1,3,H,W] tensor in [-1,1] <-> Image
Tensor image_to_tensor(const Image& img);
Tensor images_to_tensor(const std::vector<Image>& imgs);
Image tensor_to_image(const Tensor& t, int batch_index = 0);

double image_abs_diff(const Image& a, const Image& b);

// Tile images left-to-right / top-down into a labeled grid (5x7 bitmap font).
Image mosaic(const std::vector<Image>& tiles, const std::vector<std::string>& labels, int columns);

void draw_label(Image& img, int x, int y, const std::string& text, float r, float g, float b);

}  // namespace s2rd

#endif
