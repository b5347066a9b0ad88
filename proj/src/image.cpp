#include "s2rd/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "s2rd/checkpoint.hpp"
#include "s2rd/common.hpp"

namespace s2rd {

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t read_u32_be(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
    put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uLong crc = crc32(crc32(0L, nullptr, 0), out.data() + start, static_cast<uInt>(4 + payload.size()));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}

std::uint8_t to_byte(float v) {
    const float t = (v + 1.0f) * 0.5f * 255.0f;
    return static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0f, 255.0f)));
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
    if (img.h <= 0 || img.w <= 0) throw ShapeError("write_png: empty image");
    // raw scanlines with filter byte 0
    std::vector<std::uint8_t> raw(static_cast<size_t>(img.h) * (1 + 3 * img.w));
    for (int y = 0; y < img.h; ++y) {
        std::uint8_t* row = raw.data() + static_cast<size_t>(y) * (1 + 3 * img.w);
        row[0] = 0;
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) row[1 + 3 * x + c] = to_byte(img.at(y, x, c));
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw LoadError("write_png: deflate failed");
    comp.resize(comp_len);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(img.w));
    put_u32_be(ihdr, static_cast<std::uint32_t>(img.h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type RGB
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // no interlace
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", comp);
    append_chunk(out, "IEND", {});
    write_file_bytes(path, out);
}

Image read_png(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
        throw LoadError("read_png: not a PNG file: " + path);
    size_t pos = 8;
    int w = 0, h = 0, bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<std::uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = read_u32_be(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw LoadError("read_png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            w = static_cast<int>(read_u32_be(payload));
            h = static_cast<int>(read_u32_be(payload + 4));
            bit_depth = payload[8];
            color_type = payload[9];
            interlace = payload[12];
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0) throw LoadError("read_png: missing IHDR");
    if (bit_depth != 8 || interlace != 0)
        throw LoadError("read_png: only 8-bit non-interlaced PNGs are supported");
    int nch;
    switch (color_type) {
        case 0: nch = 1; break;
        case 2: nch = 3; break;
        case 6: nch = 4; break;
        default: throw LoadError("read_png: unsupported color type " + std::to_string(color_type));
    }

    const size_t stride = static_cast<size_t>(w) * nch;
    std::vector<std::uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw LoadError("read_png: inflate failed");

    // undo per-row filters in place
    std::vector<std::uint8_t> prev(stride, 0);
    Image img(h, w);
    for (int y = 0; y < h; ++y) {
        std::uint8_t* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
        const int filter = row[0];
        std::uint8_t* cur = row + 1;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<size_t>(nch) ? cur[i - nch] : 0;
            const int b = prev[i];
            const int c = i >= static_cast<size_t>(nch) ? prev[i - nch] : 0;
            int v = cur[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw LoadError("read_png: bad filter " + std::to_string(filter));
            }
            cur[i] = static_cast<std::uint8_t>(v);
        }
        std::copy_n(cur, stride, prev.data());
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const std::uint8_t byte = nch == 1 ? cur[x] : cur[static_cast<size_t>(x) * nch + ch];
                img.at(y, x, ch) = static_cast<float>(byte) / 255.0f * 2.0f - 1.0f;
            }
    }
    return img;
}

Tensor image_to_tensor(const Image& img) { return images_to_tensor({img}); }

Tensor images_to_tensor(const std::vector<Image>& imgs) {
    if (imgs.empty()) throw UsageError("images_to_tensor: empty batch");
    const int h = imgs[0].h, w = imgs[0].w;
    std::vector<float> data(imgs.size() * 3u * h * w);
    for (size_t n = 0; n < imgs.size(); ++n) {
        if (imgs[n].h != h || imgs[n].w != w) throw ShapeError("images_to_tensor: mixed sizes");
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    data[((n * 3 + c) * h + y) * w + x] = imgs[n].at(y, x, c);
    }
    return Tensor::from_data({static_cast<int>(imgs.size()), 3, h, w}, std::move(data));
}

Image tensor_to_image(const Tensor& t, int batch_index) {
    if (t.rank() != 4 || t.dim(1) != 3) throw ShapeError("tensor_to_image expects [N,3,H,W]");
    const int h = t.dim(2), w = t.dim(3);
    Image img(h, w);
    const std::int64_t base = static_cast<std::int64_t>(batch_index) * 3 * h * w;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                img.at(y, x, c) =
                    std::clamp(t.data()[base + (static_cast<std::int64_t>(c) * h + y) * w + x],
                               -1.0f, 1.0f);
    return img;
}

double image_abs_diff(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w) throw ShapeError("image_abs_diff: sizes differ");
    double acc = 0.0;
    for (size_t i = 0; i < a.px.size(); ++i) acc += std::abs(a.px[i] - b.px[i]);
    return acc / static_cast<double>(a.px.size());
}

namespace {

// 5x7 glyphs, one byte per row, low 5 bits used.
struct Glyph {
    char ch;
    std::uint8_t rows[7];
};

const Glyph kFont[] = {
    {'a', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'b', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'c', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'d', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
    {'e', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'f', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'g', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'h', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'i', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'j', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'k', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'l', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'m', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'n', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
    {'o', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'p', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'r', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'s', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'t', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'u', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'v', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'w', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'x', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
    {'z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F}},
    {'3', {0x1F, 0x01, 0x02, 0x06, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {'<', {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02}},
    {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}},
    {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
    {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
};

const std::uint8_t* find_glyph(char c) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    for (const auto& g : kFont)
        if (g.ch == c) return g.rows;
    return nullptr;  // unknown chars render as space
}

}  // namespace

void draw_label(Image& img, int x, int y, const std::string& text, float r, float g, float b) {
    int cx = x;
    for (char c : text) {
        const std::uint8_t* rows = find_glyph(c);
        if (rows) {
            for (int gy = 0; gy < 7; ++gy)
                for (int gx = 0; gx < 5; ++gx)
                    if (rows[gy] & (1 << (4 - gx))) {
                        const int py = y + gy, px = cx + gx;
                        if (py >= 0 && py < img.h && px >= 0 && px < img.w) {
                            img.at(py, px, 0) = r;
                            img.at(py, px, 1) = g;
                            img.at(py, px, 2) = b;
                        }
                    }
        }
        cx += 6;
    }
}

Image mosaic(const std::vector<Image>& tiles, const std::vector<std::string>& labels, int columns) {
    if (tiles.empty()) throw UsageError("mosaic: no tiles");
    if (columns <= 0) columns = static_cast<int>(tiles.size());
    const int rows = (static_cast<int>(tiles.size()) + columns - 1) / columns;
    int tw = 0, th = 0;
    for (const auto& t : tiles) {
        tw = std::max(tw, t.w);
        th = std::max(th, t.h);
    }
    const int label_h = labels.empty() ? 0 : 10;
    const int gap = 2;
    Image out(rows * (th + label_h + gap) + gap, columns * (tw + gap) + gap);
    std::fill(out.px.begin(), out.px.end(), -1.0f);
    for (size_t i = 0; i < tiles.size(); ++i) {
        const int ry = static_cast<int>(i) / columns, rx = static_cast<int>(i) % columns;
        const int oy = gap + ry * (th + label_h + gap);
        const int ox = gap + rx * (tw + gap);
        if (!labels.empty() && i < labels.size())
            draw_label(out, ox, oy + 1, labels[i], 1.0f, 1.0f, 1.0f);
        const Image& t = tiles[i];
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x)
                for (int c = 0; c < 3; ++c) out.at(oy + label_h + y, ox + x, c) = t.at(y, x, c);
    }
    return out;
}

}  // namespace s2rd
