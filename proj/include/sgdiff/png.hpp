#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sgdiff/errors.hpp"
#include "sgdiff/tensor.hpp"

namespace sgdiff {

/// 8-bit interleaved raster, channels = 1 (gray), 3 (RGB) or 4 (RGBA).
struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& payload) {
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    std::uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32(out, crc);
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

inline std::vector<std::uint8_t> zlib_deflate(const std::vector<std::uint8_t>& in) {
    uLongf bound = compressBound(static_cast<uLong>(in.size()));
    std::vector<std::uint8_t> out(bound);
    if (compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK)
        throw IoError("png: deflate failed");
    out.resize(bound);
    return out;
}

inline std::vector<std::uint8_t> zlib_inflate(const std::vector<std::uint8_t>& in,
                                              std::size_t expected) {
    std::vector<std::uint8_t> out(expected);
    uLongf len = static_cast<uLongf>(expected);
    int rc = uncompress(out.data(), &len, in.data(), static_cast<uLong>(in.size()));
    if (rc != Z_OK || len != expected) throw IoError("png: inflate failed");
    return out;
}

inline int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

/// Writes an 8-bit PNG. An optional palette turns a 1-channel image into a
/// palette-indexed file (used for segmentation maps).
inline void write_png(const std::string& path, const Image8& img,
                      const std::vector<std::array<std::uint8_t, 3>>& palette = {}) {
    if (img.width <= 0 || img.height <= 0) throw IoError("png: empty image");
    int color_type;
    if (!palette.empty()) {
        if (img.channels != 1) throw IoError("png: palette output needs 1 channel");
        color_type = 3;
    } else if (img.channels == 1) {
        color_type = 0;
    } else if (img.channels == 3) {
        color_type = 2;
    } else if (img.channels == 4) {
        color_type = 6;
    } else {
        throw IoError("png: unsupported channel count");
    }

    std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: none
        const std::uint8_t* row = img.pixels.data() + y * stride;
        raw.insert(raw.end(), row, row + stride);
    }

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    detail::put_u32(ihdr, static_cast<std::uint32_t>(img.width));
    detail::put_u32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(static_cast<std::uint8_t>(color_type));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::put_chunk(out, "IHDR", ihdr);
    if (color_type == 3) {
        std::vector<std::uint8_t> plte;
        for (const auto& rgb : palette) plte.insert(plte.end(), rgb.begin(), rgb.end());
        detail::put_chunk(out, "PLTE", plte);
    }
    detail::put_chunk(out, "IDAT", detail::zlib_deflate(raw));
    detail::put_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("png: cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("png: write failed: " + path);
}

/// Reads an 8-bit non-interlaced PNG (gray, RGB, RGBA or palette).
/// Palette files come back expanded to RGB; `palette_index_out`, when given,
/// additionally receives the raw indices.
inline Image8 read_png(const std::string& path, Image8* palette_index_out = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingImageError("png: cannot open: " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
        throw IoError("png: bad signature: " + path);

    int width = 0, height = 0, bit_depth = 0, color_type = 0;
    std::vector<std::uint8_t> idat;
    std::vector<std::array<std::uint8_t, 3>> palette;
    std::size_t pos = 8;
    while (pos + 8 <= buf.size()) {
        std::uint32_t len = detail::get_u32(buf.data() + pos);
        std::string type(reinterpret_cast<const char*>(buf.data() + pos + 4), 4);
        if (pos + 12 + len > buf.size()) throw IoError("png: truncated chunk");
        const std::uint8_t* payload = buf.data() + pos + 8;
        if (type == "IHDR") {
            width = static_cast<int>(detail::get_u32(payload));
            height = static_cast<int>(detail::get_u32(payload + 4));
            bit_depth = payload[8];
            color_type = payload[9];
            if (payload[12] != 0) throw IoError("png: interlaced files unsupported");
            if (bit_depth != 8) throw IoError("png: only 8-bit files supported");
        } else if (type == "PLTE") {
            for (std::uint32_t i = 0; i + 2 < len; i += 3)
                palette.push_back({payload[i], payload[i + 1], payload[i + 2]});
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    int nch;
    switch (color_type) {
        case 0: nch = 1; break;
        case 2: nch = 3; break;
        case 3: nch = 1; break;
        case 6: nch = 4; break;
        default: throw IoError("png: unsupported color type");
    }
    std::size_t stride = static_cast<std::size_t>(width) * nch;
    std::vector<std::uint8_t> raw =
        detail::zlib_inflate(idat, (stride + 1) * static_cast<std::size_t>(height));

    // undo per-row filters
    std::vector<std::uint8_t> flat(stride * height);
    int bpp = nch;
    for (int y = 0; y < height; ++y) {
        std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* dst = flat.data() + y * stride;
        const std::uint8_t* up = y > 0 ? flat.data() + (y - 1) * stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw IoError("png: bad filter byte");
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xff);
        }
    }

    if (color_type == 3) {
        if (palette.empty()) throw IoError("png: palette file without PLTE");
        if (palette_index_out) {
            palette_index_out->width = width;
            palette_index_out->height = height;
            palette_index_out->channels = 1;
            palette_index_out->pixels = flat;
        }
        Image8 img;
        img.width = width;
        img.height = height;
        img.channels = 3;
        img.pixels.resize(static_cast<std::size_t>(width) * height * 3);
        for (std::size_t i = 0; i < flat.size(); ++i) {
            if (flat[i] >= palette.size()) throw IoError("png: palette index out of range");
            const auto& rgb = palette[flat[i]];
            img.pixels[i * 3 + 0] = rgb[0];
            img.pixels[i * 3 + 1] = rgb[1];
            img.pixels[i * 3 + 2] = rgb[2];
        }
        return img;
    }
    Image8 img;
    img.width = width;
    img.height = height;
    img.channels = nch;
    img.pixels = std::move(flat);
    return img;
}

/// CHW [0,1] tensor -> 8-bit raster, rounding to nearest.
inline Image8 tensor_to_image(const Tensor& t) {
    if (t.shape.size() != 3) throw ShapeError("tensor_to_image expects CHW");
    Image8 img;
    img.channels = t.shape[0];
    img.height = t.shape[1];
    img.width = t.shape[2];
    img.pixels.resize(t.size());
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double v = std::clamp(t.at(c, y, x), 0.0, 1.0);
                img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

inline Tensor image_to_tensor(const Image8& img) {
    Tensor t({img.channels, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) t.at(c, y, x) = img.at(y, x, c) / 255.0;
    return t;
}

}  // namespace sgdiff
