#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "crab/data.hpp"
#include "crab/errors.hpp"

namespace crab {

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& file) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in) throw TruncatedFileError("truncated header in " + file);
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// IDX (MNIST container) reader: big-endian magic + dims, raw unsigned bytes.
// Pixels come back scaled to [0,1] as byte/255.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        std::size_t max_samples = std::numeric_limits<std::size_t>::max()) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError("cannot open " + images_path.string());
    std::ifstream lbl(labels_path, std::ios::binary);
    if (!lbl) throw IoError("cannot open " + labels_path.string());

    if (detail::read_be32(img, images_path.string()) != kIdxImageMagic)
        throw BadMagicError("bad image magic in " + images_path.string());
    std::uint32_t num_images = detail::read_be32(img, images_path.string());
    std::uint32_t rows = detail::read_be32(img, images_path.string());
    std::uint32_t cols = detail::read_be32(img, images_path.string());

    if (detail::read_be32(lbl, labels_path.string()) != kIdxLabelMagic)
        throw BadMagicError("bad label magic in " + labels_path.string());
    std::uint32_t num_labels = detail::read_be32(lbl, labels_path.string());

    if (num_images != num_labels)
        throw CountMismatchError("image/label count mismatch: " + std::to_string(num_images) +
                                 " vs " + std::to_string(num_labels));

    std::size_t count = std::min<std::size_t>(num_images, max_samples);
    std::size_t dim = std::size_t(rows) * cols;

    Dataset out;
    out.input_dim = dim;
    out.owner = images_path.filename().string();
    out.features.reserve(count * dim);
    out.labels.reserve(count);

    std::vector<unsigned char> pix(dim);
    for (std::size_t i = 0; i < count; ++i) {
        img.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(dim));
        if (!img) throw TruncatedFileError("truncated image payload in " + images_path.string());
        char y;
        lbl.read(&y, 1);
        if (!lbl) throw TruncatedFileError("truncated label payload in " + labels_path.string());
        for (unsigned char p : pix) out.features.push_back(double(p) / 255.0);
        out.labels.push_back(static_cast<unsigned char>(y));
    }
    return out;
}

}  // namespace crab
