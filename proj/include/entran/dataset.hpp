#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>

#include "ops.hpp"
#include "rng.hpp"

namespace entran {

struct Dataset {
    int channels = 0, height = 0, width = 0, classes = 0;
    std::vector<std::vector<double>> images;  // each channels*height*width, values in [0,1]
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }

    Dataset subset(const std::vector<int>& idx) const {
        Dataset d;
        d.channels = channels;
        d.height = height;
        d.width = width;
        d.classes = classes;
        for (int i : idx) {
            d.images.push_back(images[std::size_t(i)]);
            d.labels.push_back(labels[std::size_t(i)]);
        }
        return d;
    }
};

// Gaussian-blob classification task: each class is a bump at a class-specific
// position; samples add center jitter, amplitude jitter and pixel noise.
inline Dataset make_synthetic(int classes, int channels, int height, int width, int n_per_class, std::uint64_t seed) {
    if (classes < 2 || channels < 1 || height < 2 || width < 2 || n_per_class < 1)
        throw std::invalid_argument("synthetic dataset spec out of range");
    Dataset d;
    d.channels = channels;
    d.height = height;
    d.width = width;
    d.classes = classes;
    Rng rng = Rng::from(seed, 0xda7a);
    double cx0 = (width - 1) / 2.0, cy0 = (height - 1) / 2.0;
    double radius = std::min(height, width) / 4.0;
    double sigma = std::min(height, width) / 5.0;
    for (int cls = 0; cls < classes; ++cls) {
        double angle = 2.0 * 3.14159265358979323846 * cls / classes;
        double cx = cx0 + radius * std::cos(angle);
        double cy = cy0 + radius * std::sin(angle);
        for (int s = 0; s < n_per_class; ++s) {
            double jx = cx + (rng.uniform() - 0.5), jy = cy + (rng.uniform() - 0.5);
            double amp = 0.75 + 0.25 * rng.uniform();
            std::vector<double> img(std::size_t(channels) * height * width);
            for (int c = 0; c < channels; ++c)
                for (int y = 0; y < height; ++y)
                    for (int x = 0; x < width; ++x) {
                        double dx = x - jx, dy = y - jy;
                        double v = amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                        v += 0.12 * rng.normal();
                        img[(std::size_t(c) * height + y) * width + x] = std::clamp(v, 0.0, 1.0);
                    }
            d.images.push_back(std::move(img));
            d.labels.push_back(cls);
        }
    }
    return d;
}

namespace detail {

inline std::uint32_t read_u32(std::istream& in, const std::string& what) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in) throw std::runtime_error("dataset file truncated while reading " + what);
    return std::uint32_t(buf[0]) | std::uint32_t(buf[1]) << 8 | std::uint32_t(buf[2]) << 16 |
           std::uint32_t(buf[3]) << 24;
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char buf[4] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8 & 0xff), (unsigned char)(v >> 16 & 0xff),
                            (unsigned char)(v >> 24 & 0xff)};
    out.write(reinterpret_cast<char*>(buf), 4);
}

}  // namespace detail

// Binary sample file: magic "ENTD", u32 LE count/classes/channels/height/width,
// then per sample channels*height*width u8 pixels (row-major) and one u8 label.
inline Dataset load_entd(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "ENTD", 4) != 0)
        throw std::runtime_error("bad dataset magic in " + path + " (expected ENTD)");
    Dataset d;
    std::uint32_t count = detail::read_u32(in, "count");
    d.classes = int(detail::read_u32(in, "classes"));
    d.channels = int(detail::read_u32(in, "channels"));
    d.height = int(detail::read_u32(in, "height"));
    d.width = int(detail::read_u32(in, "width"));
    if (d.classes < 1 || d.channels < 1 || d.height < 1 || d.width < 1)
        throw std::runtime_error("dataset header has zero-sized field in " + path);
    std::size_t pix = std::size_t(d.channels) * d.height * d.width;
    std::vector<unsigned char> buf(pix + 1);
    for (std::uint32_t i = 0; i < count; ++i) {
        in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(pix + 1));
        if (!in) {
            auto got = in.gcount();
            throw std::runtime_error("dataset file truncated at sample " + std::to_string(i) + ": expected " +
                                     std::to_string(pix + 1) + " bytes, got " + std::to_string(got));
        }
        int label = buf[pix];
        if (label >= d.classes)
            throw std::runtime_error("dataset sample " + std::to_string(i) + " has label " + std::to_string(label) +
                                     " >= classes " + std::to_string(d.classes));
        std::vector<double> img(pix);
        for (std::size_t p = 0; p < pix; ++p) img[p] = buf[p] / 255.0;
        d.images.push_back(std::move(img));
        d.labels.push_back(label);
    }
    return d;
}

inline void save_entd(const std::string& path, const Dataset& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset file: " + path);
    out.write("ENTD", 4);
    detail::write_u32(out, std::uint32_t(d.size()));
    detail::write_u32(out, std::uint32_t(d.classes));
    detail::write_u32(out, std::uint32_t(d.channels));
    detail::write_u32(out, std::uint32_t(d.height));
    detail::write_u32(out, std::uint32_t(d.width));
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (double v : d.images[i]) {
            auto b = (unsigned char)std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
            out.write(reinterpret_cast<char*>(&b), 1);
        }
        auto lb = (unsigned char)d.labels[i];
        out.write(reinterpret_cast<char*>(&lb), 1);
    }
}

// Descriptor: "synthetic:classes,channels,height,width,n_per_class,seed" or a
// path to an ENTD file.
inline Dataset load_dataset(const std::string& descriptor) {
    const std::string prefix = "synthetic:";
    if (descriptor.rfind(prefix, 0) == 0) {
        std::vector<long> fields;
        std::string rest = descriptor.substr(prefix.size());
        std::size_t pos = 0;
        while (pos <= rest.size()) {
            std::size_t comma = rest.find(',', pos);
            std::string tok = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            try {
                fields.push_back(std::stol(tok));
            } catch (const std::exception&) {
                throw std::invalid_argument("bad synthetic dataset spec: " + descriptor);
            }
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (fields.size() != 6)
            throw std::invalid_argument("synthetic spec needs classes,c,h,w,n_per_class,seed — got " + descriptor);
        return make_synthetic(int(fields[0]), int(fields[1]), int(fields[2]), int(fields[3]), int(fields[4]),
                              std::uint64_t(fields[5]));
    }
    return load_entd(descriptor);
}

// Deterministic disjoint halves; the train half takes the odd extra sample.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, std::uint64_t seed) {
    if (d.size() < 2) throw std::invalid_argument("split_dataset: need at least 2 samples");
    std::vector<int> idx(d.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
    Rng rng = Rng::from(seed, 0x5b117);
    deterministic_shuffle(idx, rng);
    std::size_t train_n = (d.size() + 1) / 2;
    std::vector<int> train_idx(idx.begin(), idx.begin() + std::ptrdiff_t(train_n));
    std::vector<int> val_idx(idx.begin() + std::ptrdiff_t(train_n), idx.end());
    return {d.subset(train_idx), d.subset(val_idx)};
}

struct Batch {
    ad::TensorPtr images;  // (N, C, H, W), constant leaf
    std::vector<int> labels;
};

inline Batch make_batch(const Dataset& d, const std::vector<int>& idx) {
    if (idx.empty()) throw std::invalid_argument("make_batch: empty index list");
    std::size_t per = std::size_t(d.channels) * d.height * d.width;
    auto x = ad::make_tensor({int(idx.size()), d.channels, d.height, d.width});
    Batch b;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(d.images[std::size_t(idx[i])].begin(), d.images[std::size_t(idx[i])].end(),
                  x->data.begin() + std::ptrdiff_t(i * per));
        b.labels.push_back(d.labels[std::size_t(idx[i])]);
    }
    b.images = x;
    return b;
}

}  // namespace entran
