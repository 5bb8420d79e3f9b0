#include "ymask/dataset.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ymask/error.h"
#include "ymask/eval.h"

namespace ymask {

namespace fs = std::filesystem;

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in) {
    std::string tok;
    for (int c = in.get(); c != EOF; c = in.get()) {
        if (c == '#' && tok.empty()) {
            while (c != EOF && c != '\n') c = in.get();
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

std::size_t ppm_number(std::istream& in, const fs::path& path) {
    const auto tok = ppm_token(in);
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
        v = std::stoul(tok, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (tok.empty() || pos != tok.size()) throw DatasetError(path.string() + ": bad PPM header field '" + tok + "'");
    return v;
}

void fill_ellipse(Image& img, double cx, double cy, double rx, double ry, const std::uint8_t color[3], double y_from = -1e9,
                  double y_to = 1e9) {
    const auto lo_y = static_cast<long>(std::floor(std::max(cy - ry, y_from)));
    const auto hi_y = static_cast<long>(std::ceil(std::min(cy + ry, y_to)));
    for (long y = std::max(lo_y, 0L); y <= std::min(hi_y, static_cast<long>(img.height) - 1); ++y) {
        const double py = y + 0.5;
        if (py < y_from || py > y_to) continue;
        const double dy = (py - cy) / ry;
        if (dy * dy > 1) continue;
        const double half = rx * std::sqrt(1 - dy * dy);
        for (long x = std::max(static_cast<long>(std::floor(cx - half)), 0L);
             x <= std::min(static_cast<long>(std::ceil(cx + half)), static_cast<long>(img.width) - 1); ++x) {
            const double px = x + 0.5;
            if (std::abs(px - cx) > half) continue;
            auto* p = &img.rgb[(static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x)) * 3];
            p[0] = color[0];
            p[1] = color[1];
            p[2] = color[2];
        }
    }
}

std::uint8_t channel(Rng& rng, int lo, int hi) { return static_cast<std::uint8_t>(rng.uniform_int(lo, hi)); }

}  // namespace

Image read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open " + path.string());
    if (ppm_token(in) != "P6") throw DatasetError(path.string() + ": not a binary PPM (P6)");
    Image img;
    img.width = ppm_number(in, path);
    img.height = ppm_number(in, path);
    const auto maxval = ppm_number(in, path);
    if (img.width == 0 || img.height == 0) throw DatasetError(path.string() + ": empty image");
    if (maxval != 255) throw DatasetError(path.string() + ": only maxval 255 is supported");
    img.rgb.resize(img.width * img.height * 3);
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw DatasetError(path.string() + ": truncated pixel data");
    return img;
}

void write_ppm(const fs::path& path, const Image& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DatasetError("cannot write " + path.string());
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
    if (!out) throw DatasetError("write failed for " + path.string());
}

Tensor<float> image_to_tensor(const Image& image, std::size_t size) {
    Tensor<float> t({3, size, size});
    for (std::size_t y = 0; y < size; ++y) {
        const std::size_t sy = y * image.height / size;
        for (std::size_t x = 0; x < size; ++x) {
            const std::size_t sx = x * image.width / size;
            const auto* p = &image.rgb[(sy * image.width + sx) * 3];
            for (std::size_t c = 0; c < 3; ++c) t[(c * size + y) * size + x] = static_cast<float>(p[c]) / 255.0f;
        }
    }
    return t;
}

std::vector<Sample> load_dataset(const fs::path& dir, std::size_t input_size) {
    if (!fs::is_directory(dir)) throw DatasetError("not a directory: " + dir.string());
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".ppm") images.push_back(e.path());
    }
    if (images.empty()) throw DatasetError("no images found in " + dir.string());
    std::sort(images.begin(), images.end());
    std::vector<Sample> out;
    out.reserve(images.size());
    for (const auto& p : images) {
        Sample s;
        s.name = p.stem().string();
        s.image = image_to_tensor(read_ppm(p), input_size);
        auto label_path = p;
        label_path.replace_extension(".txt");
        if (fs::exists(label_path)) {
            std::ifstream in(label_path, std::ios::binary);
            const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            try {
                s.labels = parse_labels(text);
            } catch (const ParseError& e) {
                throw DatasetError(label_path.string() + ": " + e.what());
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::pair<Image, std::vector<GroundTruth>> synth_image(Rng& rng, std::size_t size) {
    Image img;
    img.width = img.height = size;
    img.rgb.resize(size * size * 3);
    const int base[3] = {rng.uniform_int(40, 200), rng.uniform_int(40, 200), rng.uniform_int(40, 200)};
    for (std::size_t i = 0; i < size * size; ++i) {
        for (std::size_t c = 0; c < 3; ++c) img.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(base[c] + rng.uniform_int(-30, 30), 0, 255));
    }

    std::vector<GroundTruth> labels;
    const int count = rng.uniform_int(1, 3);
    const double s = static_cast<double>(size);
    for (int k = 0; k < count; ++k) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            const double w = rng.uniform(0.15, 0.40), h = rng.uniform(0.15, 0.40);
            const double cx = rng.uniform(w / 2, 1 - w / 2), cy = rng.uniform(h / 2, 1 - h / 2);
            const Box box{cx, cy, w, h};
            const bool clear = std::all_of(labels.begin(), labels.end(), [&](const GroundTruth& g) {
                return intersection_area(g.box, box) == 0.0;
            });
            if (!clear) continue;
            const int cls = rng.uniform_int(0, 1);
            const std::uint8_t skin[3] = {channel(rng, 190, 250), channel(rng, 130, 190), channel(rng, 90, 140)};
            const std::uint8_t cloth[3] = {channel(rng, 20, 80), channel(rng, 120, 200), channel(rng, 200, 255)};
            fill_ellipse(img, cx * s, cy * s, w * s / 2, h * s / 2, skin);
            if (cls == 1) fill_ellipse(img, cx * s, cy * s, w * s / 2, h * s / 2, cloth, cy * s, (cy + h * 0.4) * s);
            labels.push_back({cls, box});
            break;
        }
    }
    return {std::move(img), std::move(labels)};
}

void write_synthetic_dataset(const fs::path& dir, std::size_t n, std::uint64_t seed, std::size_t size) {
    if (n == 0) throw DatasetError("synthetic dataset needs at least one image");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw DatasetError("cannot create directory " + dir.string());
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        auto [img, labels] = synth_image(rng, size);
        char stem[32];
        std::snprintf(stem, sizeof stem, "img_%04zu", i);
        write_ppm(dir / (std::string(stem) + ".ppm"), img);
        std::ofstream out(dir / (std::string(stem) + ".txt"), std::ios::binary);
        if (!out) throw DatasetError("cannot write labels in " + dir.string());
        out << format_labels(labels);
    }
}

}  // namespace ymask
