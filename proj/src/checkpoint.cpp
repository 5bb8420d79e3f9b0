#include "ymask/checkpoint.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace ymask {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMagic = "ymask-checkpoint 1";

std::uint32_t to_little(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
    }
    return v;
}

Shape parse_shape(const std::string& s, const std::string& context) {
    Shape shape;
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t next = s.find('x', pos);
        if (next == std::string::npos) next = s.size();
        try {
            std::size_t used = 0;
            shape.push_back(std::stoul(s.substr(pos, next - pos), &used));
            if (used != next - pos) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            throw CheckpointError(context + ": bad shape '" + s + "'");
        }
        pos = next + 1;
    }
    if (shape.empty()) throw CheckpointError(context + ": empty shape");
    return shape;
}

std::string shape_text(const Shape& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s;
}

struct Parsed {
    CheckpointHeader header;
    std::size_t blob_start = 0;
};

Parsed parse_header(std::istream& in, const fs::path& path) {
    Parsed p;
    std::string line;
    if (!std::getline(in, line) || line != kMagic) throw CheckpointError(path.string() + ": not a checkpoint");
    std::map<std::string, std::string> opts;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            ended = true;
            break;
        }
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "option") {
            std::string key, value;
            ls >> key >> value;
            opts[key] = value;
        } else if (kind == "tensor") {
            CheckpointEntry e;
            std::string dtype, shape;
            ls >> e.name >> dtype >> shape >> e.offset;
            if (!ls || dtype != "f32") throw CheckpointError(path.string() + ": bad manifest line '" + line + "'");
            e.shape = parse_shape(shape, path.string());
            p.header.entries.push_back(std::move(e));
        } else {
            throw CheckpointError(path.string() + ": unexpected header line '" + line + "'");
        }
    }
    if (!ended) throw CheckpointError(path.string() + ": truncated header");
    p.blob_start = static_cast<std::size_t>(in.tellg());

    auto get = [&](const std::string& key) -> std::size_t {
        auto it = opts.find(key);
        if (it == opts.end()) throw CheckpointError(path.string() + ": missing option " + key);
        try {
            return std::stoul(it->second);
        } catch (const std::exception&) {
            throw CheckpointError(path.string() + ": bad value for option " + key);
        }
    };
    auto& o = p.header.options;
    o.n_classes = get("n_classes");
    o.input_size = get("input_size");
    o.scale = get("large") ? ModelScale::Large : ModelScale::Toy;
    o.msconv = get("msconv");
    o.swin = get("swin");
    o.icbam = get("icbam");
    o.fusion = get("fusion");
    o.cbam_reduction = get("cbam_reduction");
    o.swin_window = get("swin_window");
    o.swin_heads = get("swin_heads");
    o.msconv_heads = get("msconv_heads");

    // offsets must tile the blob in order
    std::size_t expect = 0;
    for (const auto& e : p.header.entries) {
        if (e.offset != expect) throw CheckpointError(path.string() + ": offset of " + e.name + " is not contiguous");
        expect += shape_numel(e.shape) * 4;
    }
    return p;
}

}  // namespace

void save_checkpoint(const fs::path& path, const ParamList<float>& params, const ModelOptions& o) {
    std::ostringstream header;
    header << kMagic << "\n";
    header << "option n_classes " << o.n_classes << "\n";
    header << "option input_size " << o.input_size << "\n";
    header << "option large " << (o.scale == ModelScale::Large) << "\n";
    header << "option msconv " << o.msconv << "\n";
    header << "option swin " << o.swin << "\n";
    header << "option icbam " << o.icbam << "\n";
    header << "option fusion " << o.fusion << "\n";
    header << "option cbam_reduction " << o.cbam_reduction << "\n";
    header << "option swin_window " << o.swin_window << "\n";
    header << "option swin_heads " << o.swin_heads << "\n";
    header << "option msconv_heads " << o.msconv_heads << "\n";
    std::size_t offset = 0;
    for (const auto& p : params) {
        header << "tensor " << p.name << " f32 " << shape_text(p.tensor->shape()) << " " << offset << "\n";
        offset += p.tensor->numel() * 4;
    }
    header << "end\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + path.string());
    const auto text = header.str();
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<std::uint32_t> words;
    for (const auto& p : params) {
        words.resize(p.tensor->numel());
        const auto d = p.tensor->data();
        for (std::size_t i = 0; i < d.size(); ++i) words[i] = to_little(std::bit_cast<std::uint32_t>(d[i]));
        out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
    }
    if (!out) throw CheckpointError("write failed for " + path.string());
}

CheckpointHeader read_checkpoint_header(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    return parse_header(in, path).header;
}

void load_checkpoint(const fs::path& path, ParamList<float>& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    const auto parsed = parse_header(in, path);
    const auto& entries = parsed.header.entries;

    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) {
        if (!by_name.emplace(e.name, &e).second) throw CheckpointError(path.string() + ": duplicate tensor " + e.name);
    }
    for (const auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw CheckpointError(path.string() + ": missing tensor " + p.name);
        if (it->second->shape != p.tensor->shape()) {
            throw CheckpointError(path.string() + ": shape mismatch for " + p.name + ": checkpoint " +
                                  shape_str(it->second->shape) + ", model " + shape_str(p.tensor->shape()));
        }
    }
    if (entries.size() != params.size()) {
        throw CheckpointError(path.string() + ": checkpoint holds " + std::to_string(entries.size()) + " tensors, model has " +
                              std::to_string(params.size()));
    }

    std::vector<std::uint32_t> words;
    for (auto& p : params) {
        const auto* e = by_name.at(p.name);
        words.resize(p.tensor->numel());
        in.seekg(static_cast<std::streamoff>(parsed.blob_start + e->offset));
        in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
        if (in.gcount() != static_cast<std::streamsize>(words.size() * 4)) {
            throw CheckpointError(path.string() + ": truncated data for " + p.name);
        }
        auto d = p.tensor->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::bit_cast<float>(to_little(words[i]));
    }
}

}  // namespace ymask
