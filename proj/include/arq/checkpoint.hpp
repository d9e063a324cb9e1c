#pragma once

// Checkpoints: a JSON manifest (tensor names, shapes, activation tags, byte
// offsets, free-form metadata) and a sibling file of little-endian float32
// values concatenated in manifest order.

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <utility>

#include "arq/nn.hpp"

namespace arq {

using json = nlohmann::json;

struct Checkpoint {
    json meta = json::object();
    std::vector<std::pair<std::string, Mlp>> networks;
    std::vector<std::pair<std::string, std::vector<double>>> vectors;

    const Mlp& network(const std::string& name) const {
        for (const auto& [n, net] : networks)
            if (n == name) return net;
        throw ParseError("checkpoint has no network '" + name + "'");
    }
    const std::vector<double>& vector(const std::string& name) const {
        for (const auto& [n, v] : vectors)
            if (n == name) return v;
        throw ParseError("checkpoint has no vector '" + name + "'");
    }
};

inline std::filesystem::path checkpoint_binary_path(const std::filesystem::path& manifest) {
    auto p = manifest;
    p.replace_extension(".bin");
    return p;
}

namespace detail {

inline void append_f32le(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
}

inline double read_f32le(const std::string& buf, std::size_t pos) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + k])) << (8 * k);
    return static_cast<double>(std::bit_cast<float>(bits));
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& data) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& manifest_path, const Checkpoint& ckpt) {
    std::string blob;
    json tensors = json::array();
    json nets = json::array();
    auto add_tensor = [&](const std::string& name, std::vector<std::size_t> shape, std::span<const double> values) {
        tensors.push_back({{"name", name}, {"shape", shape}, {"offset", blob.size()}, {"dtype", "f32le"}});
        for (double v : values) detail::append_f32le(blob, v);
    };
    for (const auto& [name, net] : ckpt.networks) {
        json layers = json::array();
        for (std::size_t i = 0; i < net.layers().size(); ++i) {
            const auto& l = net.layers()[i];
            layers.push_back({{"in", l.in}, {"out", l.out}, {"activation", to_string(l.act)}, {"skip", l.skip}});
            const auto p = net.params();
            add_tensor(name + "." + std::to_string(i) + ".weight", {l.out, l.in},
                       p.subspan(net.weight_offset(i), l.out * l.in));
            add_tensor(name + "." + std::to_string(i) + ".bias", {l.out}, p.subspan(net.bias_offset(i), l.out));
        }
        nets.push_back({{"name", name}, {"layers", layers}});
    }
    json vecs = json::array();
    for (const auto& [name, v] : ckpt.vectors) {
        vecs.push_back(name);
        add_tensor(name, {v.size()}, v);
    }
    const auto bin = checkpoint_binary_path(manifest_path);
    json manifest = {{"format", "arq-checkpoint"},
                     {"version", 1},
                     {"binary", bin.filename().string()},
                     {"byte_size", blob.size()},
                     {"meta", ckpt.meta},
                     {"networks", nets},
                     {"vectors", vecs},
                     {"tensors", tensors}};
    detail::write_file(bin, blob);
    detail::write_file(manifest_path, manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest_path) {
    if (!std::filesystem::exists(manifest_path))
        throw ParseError("checkpoint '" + manifest_path.string() + "' missing");
    json manifest;
    try {
        manifest = json::parse(detail::read_file(manifest_path));
    } catch (const json::exception& e) {
        throw ParseError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "arq-checkpoint") throw ParseError("not an arq checkpoint manifest");
    const auto blob = detail::read_file(manifest_path.parent_path() / manifest.at("binary").get<std::string>());
    if (blob.size() != manifest.at("byte_size").get<std::size_t>())
        throw ParseError("checkpoint binary size does not match manifest");

    std::size_t next = 0;
    const auto& tensors = manifest.at("tensors");
    auto read_tensor = [&](const std::string& name, std::size_t count, std::span<double> dst) {
        if (next >= tensors.size()) throw ParseError("checkpoint manifest lists too few tensors");
        const auto& t = tensors[next++];
        if (t.at("name").get<std::string>() != name) throw ParseError("unexpected tensor order at '" + name + "'");
        const auto offset = t.at("offset").get<std::size_t>();
        if (offset + 4 * count > blob.size()) throw ParseError("tensor '" + name + "' runs past end of binary");
        for (std::size_t k = 0; k < count; ++k) dst[k] = detail::read_f32le(blob, offset + 4 * k);
    };

    Checkpoint ckpt;
    ckpt.meta = manifest.at("meta");
    for (const auto& n : manifest.at("networks")) {
        std::vector<LayerSpec> spec;
        for (const auto& l : n.at("layers"))
            spec.push_back({l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>(),
                            activation_from_string(l.at("activation").get<std::string>()),
                            l.at("skip").get<std::size_t>()});
        Mlp net(std::move(spec));
        const auto name = n.at("name").get<std::string>();
        auto p = net.params();
        for (std::size_t i = 0; i < net.layers().size(); ++i) {
            const auto& l = net.layers()[i];
            read_tensor(name + "." + std::to_string(i) + ".weight", l.out * l.in, p.subspan(net.weight_offset(i)));
            read_tensor(name + "." + std::to_string(i) + ".bias", l.out, p.subspan(net.bias_offset(i)));
        }
        ckpt.networks.emplace_back(name, std::move(net));
    }
    for (const auto& vn : manifest.at("vectors")) {
        const auto name = vn.get<std::string>();
        const auto& t = tensors.at(next);
        std::vector<double> v(t.at("shape").at(0).get<std::size_t>());
        read_tensor(name, v.size(), v);
        ckpt.vectors.emplace_back(name, std::move(v));
    }
    return ckpt;
}

}  // namespace arq
