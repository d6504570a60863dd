#include "loom/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace loom {

namespace {

constexpr unsigned char kVersion = 0x01;

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t block_checksum(const Tensor& t) {
    return fnv1a(reinterpret_cast<const unsigned char*>(t.data.data()),
                 t.data.size() * sizeof(double));
}

}  // namespace

void put_block(Checkpoint& ckpt, const std::string& name, Tensor value) {
    for (const auto& [n, _] : ckpt.blocks)
        if (n == name) throw std::invalid_argument("duplicate checkpoint block: " + name);
    ckpt.blocks.emplace_back(name, std::move(value));
}

bool has_block(const Checkpoint& ckpt, const std::string& name) {
    for (const auto& [n, _] : ckpt.blocks)
        if (n == name) return true;
    return false;
}

const Tensor& get_block(const Checkpoint& ckpt, const std::string& name) {
    for (const auto& [n, t] : ckpt.blocks)
        if (n == name) return t;
    throw std::runtime_error("checkpoint missing block: " + name);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::vector<const std::pair<std::string, Tensor>*> order;
    order.reserve(ckpt.blocks.size());
    for (const auto& b : ckpt.blocks) order.push_back(&b);
    std::sort(order.begin(), order.end(),
              [](const auto* a, const auto* b) { return a->first < b->first; });

    nlohmann::json table = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto* b : order) {
        const Tensor& t = b->second;
        table.push_back({{"checksum", hex64(block_checksum(t))},
                         {"cols", t.ncols},
                         {"name", b->first},
                         {"offset", offset},
                         {"rows", t.nrows}});
        offset += t.data.size() * sizeof(double);
    }
    nlohmann::json header = {
        {"blocks", table}, {"config", ckpt.config}, {"meta", ckpt.meta}, {"stage", ckpt.stage}};
    const std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.put(static_cast<char>(kVersion));
    const uint64_t hlen = htext.size();
    unsigned char lenbuf[8];
    for (int i = 0; i < 8; i++) lenbuf[i] = static_cast<unsigned char>((hlen >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto* b : order) {
        const Tensor& t = b->second;
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    const int ver = in.get();
    if (ver != kVersion) throw std::runtime_error("unsupported checkpoint version in " + path);
    unsigned char lbuf[8];
    in.read(reinterpret_cast<char*>(lbuf), 8);
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    uint64_t hlen = 0;
    for (int i = 0; i < 8; i++) hlen |= static_cast<uint64_t>(lbuf[i]) << (8 * i);
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    nlohmann::json header = nlohmann::json::parse(htext);

    Checkpoint ckpt;
    ckpt.stage = header.at("stage").get<int>();
    ckpt.config = header.at("config");
    ckpt.meta = header.at("meta");
    for (const auto& entry : header.at("blocks")) {
        Tensor t(entry.at("rows").get<int>(), entry.at("cols").get<int>());
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint: " + path);
        const std::string want = entry.at("checksum").get<std::string>();
        if (hex64(block_checksum(t)) != want)
            throw std::runtime_error("checkpoint block checksum mismatch: " +
                                     entry.at("name").get<std::string>());
        ckpt.blocks.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    return ckpt;
}

}  // namespace loom
