#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "davqa/errors.hpp"
#include "davqa/sha256.hpp"
#include "davqa/tensor.hpp"

namespace davqa {

// Little-endian binary parameter container:
//   8-byte magic | u64 header length | JSON header | f64 payload
// The header lists (name, shape, offset, length) per record plus free-form
// metadata and a SHA-256 of the payload bytes.
namespace ckpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

inline constexpr char magic[8] = {'D', 'A', 'V', 'Q', 'A', 'C', 'K', '1'};

struct Record {
    std::string name;
    Shape shape;
    std::size_t offset = 0;  // element offset into the payload
    std::size_t length = 0;  // element count
};

struct Checkpoint {
    std::vector<Record> records;
    nlohmann::json meta;
    std::vector<double> payload;

    const Record& find(const std::string& name) const {
        for (const Record& r : records)
            if (r.name == name) return r;
        throw LookupError("checkpoint has no record named '" + name + "'");
    }

    Tensor tensor_of(const std::string& name) const {
        const Record& r = find(name);
        std::vector<double> vals(payload.begin() + static_cast<std::ptrdiff_t>(r.offset),
                                 payload.begin() + static_cast<std::ptrdiff_t>(r.offset + r.length));
        return Tensor::from(r.shape, std::move(vals));
    }
};

inline std::string payload_checksum(const std::vector<double>& payload) {
    Sha256 h;
    h.update(payload);
    return h.hex_digest();
}

inline void save(const ParameterStore& store, const std::filesystem::path& path,
                 nlohmann::json meta = nlohmann::json::object()) {
    std::vector<double> payload;
    payload.reserve(store.total_elements());
    nlohmann::json records = nlohmann::json::array();
    for (const Parameter& p : store.all()) {
        nlohmann::json rec;
        rec["name"] = p.name;
        rec["shape"] = p.tensor.shape();
        rec["offset"] = payload.size();
        rec["length"] = p.tensor.numel();
        records.push_back(std::move(rec));
        payload.insert(payload.end(), p.tensor.data().begin(), p.tensor.data().end());
    }
    nlohmann::json header;
    header["version"] = 1;
    header["records"] = std::move(records);
    header["meta"] = std::move(meta);
    header["payload_checksum"] = payload_checksum(payload);
    const std::string header_text = header.dump();

    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot open checkpoint for writing: " + path.string());
    out.write(magic, sizeof(magic));
    const std::uint64_t hlen = header_text.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (!out) throw FileError("short write while saving checkpoint: " + path.string());
}

inline Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open checkpoint: " + path.string());
    char got_magic[8];
    in.read(got_magic, sizeof(got_magic));
    if (!in || std::memcmp(got_magic, magic, sizeof(magic)) != 0) {
        throw FormatError("not a parameter checkpoint: " + path.string());
    }
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen > (1ull << 30)) throw FormatError("corrupt checkpoint header length in " + path.string());
    std::string header_text(hlen, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw FormatError("truncated checkpoint header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid checkpoint header JSON in " + path.string() + ": " + e.what());
    }

    Checkpoint ck;
    ck.meta = header.value("meta", nlohmann::json::object());
    std::size_t total = 0;
    for (const auto& rec : header.at("records")) {
        Record r;
        r.name = rec.at("name").get<std::string>();
        r.shape = rec.at("shape").get<Shape>();
        r.offset = rec.at("offset").get<std::size_t>();
        r.length = rec.at("length").get<std::size_t>();
        if (shape_numel(r.shape) != r.length || r.offset != total) {
            throw FormatError("inconsistent record layout for '" + r.name + "' in " + path.string());
        }
        total += r.length;
        ck.records.push_back(std::move(r));
    }
    ck.payload.resize(total);
    in.read(reinterpret_cast<char*>(ck.payload.data()),
            static_cast<std::streamsize>(total * sizeof(double)));
    if (!in) throw FormatError("truncated checkpoint payload in " + path.string());

    const std::string want = header.at("payload_checksum").get<std::string>();
    const std::string have = payload_checksum(ck.payload);
    if (want != have) {
        throw FormatError("checkpoint payload checksum mismatch in " + path.string() + ": header says " +
                          want.substr(0, 12) + "..., payload hashes to " + have.substr(0, 12) + "...");
    }
    return ck;
}

// Copies checkpoint values into an existing store. Every store parameter must
// be present with a matching shape; extra checkpoint records are an error too,
// so a load is always a complete, exact restore.
inline void load_into(const Checkpoint& ck, ParameterStore& store) {
    if (ck.records.size() != store.size()) {
        throw ContractError("checkpoint holds " + std::to_string(ck.records.size()) +
                            " records but store has " + std::to_string(store.size()) + " parameters");
    }
    for (const Record& r : ck.records) {
        Parameter& p = store.at(r.name);
        if (p.tensor.shape() != r.shape) {
            throw ShapeError("checkpoint record '" + r.name + "' has shape " + shape_str(r.shape) +
                             " but parameter is " + shape_str(p.tensor.shape()));
        }
        std::copy_n(ck.payload.begin() + static_cast<std::ptrdiff_t>(r.offset), r.length,
                    p.tensor.data().begin());
    }
}

inline void load_into(const std::filesystem::path& path, ParameterStore& store) {
    load_into(load(path), store);
}

}  // namespace ckpt
}  // namespace davqa
