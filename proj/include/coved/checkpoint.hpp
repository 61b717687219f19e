#pragma once

// Checkpoint container: a text header followed by raw little-endian IEEE-754
// 64-bit payloads. The header starts with a format-version integer, then one
// line per parameter ("name extents... f64"), terminated by "end". Payloads
// follow in header order, so load(save(store)) is a bitwise round trip.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "coved/tensor.hpp"

namespace coved {

inline constexpr int kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as native little-endian doubles");

inline void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
    out << kCheckpointVersion << "\n";
    out << "params " << store.size() << "\n";
    for (const auto& [name, p] : store.all()) {
        out << name;
        for (std::size_t e : p->shape()) out << " " << e;
        out << " f64\n";
    }
    out << "end\n";
    for (const auto& [name, p] : store.all()) {
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

// Loads into an existing registry. The parameter sets must match exactly:
// a checkpoint written by one architecture is rejected by another.
inline void load_checkpoint(ParameterStore& store, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw DataError("checkpoint header truncated: " + path.string());
    int version = -1;
    try {
        version = std::stoi(line);
    } catch (...) {
        throw DataError("checkpoint does not start with a version integer: " + path.string());
    }
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " +
                        path.string());

    if (!std::getline(in, line)) throw DataError("checkpoint header truncated: " + path.string());
    std::istringstream count_line(line);
    std::string tag;
    std::size_t count = 0;
    count_line >> tag >> count;
    if (tag != "params") throw DataError("malformed checkpoint header: " + path.string());

    struct Entry {
        std::string name;
        Shape shape;
    };
    std::vector<Entry> entries;
    entries.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line))
            throw DataError("checkpoint header truncated: " + path.string());
        std::istringstream ls(line);
        std::vector<std::string> toks;
        std::string t;
        while (ls >> t) toks.push_back(t);
        if (toks.size() < 3 || toks.back() != "f64")
            throw DataError("malformed checkpoint entry '" + line + "' in " + path.string());
        Entry e;
        e.name = toks.front();
        for (std::size_t j = 1; j + 1 < toks.size(); ++j)
            e.shape.push_back(static_cast<std::size_t>(std::stoull(toks[j])));
        entries.push_back(std::move(e));
    }
    if (!std::getline(in, line) || line != "end")
        throw DataError("checkpoint header missing end marker: " + path.string());

    if (entries.size() != store.size())
        throw DataError("checkpoint has " + std::to_string(entries.size()) +
                        " parameters but the model registers " + std::to_string(store.size()));
    for (const auto& e : entries) {
        if (!store.contains(e.name))
            throw DataError("checkpoint parameter " + e.name + " is not part of this model");
        if (store.get(e.name)->shape() != e.shape)
            throw DataError("shape mismatch for " + e.name + ": checkpoint " +
                            shape_str(e.shape) + " vs model " +
                            shape_str(store.get(e.name)->shape()));
    }

    for (const auto& e : entries) {
        ParamPtr p = store.get(e.name);
        in.read(reinterpret_cast<char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (in.gcount() != static_cast<std::streamsize>(p->value.size() * sizeof(double)))
            throw DataError("checkpoint payload truncated at " + e.name + " in " + path.string());
    }
}

}  // namespace coved
