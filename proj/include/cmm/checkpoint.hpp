#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmm/common.hpp"

namespace cmm {

// Checkpoint container: one line of JSON (magic, config, counters, tensor
// manifest), then raw little-endian payloads back to back in manifest order.
// Tensor data is 32-bit float; exact-resume state that needs more width
// (balancer scalars, RNG streams, slot counters) is stored under its own
// dtype, which the manifest records per entry.

namespace ckpt {

inline size_t dtype_size(const std::string& dt) {
    if (dt == "f32" || dt == "i32") return 4;
    if (dt == "f64" || dt == "u64") return 8;
    throw InputError("checkpoint: unknown dtype '" + dt + "'");
}

}  // namespace ckpt

class CheckpointWriter {
public:
    nlohmann::json header;  // caller fills config/counters; manifest added here

    template <class T>
    void add(const std::string& name, const std::string& dtype,
             const Shape& shape, const T* data, size_t count) {
        require(ckpt::dtype_size(dtype) == sizeof(T),
                "checkpoint: dtype width mismatch for " + name);
        require(int64_t(count) == numel(shape),
                "checkpoint: shape does not match element count for " + name);
        nlohmann::json m;
        m["name"] = name;
        m["shape"] = shape;
        m["dtype"] = dtype;
        m["offset"] = payload_.size();
        manifest_.push_back(std::move(m));
        const size_t bytes = count * sizeof(T);
        const size_t at = payload_.size();
        payload_.resize(at + bytes);
        std::memcpy(payload_.data() + at, data, bytes);
    }

    void save(const std::string& path) {
        header["magic"] = "CMM1";
        header["manifest"] = manifest_;
        std::ofstream out(path, std::ios::binary);
        require(bool(out), "cannot open checkpoint '" + path + "' for writing");
        out << header.dump() << '\n';
        out.write(reinterpret_cast<const char*>(payload_.data()),
                  std::streamsize(payload_.size()));
        require(bool(out), "checkpoint write failed for '" + path + "'");
    }

private:
    std::vector<nlohmann::json> manifest_;
    std::vector<uint8_t> payload_;
};

class CheckpointReader {
public:
    explicit CheckpointReader(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        require(bool(in), "cannot open checkpoint '" + path + "'");
        std::string line;
        require(bool(std::getline(in, line)), "checkpoint '" + path + "' is empty");
        try {
            header = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw InputError("checkpoint '" + path + "': bad header: " + e.what());
        }
        require(header.value("magic", "") == std::string("CMM1"),
                "checkpoint '" + path + "': bad magic");
        payload_.assign(std::istreambuf_iterator<char>(in),
                        std::istreambuf_iterator<char>());

        uint64_t expect = 0;
        for (const auto& m : header.at("manifest")) {
            Entry e;
            e.shape = m.at("shape").get<Shape>();
            e.dtype = m.at("dtype").get<std::string>();
            e.offset = m.at("offset").get<uint64_t>();
            require(e.offset == expect,
                    "checkpoint: manifest offsets must be contiguous");
            expect = e.offset + uint64_t(numel(e.shape)) * ckpt::dtype_size(e.dtype);
            entries_[m.at("name").get<std::string>()] = e;
        }
        require(expect == payload_.size(), "checkpoint: payload size mismatch");
    }

    nlohmann::json header;

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    template <class T>
    std::vector<T> read(const std::string& name, const std::string& dtype) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), "checkpoint: missing tensor '" + name + "'");
        const auto& e = it->second;
        require(e.dtype == dtype, "checkpoint: tensor '" + name + "' has dtype " +
                                      e.dtype + ", expected " + dtype);
        require(ckpt::dtype_size(dtype) == sizeof(T),
                "checkpoint: dtype width mismatch for " + name);
        const size_t count = size_t(numel(e.shape));
        std::vector<T> out(count);
        std::memcpy(out.data(), payload_.data() + e.offset, count * sizeof(T));
        return out;
    }

    Shape shape_of(const std::string& name) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), "checkpoint: missing tensor '" + name + "'");
        return it->second.shape;
    }

private:
    struct Entry {
        Shape shape;
        std::string dtype;
        uint64_t offset = 0;
    };
    std::map<std::string, Entry> entries_;
    std::vector<uint8_t> payload_;
};

}  // namespace cmm
