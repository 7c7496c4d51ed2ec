#pragma once

// "UNICON01" array container shared by model checkpoints, adapter checkpoints,
// forgetting-audit snapshots and synthetic dataset cases.
//
// Layout:
//   UNICON01\n
//   <manifest byte length, decimal>\n
//   <manifest>            one record per line:
//                           meta <key> <value to end of line>
//                           array <name> f64 <d0>x<d1>... <offset> <nbytes>
//   <payload>             little-endian f64 arrays; offsets relative to payload start
//
// The writer always emits `meta payload_sha256 <hex>`; the reader recomputes
// and rejects mismatches.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unicon/tensor.hpp"

namespace unicon {

std::string sha256_hex(std::span<const std::uint8_t> bytes);

struct NamedArray {
    std::string name;
    Tensor tensor;
};

struct Container {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<NamedArray> arrays;

    void set_meta(const std::string& key, std::string value);
    std::optional<std::string> find_meta(const std::string& key) const;
    std::string meta_value(const std::string& key) const;  // throws FormatError when absent
    std::vector<std::string> meta_values(const std::string& key) const;
    const Tensor& array(const std::string& name) const;     // throws FormatError when absent
    const Tensor* find_array(const std::string& name) const;
};

// Little-endian payload bytes of the arrays in order.
std::vector<std::uint8_t> payload_bytes(const std::vector<NamedArray>& arrays);
std::string payload_sha256(const std::vector<NamedArray>& arrays);

std::vector<std::uint8_t> serialize_container(const Container& c);
Container parse_container(std::span<const std::uint8_t> bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace unicon
