#include "unicon/container.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "unicon/errors.hpp"

namespace unicon {

namespace {

constexpr std::string_view kMagic = "UNICON01\n";

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

Shape parse_shape(const std::string& s) {
    Shape shape;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto x = s.find('x', start);
        const std::string part = s.substr(start, x == std::string::npos ? std::string::npos : x - start);
        if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
            throw FormatError("malformed shape '" + s + "'");
        }
        shape.push_back(std::stoull(part));
        if (x == std::string::npos) break;
        start = x + 1;
    }
    return shape;
}

std::string format_shape(const Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out;
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 computation failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

void Container::set_meta(const std::string& key, std::string value) {
    if (key.find_first_of(" \n") != std::string::npos || value.find('\n') != std::string::npos) {
        throw FormatError("meta key/value may not contain newlines (key '" + key + "')");
    }
    for (auto& [k, v] : meta) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    meta.emplace_back(key, std::move(value));
}

std::optional<std::string> Container::find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return v;
    return std::nullopt;
}

std::string Container::meta_value(const std::string& key) const {
    auto v = find_meta(key);
    if (!v) throw FormatError("container lacks meta field '" + key + "'");
    return *v;
}

std::vector<std::string> Container::meta_values(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : meta)
        if (k == key) out.push_back(v);
    return out;
}

const Tensor* Container::find_array(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a.tensor;
    return nullptr;
}

const Tensor& Container::array(const std::string& name) const {
    if (const Tensor* t = find_array(name)) return *t;
    throw FormatError("container lacks array '" + name + "'");
}

std::vector<std::uint8_t> payload_bytes(const std::vector<NamedArray>& arrays) {
    std::size_t total = 0;
    for (const auto& a : arrays) total += a.tensor.numel() * sizeof(double);
    std::vector<std::uint8_t> out(total);
    std::size_t off = 0;
    for (const auto& a : arrays) {
        const std::size_t n = a.tensor.numel() * sizeof(double);
        std::memcpy(out.data() + off, a.tensor.data().data(), n);
        off += n;
    }
    return out;
}

std::string payload_sha256(const std::vector<NamedArray>& arrays) { return sha256_hex(payload_bytes(arrays)); }

std::vector<std::uint8_t> serialize_container(const Container& c) {
    const auto payload = payload_bytes(c.arrays);
    std::ostringstream manifest;
    for (const auto& [k, v] : c.meta) {
        if (k == "payload_sha256") continue;
        manifest << "meta " << k << ' ' << v << '\n';
    }
    manifest << "meta payload_sha256 " << sha256_hex(payload) << '\n';
    std::size_t off = 0;
    for (const auto& a : c.arrays) {
        if (a.name.empty() || a.name.find_first_of(" \n") != std::string::npos) {
            throw FormatError("array name '" + a.name + "' may not be empty or contain whitespace");
        }
        const std::size_t n = a.tensor.numel() * sizeof(double);
        manifest << "array " << a.name << " f64 " << format_shape(a.tensor.shape()) << ' ' << off << ' ' << n << '\n';
        off += n;
    }
    const std::string m = manifest.str();
    const std::string header = std::string(kMagic) + std::to_string(m.size()) + "\n";
    std::vector<std::uint8_t> out;
    out.reserve(header.size() + m.size() + payload.size());
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), m.begin(), m.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

Container parse_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagic.size() || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
        throw FormatError("bad magic at offset 0: not a UNICON01 container");
    }
    std::size_t pos = kMagic.size();
    const std::size_t line_start = pos;
    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    if (pos >= bytes.size()) throw FormatError("truncated header at offset " + std::to_string(line_start));
    const std::string len_str(bytes.begin() + line_start, bytes.begin() + pos);
    if (len_str.empty() || len_str.find_first_not_of("0123456789") != std::string::npos) {
        throw FormatError("malformed manifest length at offset " + std::to_string(line_start));
    }
    const std::size_t manifest_len = std::stoull(len_str);
    const std::size_t manifest_start = pos + 1;
    if (manifest_start + manifest_len > bytes.size()) {
        throw FormatError("manifest truncated at offset " + std::to_string(bytes.size()) + ", expected " +
                          std::to_string(manifest_start + manifest_len) + " bytes");
    }
    const std::size_t payload_start = manifest_start + manifest_len;
    const std::string manifest(bytes.begin() + manifest_start, bytes.begin() + payload_start);

    Container c;
    std::istringstream lines(manifest);
    std::string line;
    std::size_t expected_off = 0;
    struct Entry {
        std::string name;
        Shape shape;
        std::size_t off, n;
    };
    std::vector<Entry> entries;
    std::size_t line_off = manifest_start;
    while (std::getline(lines, line)) {
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            c.meta.emplace_back(key, value);
        } else if (kind == "array") {
            Entry e;
            std::string dtype, shape;
            if (!(ls >> e.name >> dtype >> shape >> e.off >> e.n)) {
                throw FormatError("malformed array record at offset " + std::to_string(line_off));
            }
            if (dtype != "f64") throw FormatError("unsupported dtype '" + dtype + "' for array " + e.name);
            e.shape = parse_shape(shape);
            if (e.off != expected_off || e.n != shape_numel(e.shape) * sizeof(double)) {
                throw FormatError("inconsistent layout for array " + e.name + " at offset " +
                                  std::to_string(line_off));
            }
            expected_off += e.n;
            entries.push_back(std::move(e));
        } else {
            throw FormatError("unknown manifest record '" + kind + "' at offset " + std::to_string(line_off));
        }
        line_off += line.size() + 1;
    }
    if (payload_start + expected_off > bytes.size()) {
        throw FormatError("payload truncated at offset " + std::to_string(bytes.size()) + ", expected " +
                          std::to_string(payload_start + expected_off) + " bytes");
    }
    if (payload_start + expected_off < bytes.size()) {
        throw FormatError("trailing bytes after payload at offset " + std::to_string(payload_start + expected_off));
    }
    const auto payload = bytes.subspan(payload_start, expected_off);
    const std::string digest = sha256_hex(payload);
    const auto stored = c.find_meta("payload_sha256");
    if (!stored) throw FormatError("manifest lacks payload_sha256");
    if (*stored != digest) {
        throw FormatError("payload digest mismatch (stored " + *stored + ", computed " + digest + ")");
    }
    for (const auto& e : entries) {
        std::vector<double> data(shape_numel(e.shape));
        std::memcpy(data.data(), payload.data() + e.off, e.n);
        c.arrays.push_back({e.name, Tensor(e.shape, std::move(data))});
    }
    return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
}

void write_container(const std::filesystem::path& path, const Container& c) {
    write_file_bytes(path, serialize_container(c));
}

Container read_container(const std::filesystem::path& path) { return parse_container(read_file_bytes(path)); }

}  // namespace unicon
