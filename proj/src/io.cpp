#include "rfedit/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rfedit::io {

namespace {

uint8_t to_byte(float v) {
    v = std::clamp(v, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::floor(v * 255.0f + 0.5f));
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    return is;
}

void skip_ws(std::istream& is) {
    int c;
    while ((c = is.peek()) != EOF) {
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
    }
}

int read_pnm_int(std::istream& is) {
    skip_ws(is);
    int v = -1;
    is >> v;
    if (!is || v < 0) throw IoError("malformed PNM header");
    return v;
}

}  // namespace

void write_f32_le(std::ostream& os, const float* data, size_t n) {
    static_assert(std::endian::native == std::endian::little, "little-endian host expected");
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

void read_f32_le(std::istream& is, float* data, size_t n) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 4));
    if (!is) throw IoError("truncated float payload");
}

void write_u32_le(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32_le(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw IoError("truncated integer field");
    return v;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw InputError("write_ppm: expected 1 or 3 channels");
    auto os = open_out(path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                int src = img.channels == 3 ? c : 0;
                os.put(static_cast<char>(to_byte(img.at(y, x, src))));
            }
    if (!os) throw IoError("write failed: " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
    auto is = open_in(path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw IoError("not a P6 PPM: " + path.string());
    int w = read_pnm_int(is);
    int h = read_pnm_int(is);
    int maxv = read_pnm_int(is);
    if (maxv != 255) throw IoError("only 8-bit PPM supported");
    is.get();
    Image img(h, w, 3);
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!is) throw IoError("truncated PPM payload");
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[x * 3 + c] / 255.0f;
    }
    return img;
}

void write_pgm(const std::filesystem::path& path, const TokenMap& map) {
    auto os = open_out(path);
    os << "P5\n" << map.width << " " << map.height << "\n255\n";
    for (float v : map.values) os.put(static_cast<char>(to_byte(v)));
    if (!os) throw IoError("write failed: " + path.string());
}

TokenMap read_pgm(const std::filesystem::path& path) {
    auto is = open_in(path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw IoError("not a P5 PGM: " + path.string());
    int w = read_pnm_int(is);
    int h = read_pnm_int(is);
    int maxv = read_pnm_int(is);
    if (maxv != 255) throw IoError("only 8-bit PGM supported");
    is.get();
    TokenMap map(h, w);
    for (size_t i = 0; i < map.values.size(); ++i) {
        int c = is.get();
        if (c == EOF) throw IoError("truncated PGM payload");
        map.values[i] = static_cast<float>(c) / 255.0f;
    }
    return map;
}

static constexpr char kMapMagic[8] = {'R', 'F', 'E', 'M', 'A', 'P', '0', '1'};

void write_map_raw(const std::filesystem::path& path, const TokenMap& map) {
    auto os = open_out(path);
    os.write(kMapMagic, 8);
    write_u32_le(os, static_cast<uint32_t>(map.height));
    write_u32_le(os, static_cast<uint32_t>(map.width));
    write_f32_le(os, map.values.data(), map.values.size());
    if (!os) throw IoError("write failed: " + path.string());
}

TokenMap read_map_raw(const std::filesystem::path& path) {
    auto is = open_in(path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMapMagic, 8) != 0)
        throw IoError("bad map magic: " + path.string());
    int h = static_cast<int>(read_u32_le(is));
    int w = static_cast<int>(read_u32_le(is));
    TokenMap map(h, w);
    read_f32_le(is, map.values.data(), map.values.size());
    return map;
}

void write_manifest(const std::filesystem::path& path,
                    const std::map<std::string, std::string>& kv) {
    auto os = open_out(path);
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    if (!os) throw IoError("write failed: " + path.string());
}

std::map<std::string, std::string> read_manifest(const std::filesystem::path& path) {
    auto is = open_in(path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed manifest line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

}  // namespace rfedit::io
