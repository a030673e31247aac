// Reference computations used only by the tests. Each one is written from
// the format/arithmetic definition and deliberately shares no code with
// the library routine it checks.
#ifndef DUQUSIM_TESTS_ORACLES_HPP
#define DUQUSIM_TESTS_ORACLES_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace oracle {

inline std::uint32_t ror13(const std::vector<std::uint8_t>& bytes)
{
    std::uint64_t h = 0;
    for (std::uint8_t b : bytes) {
        const std::uint64_t low13 = h & 0x1FFF;
        h = (h >> 13) | (low13 << 19);
        h = (h + b) % 0x100000000ULL;
    }
    return static_cast<std::uint32_t>(h);
}

inline std::uint32_t ror13(const std::string& s)
{
    return ror13(std::vector<std::uint8_t>(s.begin(), s.end()));
}

// Target of E8 rel32 at `site`, via signed 64-bit arithmetic.
inline std::uint32_t near_call_target(std::uint32_t site, const std::uint8_t* bytes)
{
    std::int64_t rel = 0;
    for (int i = 3; i >= 0; --i)
        rel = rel * 256 + bytes[1 + i];
    if (rel >= 0x80000000LL)
        rel -= 0x100000000LL;
    std::int64_t target = static_cast<std::int64_t>(site) + 5 + rel;
    target %= 0x100000000LL;
    if (target < 0)
        target += 0x100000000LL;
    return static_cast<std::uint32_t>(target);
}

struct Fixup {
    std::uint32_t rva;
    int type; // 0 or 3
};

// Fixup-by-fixup scalar relocation: reassemble each dword from bytes,
// add the delta in 64 bits and reduce modulo 2^32.
inline void relocate(std::vector<std::uint8_t>& image, std::uint32_t mapped, std::uint32_t preferred,
                     const std::vector<Fixup>& fixups)
{
    const std::int64_t delta = static_cast<std::int64_t>(mapped) - static_cast<std::int64_t>(preferred);
    for (const Fixup& f : fixups) {
        if (f.type != 3)
            continue;
        std::int64_t v = 0;
        for (int i = 0; i < 4; ++i)
            v += static_cast<std::int64_t>(image[f.rva + i]) << (8 * i);
        v = ((v + delta) % 0x100000000LL + 0x100000000LL) % 0x100000000LL;
        for (int i = 0; i < 4; ++i)
            image[f.rva + i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF);
    }
}

// Flattens the base relocation directory of a mapped image in table order.
inline std::vector<Fixup> read_relocations(const std::vector<std::uint8_t>& mapped, std::uint32_t dir_rva,
                                           std::uint32_t dir_size)
{
    std::vector<Fixup> out;
    std::size_t at = dir_rva;
    while (at + 8 <= std::size_t{dir_rva} + dir_size) {
        std::uint32_t page = 0, block = 0;
        for (int i = 3; i >= 0; --i) {
            page = (page << 8) | mapped.at(at + i);
            block = (block << 8) | mapped.at(at + 4 + i);
        }
        if (block < 8)
            break;
        for (std::size_t e = at + 8; e + 2 <= at + block; e += 2) {
            const unsigned entry = mapped.at(e) | (mapped.at(e + 1) << 8);
            out.push_back({page + (entry & 0x0FFF), static_cast<int>(entry >> 12)});
        }
        at += block;
    }
    return out;
}

inline std::vector<std::uint8_t> xor_decrypt(const std::vector<std::uint8_t>& blob, std::uint8_t key)
{
    std::vector<std::uint8_t> out;
    for (std::size_t i = 0; i < blob.size(); ++i)
        out.push_back(static_cast<std::uint8_t>(blob[i] ^ key ^ (i & 0xFF)));
    return out;
}

// Minimal PE dumper reading fixed header offsets straight from the bytes.
struct DumpedSection {
    std::string name;
    std::uint32_t virtual_size, virtual_address, raw_size, raw_offset, characteristics;
};

struct Dump {
    std::uint16_t mz;
    std::uint32_t lfanew, signature;
    std::uint16_t machine, sections, magic;
    std::uint32_t entry, image_base, size_of_image;
    std::uint32_t export_rva, export_size, reloc_rva, reloc_size;
    std::vector<DumpedSection> section_table;
};

inline std::uint32_t rd(const std::vector<std::uint8_t>& b, std::size_t at, int width)
{
    std::uint32_t v = 0;
    for (int i = width - 1; i >= 0; --i)
        v = (v << 8) | b.at(at + i);
    return v;
}

inline Dump dump(const std::vector<std::uint8_t>& b)
{
    Dump d{};
    d.mz = static_cast<std::uint16_t>(rd(b, 0, 2));
    d.lfanew = rd(b, 60, 4);
    d.signature = rd(b, d.lfanew, 4);
    d.machine = static_cast<std::uint16_t>(rd(b, d.lfanew + 4, 2));
    d.sections = static_cast<std::uint16_t>(rd(b, d.lfanew + 6, 2));
    const std::size_t opt = d.lfanew + 24;
    d.magic = static_cast<std::uint16_t>(rd(b, opt, 2));
    d.entry = rd(b, opt + 16, 4);
    d.image_base = rd(b, opt + 28, 4);
    d.size_of_image = rd(b, opt + 56, 4);
    d.export_rva = rd(b, opt + 96, 4);
    d.export_size = rd(b, opt + 100, 4);
    d.reloc_rva = rd(b, opt + 96 + 40, 4);
    d.reloc_size = rd(b, opt + 96 + 44, 4);
    const std::size_t table = opt + rd(b, d.lfanew + 20, 2);
    for (std::size_t i = 0; i < d.sections; ++i) {
        const std::size_t at = table + 40 * i;
        DumpedSection s;
        for (int c = 0; c < 8 && b.at(at + c) != 0; ++c)
            s.name.push_back(static_cast<char>(b[at + c]));
        s.virtual_size = rd(b, at + 8, 4);
        s.virtual_address = rd(b, at + 12, 4);
        s.raw_size = rd(b, at + 16, 4);
        s.raw_offset = rd(b, at + 20, 4);
        s.characteristics = rd(b, at + 36, 4);
        d.section_table.push_back(s);
    }
    return d;
}

} // namespace oracle

#endif
