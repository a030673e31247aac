#include "duqusim/pe_format.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <limits>
#include <set>

namespace duqusim::pe {

namespace {

constexpr std::size_t kOptEntryPoint = 16;
constexpr std::size_t kOptImageBase = 28;
constexpr std::size_t kOptSectionAlignment = 32;
constexpr std::size_t kOptFileAlignment = 36;
constexpr std::size_t kOptSizeOfImage = 56;
constexpr std::size_t kOptSizeOfHeaders = 60;
constexpr std::size_t kOptSubsystem = 68;
constexpr std::size_t kOptNumberOfRvaAndSizes = 92;
constexpr std::size_t kOptDataDirectories = 96;

constexpr std::size_t kExportDirSize = 40;

[[noreturn]] void fail(PeErrc code, const std::string& detail)
{
    throw PeError(code, detail);
}

std::string hex32(std::uint32_t value)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", value);
    return buf;
}

void need(ByteView buffer, std::uint64_t offset, std::uint64_t length, const char* what)
{
    if (offset + length > buffer.size())
        fail(PeErrc::truncated, std::string(what) + " extends past end of buffer");
}

// rva_to_offset, but a table that cannot be located in the file counts
// as truncation rather than a bad address.
std::uint32_t table_offset(const PeImage& image, std::uint32_t rva, const char* what)
{
    try {
        return rva_to_offset(image, rva);
    } catch (const PeError&) {
        fail(PeErrc::truncated, std::string(what) + " at rva " + hex32(rva) + " is not backed by file data");
    }
}

std::string read_cstring(const PeImage& image, std::uint32_t rva)
{
    const std::uint32_t offset = table_offset(image, rva, "export name");
    const auto* begin = image.raw.data() + offset;
    const auto* end = image.raw.data() + image.raw.size();
    const auto* nul = std::find(begin, end, std::uint8_t{0});
    if (nul == end)
        fail(PeErrc::truncated, "unterminated export name at rva " + hex32(rva));
    return std::string(reinterpret_cast<const char*>(begin), reinterpret_cast<const char*>(nul));
}

void parse_exports(PeImage& image)
{
    const DataDirectory dir = image.nt.data_directories[kExportDirectory];
    if (dir.rva == 0)
        return;
    const ByteView raw(image.raw);
    const std::uint32_t at = table_offset(image, dir.rva, "export directory");
    need(raw, at, kExportDirSize, "export directory");

    const std::uint32_t name_rva = load_u32(raw, at + 12);
    image.exports.ordinal_base = load_u32(raw, at + 16);
    const std::uint32_t function_count = load_u32(raw, at + 20);
    const std::uint32_t name_count = load_u32(raw, at + 24);
    const std::uint32_t functions_rva = load_u32(raw, at + 28);
    const std::uint32_t names_rva = load_u32(raw, at + 32);
    const std::uint32_t ordinals_rva = load_u32(raw, at + 36);
    if (name_rva != 0)
        image.exports.dll_name = read_cstring(image, name_rva);
    if (name_count == 0)
        return;

    const std::uint32_t functions = table_offset(image, functions_rva, "export address table");
    const std::uint32_t names = table_offset(image, names_rva, "export name table");
    const std::uint32_t ordinals = table_offset(image, ordinals_rva, "export ordinal table");
    need(raw, functions, std::uint64_t{function_count} * 4, "export address table");
    need(raw, names, std::uint64_t{name_count} * 4, "export name table");
    need(raw, ordinals, std::uint64_t{name_count} * 2, "export ordinal table");

    std::set<std::string> seen;
    image.exports.entries.reserve(name_count);
    for (std::uint32_t i = 0; i < name_count; ++i) {
        Export entry;
        entry.name = read_cstring(image, load_u32(raw, names + 4 * i));
        const std::uint16_t ordinal = load_u16(raw, ordinals + 2 * i);
        if (ordinal >= function_count)
            fail(PeErrc::not_pe, "export ordinal out of range for '" + entry.name + "'");
        entry.rva = load_u32(raw, functions + 4 * ordinal);
        if (entry.name.empty())
            fail(PeErrc::not_pe, "export with empty name");
        if (entry.rva >= image.nt.size_of_image)
            fail(PeErrc::not_pe, "export '" + entry.name + "' outside the image");
        if (!seen.insert(entry.name).second)
            fail(PeErrc::not_pe, "duplicate export name '" + entry.name + "'");
        image.exports.entries.push_back(std::move(entry));
    }
}

void parse_relocations(PeImage& image)
{
    const DataDirectory dir = image.nt.data_directories[kBaseRelocDirectory];
    if (dir.rva == 0)
        return;
    const ByteView raw(image.raw);
    std::uint32_t at = table_offset(image, dir.rva, "relocation directory");
    need(raw, at, dir.size, "relocation directory");

    std::uint32_t consumed = 0;
    while (consumed < dir.size) {
        if (dir.size - consumed < 8)
            fail(PeErrc::not_pe, "relocation block header cut short");
        RelocationBlock block;
        block.page_rva = load_u32(raw, at);
        const std::uint32_t block_size = load_u32(raw, at + 4);
        if (block_size < 8 || block_size % 2 != 0 || block_size > dir.size - consumed)
            fail(PeErrc::not_pe, "bad relocation block size " + hex32(block_size));
        if (block.page_rva % 0x1000 != 0)
            fail(PeErrc::not_pe, "relocation page " + hex32(block.page_rva) + " not page aligned");
        for (std::uint32_t e = 8; e < block_size; e += 2) {
            const std::uint16_t word = load_u16(raw, at + e);
            const Fixup fixup{static_cast<std::uint8_t>(word >> 12), static_cast<std::uint16_t>(word & 0x0FFF)};
            if (fixup.type != kRelAbsolute && fixup.type != kRelHighLow)
                fail(PeErrc::not_pe, "unsupported relocation type " + std::to_string(fixup.type));
            block.fixups.push_back(fixup);
        }
        image.relocations.push_back(std::move(block));
        at += block_size;
        consumed += block_size;
    }
}

void check_encodable_section_layout(const PeImage& image, std::size_t table_end)
{
    for (const Section& s : image.sections) {
        if (s.raw_size != 0 && s.raw_offset < table_end)
            fail(PeErrc::unencodable, "section " + s.name_string() + " raw data overlaps the section table");
    }
}

// Writes `blob` at the file location of `rva`; the whole blob must sit
// inside the raw data of one section.
void place(const PeImage& image, Bytes& out, std::uint32_t rva, const Bytes& blob, const char* what)
{
    const Section* section = image.section_for_rva(rva);
    if (section == nullptr)
        fail(PeErrc::unencodable, std::string(what) + " rva " + hex32(rva) + " is in no section");
    const std::uint64_t delta = rva - section->virtual_address;
    if (delta + blob.size() > section->raw_size)
        fail(PeErrc::unencodable, std::string(what) + " does not fit in section " + section->name_string());
    std::copy(blob.begin(), blob.end(), out.begin() + section->raw_offset + delta);
}

Bytes encode_exports(const ExportTable& table, std::uint32_t base_rva, ByteView existing_dir)
{
    const auto n = static_cast<std::uint32_t>(table.entries.size());
    const std::uint32_t functions_rva = base_rva + kExportDirSize;
    const std::uint32_t names_rva = functions_rva + 4 * n;
    const std::uint32_t ordinals_rva = names_rva + 4 * n;
    std::uint32_t strings_rva = ordinals_rva + 2 * n;

    Bytes out(strings_rva - base_rva, 0);
    if (existing_dir.size() >= 12)
        std::copy_n(existing_dir.begin(), 12, out.begin()); // characteristics, timestamp, version

    auto append_string = [&](const std::string& s) {
        const std::uint32_t rva = base_rva + static_cast<std::uint32_t>(out.size());
        out.insert(out.end(), s.begin(), s.end());
        out.push_back(0);
        return rva;
    };

    const std::uint32_t dll_name_rva = table.dll_name.empty() ? 0 : append_string(table.dll_name);
    store_u32(out, 12, dll_name_rva);
    store_u32(out, 16, table.ordinal_base);
    store_u32(out, 20, n);
    store_u32(out, 24, n);
    store_u32(out, 28, n ? functions_rva : 0);
    store_u32(out, 32, n ? names_rva : 0);
    store_u32(out, 36, n ? ordinals_rva : 0);
    for (std::uint32_t i = 0; i < n; ++i) {
        const Export& e = table.entries[i];
        if (e.name.empty())
            fail(PeErrc::unencodable, "export with empty name");
        if (i > 0xFFFF)
            fail(PeErrc::unencodable, "too many exports for 16-bit ordinals");
        const std::uint32_t name_rva = append_string(e.name);
        store_u32(out, functions_rva - base_rva + 4 * i, e.rva);
        store_u32(out, names_rva - base_rva + 4 * i, name_rva);
        store_u16(out, ordinals_rva - base_rva + 2 * i, static_cast<std::uint16_t>(i));
    }
    return out;
}

Bytes encode_relocations(std::span<const RelocationBlock> blocks)
{
    Bytes out;
    for (const RelocationBlock& block : blocks) {
        if (block.page_rva % 0x1000 != 0)
            fail(PeErrc::unencodable, "relocation page " + hex32(block.page_rva) + " not page aligned");
        const std::size_t at = out.size();
        out.resize(at + block.encoded_size());
        store_u32(out, at, block.page_rva);
        store_u32(out, at + 4, block.encoded_size());
        for (std::size_t i = 0; i < block.fixups.size(); ++i) {
            const Fixup f = block.fixups[i];
            if (f.type > 0xF || f.offset > 0xFFF)
                fail(PeErrc::unencodable, "relocation entry exceeds its 4/12-bit fields");
            store_u16(out, at + 8 + 2 * i, static_cast<std::uint16_t>((f.type << 12) | f.offset));
        }
    }
    return out;
}

} // namespace

std::string_view to_string(PeErrc code) noexcept
{
    switch (code) {
    case PeErrc::not_mz: return "NotMz";
    case PeErrc::not_pe: return "NotPe";
    case PeErrc::truncated: return "Truncated";
    case PeErrc::unencodable: return "Unencodable";
    case PeErrc::out_of_image: return "OutOfImage";
    case PeErrc::bad_shape: return "BadShape";
    case PeErrc::fixup_out_of_range: return "FixupOutOfRange";
    case PeErrc::no_export_table: return "NoExportTable";
    case PeErrc::name_not_found: return "NameNotFound";
    case PeErrc::not_found: return "NotFound";
    case PeErrc::ambiguous_hash: return "AmbiguousHash";
    case PeErrc::not_near_call: return "NotNearCall";
    }
    return "Unknown";
}

PeError::PeError(PeErrc code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code)
{
}

std::string Section::name_string() const
{
    const auto end = std::find(name.begin(), name.end(), '\0');
    return std::string(name.begin(), end);
}

Section make_section(std::string_view name, std::uint32_t virtual_address, std::uint32_t virtual_size,
                     std::uint32_t raw_offset, std::uint32_t raw_size, std::uint32_t characteristics)
{
    Section s;
    std::copy_n(name.begin(), std::min(name.size(), s.name.size()), s.name.begin());
    s.virtual_address = virtual_address;
    s.virtual_size = virtual_size;
    s.raw_offset = raw_offset;
    s.raw_size = raw_size;
    s.characteristics = characteristics;
    return s;
}

const Section* PeImage::section_for_rva(std::uint32_t rva) const noexcept
{
    for (const Section& s : sections) {
        if (rva >= s.virtual_address && std::uint64_t{rva} < std::uint64_t{s.virtual_address} + s.mapped_size())
            return &s;
    }
    return nullptr;
}

bool same_structure(const PeImage& a, const PeImage& b)
{
    return a.dos == b.dos && a.nt == b.nt && a.sections == b.sections && a.exports == b.exports &&
           a.relocations == b.relocations;
}

bool signature_matches(std::uint32_t signature) noexcept
{
    return (signature ^ kSignatureXorKey) == kObfuscatedSignature;
}

std::uint16_t load_u16(ByteView bytes, std::size_t offset)
{
    return static_cast<std::uint16_t>(bytes[offset] | (bytes[offset + 1] << 8));
}

std::uint32_t load_u32(ByteView bytes, std::size_t offset)
{
    return static_cast<std::uint32_t>(bytes[offset]) | (static_cast<std::uint32_t>(bytes[offset + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes[offset + 2]) << 16) |
           (static_cast<std::uint32_t>(bytes[offset + 3]) << 24);
}

void store_u16(std::span<std::uint8_t> bytes, std::size_t offset, std::uint16_t value)
{
    bytes[offset] = static_cast<std::uint8_t>(value);
    bytes[offset + 1] = static_cast<std::uint8_t>(value >> 8);
}

void store_u32(std::span<std::uint8_t> bytes, std::size_t offset, std::uint32_t value)
{
    for (int i = 0; i < 4; ++i)
        bytes[offset + i] = static_cast<std::uint8_t>(value >> (8 * i));
}

std::uint32_t read_entry_point_rva(ByteView headers)
{
    if (headers.size() < 2 || load_u16(headers, 0) != kDosMagic)
        fail(PeErrc::not_mz, "missing 'MZ' at offset 0");
    need(headers, 0, kDosHeaderSize, "DOS header");
    const std::uint32_t lfanew = load_u32(headers, kLfanewOffset);
    need(headers, lfanew, kFileHeaderSize + kOptEntryPoint + 4, "NT headers");
    if (!signature_matches(load_u32(headers, lfanew)))
        fail(PeErrc::not_pe, "NT signature check failed");
    return load_u32(headers, lfanew + kFileHeaderSize + kOptEntryPoint);
}

PeImage parse_pe(ByteView buffer)
{
    if (buffer.size() < 2 || load_u16(buffer, 0) != kDosMagic)
        fail(PeErrc::not_mz, "missing 'MZ' at offset 0");
    need(buffer, 0, kDosHeaderSize, "DOS header");

    PeImage image;
    image.raw.assign(buffer.begin(), buffer.end());
    image.dos.e_magic = kDosMagic;
    image.dos.e_lfanew = load_u32(buffer, kLfanewOffset);
    const std::uint32_t nt = image.dos.e_lfanew;
    if (nt < kDosHeaderSize)
        fail(PeErrc::not_pe, "e_lfanew " + hex32(nt) + " points into the DOS header");
    need(buffer, nt, 4, "NT signature");

    image.nt.signature = load_u32(buffer, nt);
    if (!signature_matches(image.nt.signature))
        fail(PeErrc::not_pe, "NT signature check failed (" + hex32(image.nt.signature) + ")");

    need(buffer, nt, kFileHeaderSize, "file header");
    image.nt.machine = load_u16(buffer, nt + 4);
    image.nt.number_of_sections = load_u16(buffer, nt + 6);
    image.nt.size_of_optional_header = load_u16(buffer, nt + 20);
    image.nt.characteristics = load_u16(buffer, nt + 22);
    if (image.nt.machine != kMachineI386)
        fail(PeErrc::not_pe, "machine is not i386");
    if (image.nt.number_of_sections == 0)
        fail(PeErrc::not_pe, "image has no sections");

    const std::size_t opt = nt + kFileHeaderSize;
    need(buffer, opt, image.nt.size_of_optional_header, "optional header");
    if (image.nt.size_of_optional_header < kOptDataDirectories)
        fail(PeErrc::not_pe, "optional header too small for PE32");
    image.nt.optional_magic = load_u16(buffer, opt);
    if (image.nt.optional_magic != kPe32Magic)
        fail(PeErrc::not_pe, "optional header magic is not PE32");
    image.nt.entry_point_rva = load_u32(buffer, opt + kOptEntryPoint);
    image.nt.image_base = load_u32(buffer, opt + kOptImageBase);
    image.nt.section_alignment = load_u32(buffer, opt + kOptSectionAlignment);
    image.nt.file_alignment = load_u32(buffer, opt + kOptFileAlignment);
    image.nt.size_of_image = load_u32(buffer, opt + kOptSizeOfImage);
    image.nt.size_of_headers = load_u32(buffer, opt + kOptSizeOfHeaders);
    image.nt.subsystem = load_u16(buffer, opt + kOptSubsystem);
    image.nt.number_of_rva_and_sizes = load_u32(buffer, opt + kOptNumberOfRvaAndSizes);
    if (image.nt.number_of_rva_and_sizes > kDataDirectoryCount ||
        kOptDataDirectories + 8 * image.nt.number_of_rva_and_sizes > image.nt.size_of_optional_header)
        fail(PeErrc::not_pe, "data directory count does not fit the optional header");
    for (std::uint32_t i = 0; i < image.nt.number_of_rva_and_sizes; ++i) {
        image.nt.data_directories[i].rva = load_u32(buffer, opt + kOptDataDirectories + 8 * i);
        image.nt.data_directories[i].size = load_u32(buffer, opt + kOptDataDirectories + 8 * i + 4);
    }
    if (image.nt.entry_point_rva >= image.nt.size_of_image)
        fail(PeErrc::not_pe, "entry point outside the image");

    const std::size_t table = opt + image.nt.size_of_optional_header;
    need(buffer, table, std::size_t{image.nt.number_of_sections} * kSectionHeaderSize, "section table");
    for (std::uint16_t i = 0; i < image.nt.number_of_sections; ++i) {
        const std::size_t at = table + i * kSectionHeaderSize;
        Section s;
        std::memcpy(s.name.data(), buffer.data() + at, s.name.size());
        s.virtual_size = load_u32(buffer, at + 8);
        s.virtual_address = load_u32(buffer, at + 12);
        s.raw_size = load_u32(buffer, at + 16);
        s.raw_offset = load_u32(buffer, at + 20);
        s.characteristics = load_u32(buffer, at + 36);
        need(buffer, s.raw_offset, s.raw_size, "section raw data");
        for (const Section& other : image.sections) {
            const std::uint64_t a0 = s.virtual_address, a1 = a0 + s.mapped_size();
            const std::uint64_t b0 = other.virtual_address, b1 = b0 + other.mapped_size();
            if (a0 < b1 && b0 < a1)
                fail(PeErrc::not_pe, "sections " + other.name_string() + " and " + s.name_string() + " overlap");
        }
        image.sections.push_back(s);
    }

    parse_exports(image);
    parse_relocations(image);
    return image;
}

Bytes emit_pe(const PeImage& image)
{
    const NtHeaders& nt = image.nt;
    if (image.sections.empty())
        fail(PeErrc::unencodable, "image has no sections");
    if (image.sections.size() > std::numeric_limits<std::uint16_t>::max())
        fail(PeErrc::unencodable, "section count exceeds 16 bits");
    if (nt.number_of_sections != image.sections.size())
        fail(PeErrc::unencodable, "number_of_sections disagrees with the section list");
    if (nt.machine != kMachineI386 || nt.optional_magic != kPe32Magic)
        fail(PeErrc::unencodable, "only PE32 i386 images are supported");
    if (image.dos.e_magic != kDosMagic || nt.signature != kNtSignature)
        fail(PeErrc::unencodable, "header magic values must be the standard constants");
    if (image.dos.e_lfanew < kDosHeaderSize)
        fail(PeErrc::unencodable, "e_lfanew points into the DOS header");
    if (nt.number_of_rva_and_sizes > kDataDirectoryCount ||
        kOptDataDirectories + 8 * nt.number_of_rva_and_sizes > nt.size_of_optional_header)
        fail(PeErrc::unencodable, "data directories do not fit the optional header");

    const std::size_t opt = std::size_t{image.dos.e_lfanew} + kFileHeaderSize;
    const std::size_t table = opt + nt.size_of_optional_header;
    const std::size_t table_end = table + image.sections.size() * kSectionHeaderSize;
    check_encodable_section_layout(image, table_end);

    std::size_t total = std::max(image.raw.size(), table_end);
    for (const Section& s : image.sections)
        total = std::max<std::size_t>(total, std::size_t{s.raw_offset} + s.raw_size);

    Bytes out(image.raw);
    out.resize(total, 0);

    store_u16(out, 0, image.dos.e_magic);
    store_u32(out, kLfanewOffset, image.dos.e_lfanew);
    const std::size_t at = image.dos.e_lfanew;
    store_u32(out, at, nt.signature);
    store_u16(out, at + 4, nt.machine);
    store_u16(out, at + 6, nt.number_of_sections);
    store_u16(out, at + 20, nt.size_of_optional_header);
    store_u16(out, at + 22, nt.characteristics);
    store_u16(out, opt, nt.optional_magic);
    store_u32(out, opt + kOptEntryPoint, nt.entry_point_rva);
    store_u32(out, opt + kOptImageBase, nt.image_base);
    store_u32(out, opt + kOptSectionAlignment, nt.section_alignment);
    store_u32(out, opt + kOptFileAlignment, nt.file_alignment);
    store_u32(out, opt + kOptSizeOfImage, nt.size_of_image);
    store_u32(out, opt + kOptSizeOfHeaders, nt.size_of_headers);
    store_u16(out, opt + kOptSubsystem, nt.subsystem);
    store_u32(out, opt + kOptNumberOfRvaAndSizes, nt.number_of_rva_and_sizes);
    for (std::uint32_t i = 0; i < nt.number_of_rva_and_sizes; ++i) {
        store_u32(out, opt + kOptDataDirectories + 8 * i, nt.data_directories[i].rva);
        store_u32(out, opt + kOptDataDirectories + 8 * i + 4, nt.data_directories[i].size);
    }

    for (std::size_t i = 0; i < image.sections.size(); ++i) {
        const Section& s = image.sections[i];
        const std::size_t sh = table + i * kSectionHeaderSize;
        std::memcpy(out.data() + sh, s.name.data(), s.name.size());
        store_u32(out, sh + 8, s.virtual_size);
        store_u32(out, sh + 12, s.virtual_address);
        store_u32(out, sh + 16, s.raw_size);
        store_u32(out, sh + 20, s.raw_offset);
        store_u32(out, sh + 36, s.characteristics);
    }

    const DataDirectory exports = nt.data_directories[kExportDirectory];
    if (exports.rva != 0) {
        ByteView existing;
        if (const Section* s = image.section_for_rva(exports.rva)) {
            const std::size_t off = s->raw_offset + (exports.rva - s->virtual_address);
            if (off + kExportDirSize <= image.raw.size())
                existing = ByteView(image.raw).subspan(off, kExportDirSize);
        }
        const Bytes blob = encode_exports(image.exports, exports.rva, existing);
        if (blob.size() > exports.size)
            fail(PeErrc::unencodable, "export table larger than its data directory");
        place(image, out, exports.rva, blob, "export table");
    } else if (!image.exports.entries.empty()) {
        fail(PeErrc::unencodable, "exports present but export directory is empty");
    }

    const DataDirectory relocs = nt.data_directories[kBaseRelocDirectory];
    if (relocs.rva != 0) {
        const Bytes blob = encode_relocations(image.relocations);
        if (blob.size() != relocs.size)
            fail(PeErrc::unencodable, "relocation blocks disagree with the data directory size");
        place(image, out, relocs.rva, blob, "relocation table");
    } else if (!image.relocations.empty()) {
        fail(PeErrc::unencodable, "relocations present but relocation directory is empty");
    }
    return out;
}

std::uint32_t rva_to_offset(const PeImage& image, std::uint32_t rva)
{
    if (rva >= image.nt.size_of_image)
        fail(PeErrc::out_of_image, "rva " + hex32(rva) + " beyond size_of_image");
    if (const Section* s = image.section_for_rva(rva)) {
        const std::uint32_t delta = rva - s->virtual_address;
        if (delta >= s->raw_size)
            fail(PeErrc::out_of_image, "rva " + hex32(rva) + " is in uninitialised section data");
        return s->raw_offset + delta;
    }
    std::uint32_t first = std::numeric_limits<std::uint32_t>::max();
    for (const Section& s : image.sections)
        first = std::min(first, s.virtual_address);
    if (rva < first)
        return rva;
    fail(PeErrc::out_of_image, "rva " + hex32(rva) + " is in no section");
}

HeaderConstantOffsets header_constant_offsets(ByteView image_bytes)
{
    if (image_bytes.size() < kDosHeaderSize)
        fail(PeErrc::bad_shape, "buffer shorter than a DOS header");
    const std::uint32_t lfanew = load_u32(image_bytes, kLfanewOffset);
    if (lfanew < kDosHeaderSize || std::uint64_t{lfanew} + kFileHeaderSize + 2 > image_bytes.size())
        fail(PeErrc::bad_shape, "e_lfanew " + hex32(lfanew) + " out of range");
    return {0, lfanew, lfanew + std::size_t{4}, lfanew + kFileHeaderSize};
}

Bytes strip_headers(ByteView image_bytes)
{
    (void)parse_pe(image_bytes);
    Bytes out(image_bytes.begin(), image_bytes.end());
    const HeaderConstantOffsets at = header_constant_offsets(out);
    store_u16(out, at.mz, 0);
    store_u32(out, at.signature, 0);
    store_u16(out, at.machine, 0);
    store_u16(out, at.optional_magic, 0);
    return out;
}

void restore_headers_in_place(std::span<std::uint8_t> bytes)
{
    const HeaderConstantOffsets at = header_constant_offsets(bytes);
    store_u16(bytes, at.mz, kDosMagic);
    store_u32(bytes, at.signature, kNtSignature);
    store_u16(bytes, at.machine, kMachineI386);
    store_u16(bytes, at.optional_magic, kPe32Magic);
}

Bytes restore_headers(ByteView stripped_bytes)
{
    Bytes out(stripped_bytes.begin(), stripped_bytes.end());
    restore_headers_in_place(out);
    return out;
}

void apply_relocations(std::span<std::uint8_t> image, std::uint32_t mapped_base, std::uint32_t preferred_base,
                       std::span<const RelocationBlock> blocks)
{
    for (const RelocationBlock& block : blocks) {
        for (const Fixup& f : block.fixups) {
            if (f.type == kRelAbsolute)
                continue;
            if (f.type != kRelHighLow)
                fail(PeErrc::bad_shape, "unsupported relocation type " + std::to_string(f.type));
            const std::uint64_t target = std::uint64_t{block.page_rva} + f.offset;
            if (target + 4 > image.size())
                fail(PeErrc::fixup_out_of_range, "fixup at rva " + hex32(static_cast<std::uint32_t>(target)) +
                                                     " outside the mapped image");
        }
    }
    const std::uint32_t delta = mapped_base - preferred_base;
    if (delta == 0)
        return;
    for (const RelocationBlock& block : blocks) {
        for (const Fixup& f : block.fixups) {
            if (f.type != kRelHighLow)
                continue;
            const std::size_t at = std::size_t{block.page_rva} + f.offset;
            store_u32(image, at, load_u32(image, at) + delta);
        }
    }
}

std::uint32_t find_export_by_name(const PeImage& image, std::string_view name)
{
    if (image.nt.data_directories[kExportDirectory].rva == 0)
        fail(PeErrc::no_export_table, "image has no export directory");
    for (const Export& e : image.exports.entries) {
        if (e.name == name)
            return image.nt.image_base + e.rva;
    }
    fail(PeErrc::name_not_found, "no export named '" + std::string(name) + "'");
}

ResolvedExport find_export_by_hash(const PeImage& image, std::uint32_t hash)
{
    if (image.nt.data_directories[kExportDirectory].rva == 0)
        fail(PeErrc::no_export_table, "image has no export directory");
    const Export* match = nullptr;
    for (const Export& e : image.exports.entries) {
        if (ror13_hash(e.name) != hash)
            continue;
        if (match != nullptr)
            fail(PeErrc::ambiguous_hash, "'" + match->name + "' and '" + e.name + "' share hash " + hex32(hash));
        match = &e;
    }
    if (match == nullptr)
        fail(PeErrc::not_found, "no export hashes to " + hex32(hash));
    return {match->name, image.nt.image_base + match->rva};
}

std::uint32_t resolve_near_call(std::uint32_t call_site, ByteView bytes)
{
    if (bytes.size() < kNearCallLength || bytes[0] != kNearCallOpcode)
        fail(PeErrc::not_near_call, "bytes at " + hex32(call_site) + " are not an E8 rel32 call");
    // rel32 is signed; unsigned wraparound performs the sign extension.
    return call_site + static_cast<std::uint32_t>(kNearCallLength) + load_u32(bytes, 1);
}

std::array<std::uint8_t, kNearCallLength> encode_near_call(std::uint32_t call_site, std::uint32_t target) noexcept
{
    std::array<std::uint8_t, kNearCallLength> out{kNearCallOpcode};
    const std::uint32_t rel = target - (call_site + static_cast<std::uint32_t>(kNearCallLength));
    store_u32(out, 1, rel);
    return out;
}

std::uint32_t ror13_hash(ByteView data) noexcept
{
    std::uint32_t h = 0;
    for (const std::uint8_t b : data)
        h = std::rotr(h, 13) + b;
    return h;
}

std::uint32_t ror13_hash(std::string_view text) noexcept
{
    return ror13_hash(ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

} // namespace duqusim::pe
