// PE32 (i386) reader/writer and the byte-level primitives the injection
// pipeline is built from: header strip/restore, HIGHLOW relocation, export
// lookup by name or by hashed name, and near-call displacement arithmetic.
//
// Only the subset touched by the simulator is modelled: machine 0x014C,
// optional-header magic 0x010B, the export (0) and base relocation (5)
// data directories, and relocation types ABSOLUTE (0) and HIGHLOW (3).

#ifndef DUQUSIM_PE_FORMAT_HPP
#define DUQUSIM_PE_FORMAT_HPP

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace duqusim::pe {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline constexpr std::uint16_t kDosMagic = 0x5A4D;        // 'MZ'
inline constexpr std::uint32_t kNtSignature = 0x00004550; // 'PE\0\0'
inline constexpr std::uint16_t kMachineI386 = 0x014C;
inline constexpr std::uint16_t kPe32Magic = 0x010B;

// The driver never compares against 'PE\0\0' in clear: both sides of the
// test are XORed with this key, so only the key and the masked constant
// appear in its code.
inline constexpr std::uint32_t kSignatureXorKey = 0xF750F284;
inline constexpr std::uint32_t kObfuscatedSignature = 0xF750B7D4;
static_assert((kSignatureXorKey ^ kObfuscatedSignature) == kNtSignature);

inline constexpr std::uint32_t kLfanewOffset = 0x3C;
inline constexpr std::size_t kDosHeaderSize = 0x40;
inline constexpr std::size_t kFileHeaderSize = 0x18; // signature + COFF header
inline constexpr std::size_t kOptionalHeaderSize = 0xE0;
inline constexpr std::size_t kSectionHeaderSize = 0x28;
inline constexpr std::size_t kDataDirectoryCount = 16;
inline constexpr std::size_t kExportDirectory = 0;
inline constexpr std::size_t kBaseRelocDirectory = 5;

// Section characteristics.
inline constexpr std::uint32_t kScnCntCode = 0x00000020;
inline constexpr std::uint32_t kScnCntInitializedData = 0x00000040;
inline constexpr std::uint32_t kScnMemDiscardable = 0x02000000;
inline constexpr std::uint32_t kScnMemExecute = 0x20000000;
inline constexpr std::uint32_t kScnMemRead = 0x40000000;
inline constexpr std::uint32_t kScnMemWrite = 0x80000000;

inline constexpr std::uint8_t kRelAbsolute = 0;
inline constexpr std::uint8_t kRelHighLow = 3;

enum class PeErrc {
    not_mz,
    not_pe,
    truncated,
    unencodable,
    out_of_image,
    bad_shape,
    fixup_out_of_range,
    no_export_table,
    name_not_found,
    not_found,
    ambiguous_hash,
    not_near_call,
};

std::string_view to_string(PeErrc code) noexcept;

class PeError : public std::runtime_error {
public:
    PeError(PeErrc code, const std::string& detail);
    [[nodiscard]] PeErrc code() const noexcept { return code_; }

private:
    PeErrc code_;
};

struct DosHeader {
    std::uint16_t e_magic = kDosMagic;
    std::uint32_t e_lfanew = 0x80;

    friend bool operator==(const DosHeader&, const DosHeader&) = default;
};

struct DataDirectory {
    std::uint32_t rva = 0;
    std::uint32_t size = 0;

    friend bool operator==(const DataDirectory&, const DataDirectory&) = default;
};

struct NtHeaders {
    std::uint32_t signature = kNtSignature;
    std::uint16_t machine = kMachineI386;
    std::uint16_t number_of_sections = 0;
    std::uint16_t size_of_optional_header = kOptionalHeaderSize;
    std::uint16_t characteristics = 0x0102; // EXECUTABLE_IMAGE | 32BIT_MACHINE
    std::uint16_t optional_magic = kPe32Magic;
    std::uint32_t entry_point_rva = 0;
    std::uint32_t image_base = 0x00400000;
    std::uint32_t section_alignment = 0x1000;
    std::uint32_t file_alignment = 0x200;
    std::uint32_t size_of_image = 0;
    std::uint32_t size_of_headers = 0;
    std::uint16_t subsystem = 2;
    std::uint32_t number_of_rva_and_sizes = kDataDirectoryCount;
    std::array<DataDirectory, kDataDirectoryCount> data_directories{};

    friend bool operator==(const NtHeaders&, const NtHeaders&) = default;
};

struct Section {
    std::array<char, 8> name{};
    std::uint32_t virtual_address = 0;
    std::uint32_t virtual_size = 0;
    std::uint32_t raw_offset = 0;
    std::uint32_t raw_size = 0;
    std::uint32_t characteristics = 0;

    [[nodiscard]] std::string name_string() const;
    [[nodiscard]] std::uint32_t mapped_size() const noexcept
    {
        return virtual_size != 0 ? virtual_size : raw_size;
    }
    [[nodiscard]] bool is_code() const noexcept
    {
        return (characteristics & (kScnCntCode | kScnMemExecute)) != 0;
    }

    friend bool operator==(const Section&, const Section&) = default;
};

Section make_section(std::string_view name, std::uint32_t virtual_address, std::uint32_t virtual_size,
                     std::uint32_t raw_offset, std::uint32_t raw_size, std::uint32_t characteristics);

struct Export {
    std::string name;
    std::uint32_t rva = 0;

    friend bool operator==(const Export&, const Export&) = default;
};

struct ExportTable {
    std::string dll_name;
    std::uint32_t ordinal_base = 1;
    std::vector<Export> entries;

    friend bool operator==(const ExportTable&, const ExportTable&) = default;
};

struct Fixup {
    std::uint8_t type = kRelHighLow; // 4 bits
    std::uint16_t offset = 0;        // 12 bits

    friend bool operator==(const Fixup&, const Fixup&) = default;
};

struct RelocationBlock {
    std::uint32_t page_rva = 0;
    std::vector<Fixup> fixups;

    [[nodiscard]] std::uint32_t encoded_size() const noexcept
    {
        return 8 + static_cast<std::uint32_t>(fixups.size()) * 2;
    }

    friend bool operator==(const RelocationBlock&, const RelocationBlock&) = default;
};

// Parsed PE32 file. `raw` holds the full file; fields not modelled above
// (timestamps, linker versions, ...) live only there and survive emit_pe.
struct PeImage {
    DosHeader dos;
    NtHeaders nt;
    std::vector<Section> sections;
    ExportTable exports;
    std::vector<RelocationBlock> relocations;
    Bytes raw;

    [[nodiscard]] std::uint32_t entry_point() const noexcept { return nt.image_base + nt.entry_point_rva; }
    [[nodiscard]] const Section* section_for_rva(std::uint32_t rva) const noexcept;
};

// Structural equality: everything but the raw byte buffer.
bool same_structure(const PeImage& a, const PeImage& b);

[[nodiscard]] bool signature_matches(std::uint32_t signature) noexcept;

PeImage parse_pe(ByteView buffer);
Bytes emit_pe(const PeImage& image);

std::uint32_t rva_to_offset(const PeImage& image, std::uint32_t rva);

// Validates the DOS and NT signatures (obfuscated compare) of a header
// page and returns the entry point RVA. Works on mapped images, where
// section data is not at its file offset.
std::uint32_t read_entry_point_rva(ByteView headers);

// Byte positions of the four constants stripped from injected images.
struct HeaderConstantOffsets {
    std::size_t mz;
    std::size_t signature;
    std::size_t machine;
    std::size_t optional_magic;
};
HeaderConstantOffsets header_constant_offsets(ByteView image_bytes);

Bytes strip_headers(ByteView image_bytes);
Bytes restore_headers(ByteView stripped_bytes);
void restore_headers_in_place(std::span<std::uint8_t> bytes);

// Adds (mapped_base - preferred_base) to every HIGHLOW fixup target in
// `image`, which is indexed by RVA. Fails without touching anything if
// any target falls outside the buffer.
void apply_relocations(std::span<std::uint8_t> image, std::uint32_t mapped_base, std::uint32_t preferred_base,
                       std::span<const RelocationBlock> blocks);

std::uint32_t find_export_by_name(const PeImage& image, std::string_view name);

struct ResolvedExport {
    std::string name;
    std::uint32_t address = 0;
};
ResolvedExport find_export_by_hash(const PeImage& image, std::uint32_t hash);

inline constexpr std::uint8_t kNearCallOpcode = 0xE8;
inline constexpr std::size_t kNearCallLength = 5;

std::uint32_t resolve_near_call(std::uint32_t call_site, ByteView bytes);
std::array<std::uint8_t, kNearCallLength> encode_near_call(std::uint32_t call_site, std::uint32_t target) noexcept;

// h = ror32(h, 13) + byte, starting from zero.
std::uint32_t ror13_hash(ByteView data) noexcept;
std::uint32_t ror13_hash(std::string_view text) noexcept;

// Little-endian helpers shared by the simulator and the fixture builder.
std::uint16_t load_u16(ByteView bytes, std::size_t offset);
std::uint32_t load_u32(ByteView bytes, std::size_t offset);
void store_u16(std::span<std::uint8_t> bytes, std::size_t offset, std::uint16_t value);
void store_u32(std::span<std::uint8_t> bytes, std::size_t offset, std::uint32_t value);

} // namespace duqusim::pe

#endif // DUQUSIM_PE_FORMAT_HPP
