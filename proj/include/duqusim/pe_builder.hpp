#ifndef DUQUSIM_PE_BUILDER_HPP
#define DUQUSIM_PE_BUILDER_HPP

#include "duqusim/pe_format.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace duqusim::pe {

struct SectionSpec {
    std::string name;
    std::uint32_t characteristics = 0;
    Bytes data;
    std::uint32_t virtual_size = 0; // 0: data.size()
    std::uint32_t rva = 0;          // 0: next aligned address
};

// Input to the fixture builder. Layout: 64-byte DOS header with
// e_lfanew = 0x80, NT headers, section table, then section data at
// file_alignment. Non-empty exports get an ".edata" section and
// relocation targets a ".reloc" section, appended in that order.
struct ImageSpec {
    std::uint32_t image_base = 0x00400000;
    std::uint32_t entry_point_rva = 0;
    bool dll = false;
    std::uint32_t file_alignment = 0x200;
    std::uint32_t section_alignment = 0x1000;
    // Raw offsets equal RVAs, so the file can be copied into memory as is.
    bool flat = false;
    std::vector<SectionSpec> sections;
    std::string dll_name;
    std::vector<Export> exports;
    std::vector<std::uint32_t> relocation_rvas; // HIGHLOW fixup targets
};

inline constexpr std::uint32_t kCodeSection = kScnCntCode | kScnMemExecute | kScnMemRead;
inline constexpr std::uint32_t kDataSection = kScnCntInitializedData | kScnMemRead | kScnMemWrite;
inline constexpr std::uint32_t kReadOnlySection = kScnCntInitializedData | kScnMemRead;

PeImage build_pe_image(const ImageSpec& spec);
Bytes build_image(const ImageSpec& spec);

// Groups fixup targets into sorted per-page blocks, padding odd blocks
// with an ABSOLUTE entry so each block stays 4-byte aligned.
std::vector<RelocationBlock> make_relocation_blocks(std::vector<std::uint32_t> rvas);

constexpr std::uint32_t align_up(std::uint32_t value, std::uint32_t alignment) noexcept
{
    return alignment == 0 ? value : (value + alignment - 1) / alignment * alignment;
}

} // namespace duqusim::pe

#endif // DUQUSIM_PE_BUILDER_HPP
