#include "duqusim/pe_builder.hpp"

#include <algorithm>
#include <map>

namespace duqusim::pe {

namespace {

constexpr std::uint32_t kLfanew = 0x80;

std::uint32_t export_blob_size(const ImageSpec& spec)
{
    std::uint32_t size = 40 + 10 * static_cast<std::uint32_t>(spec.exports.size());
    if (!spec.dll_name.empty())
        size += static_cast<std::uint32_t>(spec.dll_name.size()) + 1;
    for (const Export& e : spec.exports)
        size += static_cast<std::uint32_t>(e.name.size()) + 1;
    return size;
}

std::uint32_t relocation_blob_size(const std::vector<RelocationBlock>& blocks)
{
    std::uint32_t size = 0;
    for (const RelocationBlock& b : blocks)
        size += b.encoded_size();
    return size;
}

} // namespace

std::vector<RelocationBlock> make_relocation_blocks(std::vector<std::uint32_t> rvas)
{
    std::sort(rvas.begin(), rvas.end());
    rvas.erase(std::unique(rvas.begin(), rvas.end()), rvas.end());
    std::map<std::uint32_t, RelocationBlock> pages;
    for (const std::uint32_t rva : rvas) {
        RelocationBlock& block = pages[rva & ~0xFFFu];
        block.page_rva = rva & ~0xFFFu;
        block.fixups.push_back({kRelHighLow, static_cast<std::uint16_t>(rva & 0xFFF)});
    }
    std::vector<RelocationBlock> out;
    for (auto& [page, block] : pages) {
        if (block.fixups.size() % 2 != 0)
            block.fixups.push_back({kRelAbsolute, 0});
        out.push_back(std::move(block));
    }
    return out;
}

PeImage build_pe_image(const ImageSpec& spec)
{
    std::vector<SectionSpec> sections = spec.sections;
    std::vector<Export> exports = spec.exports;
    std::sort(exports.begin(), exports.end(), [](const Export& a, const Export& b) { return a.name < b.name; });
    const std::vector<RelocationBlock> relocations = make_relocation_blocks(spec.relocation_rvas);

    const bool has_exports = !exports.empty() || !spec.dll_name.empty();
    if (has_exports)
        sections.push_back({".edata", kReadOnlySection, Bytes(export_blob_size(spec), 0), 0, 0});
    if (!relocations.empty())
        sections.push_back({".reloc", kReadOnlySection | kScnMemDiscardable,
                            Bytes(relocation_blob_size(relocations), 0), 0, 0});

    const std::uint32_t file_alignment = spec.flat ? spec.section_alignment : spec.file_alignment;
    const std::uint32_t header_end = kLfanew + static_cast<std::uint32_t>(kFileHeaderSize + kOptionalHeaderSize +
                                                                          sections.size() * kSectionHeaderSize);

    PeImage image;
    image.dos.e_lfanew = kLfanew;
    NtHeaders& nt = image.nt;
    nt.number_of_sections = static_cast<std::uint16_t>(sections.size());
    nt.characteristics = static_cast<std::uint16_t>(0x0102 | (spec.dll ? 0x2000 : 0) | (relocations.empty() ? 1 : 0));
    nt.entry_point_rva = spec.entry_point_rva;
    nt.image_base = spec.image_base;
    nt.section_alignment = spec.section_alignment;
    nt.file_alignment = file_alignment;
    nt.size_of_headers = align_up(header_end, file_alignment);

    std::uint32_t next_rva = align_up(nt.size_of_headers, spec.section_alignment);
    std::uint32_t next_raw = nt.size_of_headers;
    for (const SectionSpec& ss : sections) {
        const std::uint32_t rva = ss.rva != 0 ? ss.rva : next_rva;
        if (rva < next_rva)
            throw PeError(PeErrc::unencodable, "section " + ss.name + " placed below the previous section");
        const auto data_size = static_cast<std::uint32_t>(ss.data.size());
        const std::uint32_t vsize = std::max(ss.virtual_size, data_size);
        const std::uint32_t raw_offset = spec.flat ? rva : next_raw;
        const std::uint32_t raw_size =
            spec.flat ? align_up(vsize, spec.section_alignment) : align_up(data_size, file_alignment);
        image.sections.push_back(make_section(ss.name, rva, vsize, raw_offset, raw_size, ss.characteristics));
        next_rva = align_up(rva + vsize, spec.section_alignment);
        next_raw = raw_offset + raw_size;
    }
    nt.size_of_image = next_rva;

    image.raw.assign(next_raw, 0);
    for (std::size_t i = 0; i < spec.sections.size(); ++i)
        std::copy(sections[i].data.begin(), sections[i].data.end(), image.raw.begin() + image.sections[i].raw_offset);

    std::size_t next = spec.sections.size();
    if (has_exports) {
        const Section& s = image.sections[next++];
        nt.data_directories[kExportDirectory] = {s.virtual_address, s.virtual_size};
        image.exports.dll_name = spec.dll_name;
        image.exports.entries = std::move(exports);
    }
    if (!relocations.empty()) {
        const Section& s = image.sections[next++];
        nt.data_directories[kBaseRelocDirectory] = {s.virtual_address, s.virtual_size};
        image.relocations = relocations;
    }

    image.raw = emit_pe(image);
    return image;
}

Bytes build_image(const ImageSpec& spec)
{
    return build_pe_image(spec).raw;
}

} // namespace duqusim::pe
