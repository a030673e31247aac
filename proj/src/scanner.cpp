#include "duqusim/scanner.hpp"

#include "duqusim/duqu_replica.hpp"
#include "duqusim/simkernel.hpp"

#include <algorithm>

namespace duqusim::scan {

namespace {

constexpr std::uint32_t kPeSignature = 0x00004550;

bool is_hook(pe::ByteView bytes)
{
    return bytes.size() >= 7 && bytes[0] == 0xB8 && bytes[5] == 0xFF && bytes[6] == 0xD0;
}

void scan_entry(const pe::PeImage& image, ScanReport& report)
{
    std::uint32_t offset = 0;
    try {
        offset = pe::rva_to_offset(image, image.nt.entry_point_rva);
    } catch (const pe::PeError&) {
        return;
    }
    const pe::ByteView raw(image.raw);
    if (offset >= raw.size())
        return;
    const pe::ByteView entry = raw.subspan(offset, std::min<std::size_t>(7, raw.size() - offset));
    if (!is_hook(entry))
        return;
    report.findings.push_back({FindingKind::entry_hook, image.entry_point(),
                               "mov eax, " + sim::hex8(pe::load_u32(entry, 1)) + "; call eax"});
}

void scan_pattern(const pe::PeImage& image, const std::string& anchor, ScanReport& report)
{
    try {
        const duqu::LocatedFunction f = duqu::locate_unexported(image, anchor);
        report.findings.push_back({FindingKind::zwprotect_pattern, f.call_site,
                                   "call " + sim::hex8(f.target) + " after call " + anchor + " at " +
                                       sim::hex8(f.anchor) + " and push 104h at " + sim::hex8(f.push_site)});
    } catch (const duqu::DuquError&) {
    }
}

// Two dwords close together in code whose XOR is "PE\0\0", neither of
// them being the signature itself.
void scan_split_constants(const pe::PeImage& image, std::uint32_t window, ScanReport& report)
{
    for (const pe::Section& s : image.sections) {
        if (!s.is_code())
            continue;
        const std::size_t n = std::min<std::size_t>(s.raw_size, s.mapped_size());
        const pe::ByteView code = pe::ByteView(image.raw).subspan(s.raw_offset, n);
        for (std::size_t i = 0; i + 4 <= n; ++i) {
            const std::uint32_t k = pe::load_u32(code, i);
            if (k == 0 || k == kPeSignature)
                continue;
            for (std::size_t j = i + 4; j + 4 <= n && j <= i + window; ++j) {
                const std::uint32_t c = pe::load_u32(code, j);
                if ((k ^ c) != kPeSignature || c == 0 || c == kPeSignature)
                    continue;
                report.findings.push_back({FindingKind::obfuscated_pe_const,
                                           image.nt.image_base + s.virtual_address + static_cast<std::uint32_t>(i),
                                           sim::hex8(k) + " ^ " + sim::hex8(c) + " == 'PE\\0\\0'"});
                break;
            }
        }
    }
}

} // namespace

std::string_view to_string(FindingKind kind) noexcept
{
    switch (kind) {
    case FindingKind::entry_hook: return "ENTRY_HOOK";
    case FindingKind::zwprotect_pattern: return "ZWPROTECT_PATTERN";
    case FindingKind::obfuscated_pe_const: return "OBFUSCATED_PE_CONST";
    }
    return "UNKNOWN";
}

ScanReport scan_pe(pe::ByteView bytes, const ScanOptions& options)
{
    const pe::PeImage image = pe::parse_pe(bytes);
    ScanReport report;
    scan_entry(image, report);
    if (options.anchor_export)
        scan_pattern(image, *options.anchor_export, report);
    scan_split_constants(image, options.pair_window, report);
    return report;
}

} // namespace duqusim::scan
