// Static signatures over a PE32 file: the mov eax/call eax entrypoint hook,
// the call/push 104h/call pattern that leads to ZwProtectVirtualMemory and
// split XOR constants that reassemble to the NT signature.

#ifndef DUQUSIM_SCANNER_HPP
#define DUQUSIM_SCANNER_HPP

#include "duqusim/pe_format.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace duqusim::scan {

enum class FindingKind { entry_hook, zwprotect_pattern, obfuscated_pe_const };

std::string_view to_string(FindingKind kind) noexcept;

struct Finding {
    FindingKind kind = FindingKind::entry_hook;
    std::uint32_t address = 0;
    std::string detail;
};

struct ScanReport {
    std::string path;
    std::vector<Finding> findings;
};

struct ScanOptions {
    std::optional<std::string> anchor_export;
    // Largest distance between the two halves of a split constant.
    std::uint32_t pair_window = 64;
};

// Throws pe::PeError when the bytes are not a PE32 image.
ScanReport scan_pe(pe::ByteView image, const ScanOptions& options = {});

} // namespace duqusim::scan

#endif // DUQUSIM_SCANNER_HPP
