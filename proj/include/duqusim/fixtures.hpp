// Generated PE32 fixtures and scenario scripts for the proof-of-concept
// runs. Everything is built from first principles with the PE builder;
// the only literal machine code is the published byte snippets (the
// services.exe entrypoint, the hook, the ZwProtectVirtualMemory call site).

#ifndef DUQUSIM_FIXTURES_HPP
#define DUQUSIM_FIXTURES_HPP

#include "duqusim/pe_builder.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace duqusim::fixtures {

using pe::Bytes;

inline constexpr std::uint32_t kServicesBase = 0x01000000;
inline constexpr std::uint32_t kServicesEntryRva = 0x12475;
inline constexpr std::uint32_t kKernelBase = 0x00400000;
inline constexpr std::uint32_t kKernel32Base = 0x7C800000;
inline constexpr std::uint32_t kNtdllBase = 0x7C900000;
inline constexpr std::uint32_t kShell32Base = 0x7C9D0000;
inline constexpr std::uint32_t kHalBase = 0x806D0000;
inline constexpr std::uint32_t kStubPreferredBase = 0x10000000;
inline constexpr std::uint32_t kStub1EntryRva = 0x18BD;
inline constexpr std::uint32_t kPayloadPreferredBase = 0x20000000;
inline constexpr std::uint8_t kBlobKey = 0xA7;

inline constexpr std::array<std::uint8_t, 12> kServicesEntryBytes = {0x6a, 0x70, 0x68, 0xe0, 0x15, 0x00,
                                                                     0x01, 0xe8, 0x66, 0x02, 0x00, 0x00};
// Entry after the hook: mov eax, 0x000a18bd; call eax; the tail survives.
inline constexpr std::array<std::uint8_t, 12> kHookedEntryBytes = {0xb8, 0xbd, 0x18, 0x0a, 0x00, 0xff,
                                                                   0xd0, 0xe8, 0x66, 0x02, 0x00, 0x00};

// Call site of ZwAllocateVirtualMemory through the ZwProtectVirtualMemory
// call in the kernel's PAGE section, starting at kCallTrainAddress.
inline constexpr std::uint32_t kCallTrainAddress = 0x004ED1BC;
inline constexpr std::array<std::uint8_t, 53> kCallTrain = {
    0x50, 0x57, 0xE8, 0x19, 0x8C, 0xF1, 0xFF, 0x3B, 0xC3, 0x8B, 0x4D, 0xFC, 0x89, 0x4E, 0x0C, 0x7C, 0x2E, 0x38,
    0x5D, 0x0B, 0x74, 0x27, 0x8B, 0x45, 0xD0, 0x89, 0x45, 0xF8, 0x8D, 0x45, 0xF4, 0x50, 0x68, 0x04, 0x01, 0x00,
    0x00, 0x8D, 0x45, 0xF8, 0x50, 0x8D, 0x45, 0xFC, 0x50, 0x57, 0xE8, 0x93, 0x96, 0xF1, 0xFF, 0x3B, 0xC3};
inline constexpr std::size_t kPushOffsetInTrain = 32;
inline constexpr std::uint32_t kZwAllocateAddress = 0x00405DDC;
inline constexpr std::uint32_t kZwProtectAddress = 0x00406882;
inline constexpr std::uint32_t kZwProtectCallSite = 0x004ED1EA;

pe::ImageSpec services_spec();
Bytes services_image();
Bytes services_hooked_image();
// Any watched-name-free executable, e.g. calc.exe.
Bytes plain_exe_image(std::uint32_t base = kServicesBase);

struct KernelFixtureOptions {
    bool with_push = true; // false replaces push 104h with five nops
    bool export_allocate = true;
};
Bytes kernel_image(const KernelFixtureOptions& options = {});

// kernel32 exporting the default import names plus a few unrelated ones.
Bytes kernel32_image(const std::vector<std::string>& omit = {});
Bytes shell32_image();
Bytes ntdll_image();
Bytes hal_image();

Bytes stub1_image();
Bytes stub2_image();
Bytes payload_image();
Bytes encrypted_payload();
Bytes config_blob(const std::string& target = "services.exe");
Bytes mask_file();

struct FixtureFile {
    std::string name;
    Bytes bytes;
};

// Every file make-fixtures writes, in a fixed order.
std::vector<FixtureFile> fixture_set();
void write_fixtures(const std::filesystem::path& dir);

} // namespace duqusim::fixtures

#endif // DUQUSIM_FIXTURES_HPP
