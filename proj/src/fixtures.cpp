#include "duqusim/fixtures.hpp"

#include "duqusim/duqu_replica.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace duqusim::fixtures {

using pe::ImageSpec;
using pe::SectionSpec;

namespace {

constexpr std::array<std::uint8_t, 7> kPrologue = {0x8B, 0xFF, 0x55, 0x8B, 0xEC, 0x5D, 0xC3};

void put(Bytes& buffer, std::size_t at, pe::ByteView bytes)
{
    std::copy(bytes.begin(), bytes.end(), buffer.begin() + static_cast<std::ptrdiff_t>(at));
}

// A DLL whose exports each point at a tiny prologue in .text.
Bytes simple_dll(std::uint32_t base, const std::string& dll_name, const std::vector<std::string>& names)
{
    ImageSpec spec;
    spec.image_base = base;
    spec.dll = true;
    spec.entry_point_rva = 0x1000;
    spec.dll_name = dll_name;
    Bytes text(std::max<std::size_t>(0x200, 0x20 * (names.size() + 2)), 0xCC);
    put(text, 0, kPrologue);
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto rva = static_cast<std::uint32_t>(0x20 * (i + 1));
        put(text, rva, kPrologue);
        spec.exports.push_back({names[i], 0x1000 + rva});
    }
    // One absolute pointer back into .text keeps the image relocatable.
    pe::store_u32(text, 0x10, base + 0x1000);
    spec.relocation_rvas = {0x1010};
    spec.sections.push_back({".text", pe::kCodeSection, std::move(text), 0, 0});
    spec.sections.push_back({".data", pe::kDataSection, Bytes(0x40, 0), 0, 0});
    return pe::build_image(spec);
}

std::string poc_script(bool sentinel_first)
{
    const std::string sentinel = "driver sentinel\n";
    const std::string duqu =
        "driver duqu config=config.bin stub1=stub1.bin stub2=stub2.bin mask=mask.bin kernel-base=0x00400000\n";
    std::string s = sentinel_first ? "# Defensive driver first, then the injecting driver, then services.exe.\n"
                                   : "# Injecting driver registered ahead of the defensive one.\n";
    s += sentinel_first ? sentinel + duqu : duqu + sentinel;
    s += "module system ntoskrnl.exe ntoskrnl.exe\n"
         "module system hal.dll hal.dll\n"
         "process services.exe services.exe pid=0x914 path=Desktop\\services.exe\n"
         "module services.exe kernel32.dll kernel32.dll\n";
    if (sentinel_first) {
        s += "module services.exe shell32.dll shell32.dll\n"
             "expect -+* Create process 0x914 *+-\n"
             "expect   PEB=0x7ffd6000 ImageBaseAddress=0x01000000\n"
             "expect Entrypoint bytes at 0x01012475:\n"
             "expect   0x6a 0x70 0x68 0xe0 0x15 0x00 0x01 0xe8\n"
             "expect ProcessImageName: Desktop\\services.exe\n"
             "expect * Loaded module \\WINDOWS\\system32\\kernel32.dll *\n"
             "expect   ImageBaseAddress=0x7c800000 ProcessId=0x914\n"
             "expect      0x6a 0x70 0x68 0xe0 0x15 0x00 0x01 0xe8\n"
             "expect -> OK!\n"
             "expect * Loaded module \\WINDOWS\\system32\\shell32.dll *\n"
             "expect   ImageBaseAddress=0x7c9d0000 ProcessId=0x914\n"
             "expect      0xb8 0xbd 0x18 0x0a 0x00 0xff 0xd0 0xe8\n"
             "expect -> Checksum error !!!!\n"
             "expect -> Terminating services.exe\n";
    } else {
        s += "expect * Loaded module \\WINDOWS\\system32\\kernel32.dll *\n"
             "expect      0xb8 0xbd 0x18 0x0a 0x00 0xff 0xd0 0xe8\n"
             "expect -> Checksum error !!!!\n"
             "expect -> Terminating services.exe\n";
    }
    return s;
}

const char* const kInfectionScript =
    "# No defender: the hook runs, the payload starts and the entrypoint is restored.\n"
    "driver duqu config=config.bin stub1=stub1.bin stub2=stub2.bin mask=mask.bin kernel-base=0x00400000\n"
    "module system ntoskrnl.exe ntoskrnl.exe\n"
    "tick 3\n"
    "module system hal.dll hal.dll\n"
    "expect image-load notification registered\n"
    "process services.exe services.exe pid=0x914\n"
    "module services.exe ntdll.dll ntdll.dll\n"
    "module services.exe kernel32.dll kernel32.dll\n"
    "expect hooked -> 0x000a18bd\n"
    "run services.exe\n"
    "expect PAYLOAD_STARTED pid=0x914\n"
    "expect RESTORE_ENTRYPOINT pid=0x914\n"
    "expect RESTORE_PROTECTION pid=0x914: 0x01012475 back to R-X\n"
    "expect running original code at 0x01012475\n";

const char* const kDebugModeScript =
    "# In debug mode the injecting driver halts during initialization.\n"
    "set-mode debug\n"
    "driver sentinel\n"
    "driver duqu config=config.bin stub1=stub1.bin stub2=stub2.bin mask=mask.bin kernel-base=0x00400000\n"
    "expect [duqu] halted: debug mode\n"
    "module system ntoskrnl.exe ntoskrnl.exe\n"
    "module system hal.dll hal.dll\n"
    "process services.exe services.exe pid=0x914\n"
    "module services.exe kernel32.dll kernel32.dll\n"
    "module services.exe shell32.dll shell32.dll\n"
    "expect * Loaded module \\WINDOWS\\system32\\shell32.dll *\n"
    "expect -> OK!\n"
    "run services.exe\n"
    "expect running original code at 0x01012475\n";

const char* const kCleanScript =
    "# No drivers at all: only the loader speaks.\n"
    "process services.exe services.exe\n"
    "module services.exe kernel32.dll kernel32.dll\n"
    "expect [kernel] create process services.exe\n"
    "expect [kernel] map kernel32.dll\n";

Bytes text_bytes(const std::string& s)
{
    return Bytes(s.begin(), s.end());
}

} // namespace

ImageSpec services_spec()
{
    ImageSpec spec;
    spec.image_base = kServicesBase;
    spec.entry_point_rva = kServicesEntryRva;
    Bytes text(0x11500, 0xCC);
    put(text, kServicesEntryRva - 0x1000, kServicesEntryBytes);
    spec.sections.push_back({".text", pe::kCodeSection, std::move(text), 0, 0});
    Bytes data(0x200, 0);
    pe::store_u32(data, 0, kServicesBase + 0x15e0);
    spec.sections.push_back({".data", pe::kDataSection, std::move(data), 0x1000, 0});
    // push 0x010015e0 at entry+2 carries an absolute address.
    spec.relocation_rvas = {kServicesEntryRva + 3, 0x13000};
    return spec;
}

Bytes services_image()
{
    return pe::build_image(services_spec());
}

Bytes services_hooked_image()
{
    ImageSpec spec = services_spec();
    put(spec.sections[0].data, kServicesEntryRva - 0x1000, kHookedEntryBytes);
    spec.relocation_rvas = {0x13000};
    return pe::build_image(spec);
}

Bytes plain_exe_image(std::uint32_t base)
{
    ImageSpec spec;
    spec.image_base = base;
    spec.entry_point_rva = 0x1010;
    Bytes text(0x400, 0xCC);
    put(text, 0x10, kPrologue);
    spec.sections.push_back({".text", pe::kCodeSection, std::move(text), 0, 0});
    spec.sections.push_back({".data", pe::kDataSection, Bytes(0x80, 0), 0, 0});
    return pe::build_image(spec);
}

Bytes kernel_image(const KernelFixtureOptions& options)
{
    ImageSpec spec;
    spec.image_base = kKernelBase;
    spec.entry_point_rva = 0x1100;

    constexpr std::uint32_t kDispatcher = kKernelBase + 0x1000;
    Bytes text(0x6000, 0xCC);
    put(text, 0x0, Bytes{0x6A, 0x00, 0x9D, 0xC3}); // system service dispatcher
    put(text, 0x100, kPrologue);                   // entrypoint
    // Two runs of consecutive system-call stubs.
    auto stubs = [&](std::uint32_t rva, std::initializer_list<std::pair<std::uint32_t, std::uint16_t>> services) {
        for (const auto& [service, args] : services) {
            put(text, rva - 0x1000, duqu::syscall_stub(service, kKernelBase + rva, kDispatcher, args));
            rva += 20;
        }
    };
    stubs(kZwAllocateAddress - kKernelBase, {{0x11, 0x18}, {0x12, 0x0C}, {0x19, 0x04}, {0x1A, 0x14}});
    stubs(kZwProtectAddress - kKernelBase, {{0x89, 0x14}, {0x8A, 0x14}});
    spec.sections.push_back({".text", pe::kCodeSection, std::move(text), 0, 0});

    constexpr std::uint32_t kPageRva = 0xED000;
    Bytes page(0x400, 0xCC);
    const std::uint32_t train_offset = kCallTrainAddress - kKernelBase - kPageRva;
    std::fill(page.begin() + 0x1AD, page.begin() + train_offset, 0x90);
    put(page, train_offset, kCallTrain);
    if (!options.with_push)
        std::fill_n(page.begin() + train_offset + kPushOffsetInTrain, 5, 0x90);
    spec.sections.push_back({"PAGE", pe::kCodeSection, std::move(page), 0, kPageRva});
    spec.sections.push_back({".data", pe::kDataSection, Bytes(0x100, 0), 0, 0});

    spec.dll_name = "ntoskrnl.exe";
    if (options.export_allocate)
        spec.exports.push_back({"ZwAllocateVirtualMemory", kZwAllocateAddress - kKernelBase});
    spec.exports.push_back({"ZwAllocateUserPhysicalPages", kZwAllocateAddress - kKernelBase + 20});
    spec.exports.push_back({"ZwClose", kZwAllocateAddress - kKernelBase + 40});
    spec.exports.push_back({"KeInitializeSpinLock", 0x1100});
    return pe::build_image(spec);
}

Bytes kernel32_image(const std::vector<std::string>& omit)
{
    std::vector<std::string> names;
    for (const std::string& n : duqu::default_import_names()) {
        if (std::find(omit.begin(), omit.end(), n) == omit.end())
            names.push_back(n);
    }
    for (const char* extra : {"CloseHandle", "CreateFileA", "ExitProcess", "Sleep", "WriteFile"})
        names.emplace_back(extra);
    return simple_dll(kKernel32Base, "kernel32.dll", names);
}

Bytes shell32_image()
{
    return simple_dll(kShell32Base, "shell32.dll", {"ShellExecuteA", "SHGetFolderPathA", "DragQueryFileA"});
}

Bytes ntdll_image()
{
    return simple_dll(kNtdllBase, "ntdll.dll", {"NtClose", "RtlInitUnicodeString", "LdrLoadDll"});
}

Bytes hal_image()
{
    return simple_dll(kHalBase, "hal.dll", {"HalInitSystem", "KfAcquireSpinLock", "KfReleaseSpinLock"});
}

Bytes stub1_image()
{
    ImageSpec spec;
    spec.image_base = kStubPreferredBase;
    spec.entry_point_rva = kStub1EntryRva;
    spec.dll = true;
    spec.flat = true;
    Bytes text(0x1000, 0xCC);
    const std::uint32_t entry = kStub1EntryRva - 0x1000;
    // call $+5; pop eax; sub eax, entry rva: the call-pop self-location.
    put(text, entry, Bytes{0xE8, 0x00, 0x00, 0x00, 0x00, 0x58, 0x2D, 0xBD, 0x18, 0x00, 0x00});
    // xor eax, 0xF750F284; cmp eax, 0xF750B7D4: the obfuscated PE check.
    put(text, entry + 0x20, Bytes{0x8B, 0x00, 0x35, 0x84, 0xF2, 0x50, 0xF7, 0x3D, 0xD4, 0xB7, 0x50, 0xF7});
    // Self-pointer: only correct once relocated to the actual base.
    pe::store_u32(text, 0xF00, kStubPreferredBase + 0x1F00);
    spec.relocation_rvas = {0x1F00};
    spec.sections.push_back({".text", pe::kCodeSection | pe::kScnMemWrite, std::move(text), 0, 0});
    return pe::build_image(spec);
}

Bytes stub2_image()
{
    ImageSpec spec;
    spec.image_base = kStubPreferredBase;
    spec.entry_point_rva = 0x1000;
    spec.dll = true;
    Bytes text(0x200, 0xCC);
    put(text, 0, Bytes{0xE8, 0x00, 0x00, 0x00, 0x00, 0x5B, 0x81, 0xEB, 0x05, 0x10, 0x00, 0x00});
    pe::store_u32(text, 0x100, kStubPreferredBase + 0x1100);
    spec.relocation_rvas = {0x1100};
    spec.sections.push_back({".text", pe::kCodeSection, std::move(text), 0, 0});
    spec.sections.push_back({".data", pe::kDataSection, Bytes(0x40, 0), 0, 0});
    return pe::build_image(spec);
}

Bytes payload_image()
{
    ImageSpec spec;
    spec.image_base = kPayloadPreferredBase;
    spec.entry_point_rva = 0x1000;
    spec.dll = true;
    spec.dll_name = "netp191.dll";
    Bytes text(0x600, 0xCC);
    put(text, 0, kPrologue);
    put(text, 0x40, kPrologue);
    pe::store_u32(text, 0x200, kPayloadPreferredBase + 0x2000);
    spec.relocation_rvas = {0x1200};
    spec.exports = {{"Start", 0x1040}};
    spec.sections.push_back({".text", pe::kCodeSection, std::move(text), 0, 0});
    Bytes data(0x100, 0);
    const std::string marker = "payload marker";
    std::copy(marker.begin(), marker.end(), data.begin());
    spec.sections.push_back({".data", pe::kDataSection, std::move(data), 0, 0});
    return pe::build_image(spec);
}

Bytes encrypted_payload()
{
    return duqu::decrypt_blob(payload_image(), kBlobKey);
}

Bytes config_blob(const std::string& target)
{
    duqu::InjectionConfig config;
    config.target_process = target;
    config.registry_key = "\\REGISTRY\\MACHINE\\SYSTEM\\CurrentControlSet\\Services\\nfrd965\\Parameters";
    config.payload = encrypted_payload();
    return duqu::encode_config(config, kBlobKey);
}

Bytes mask_file()
{
    return duqu::encode_mask(duqu::default_mask_spec());
}

std::vector<FixtureFile> fixture_set()
{
    return {
        {"services.exe", services_image()},
        {"services_hooked.exe", services_hooked_image()},
        {"calc.exe", plain_exe_image()},
        {"ntoskrnl.exe", kernel_image()},
        {"kernel32.dll", kernel32_image()},
        {"shell32.dll", shell32_image()},
        {"ntdll.dll", ntdll_image()},
        {"hal.dll", hal_image()},
        {"stub1.bin", stub1_image()},
        {"stub2.bin", stub2_image()},
        {"payload.bin", encrypted_payload()},
        {"config.bin", config_blob()},
        {"mask.bin", mask_file()},
        {"poc_duqu_attack.scn", text_bytes(poc_script(true))},
        {"poc_reverse_order.scn", text_bytes(poc_script(false))},
        {"duqu_infection.scn", text_bytes(kInfectionScript)},
        {"debug_mode.scn", text_bytes(kDebugModeScript)},
        {"clean.scn", text_bytes(kCleanScript)},
    };
}

void write_fixtures(const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    for (const FixtureFile& f : fixture_set()) {
        const auto path = dir / f.name;
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(f.bytes.data()), static_cast<std::streamsize>(f.bytes.size()));
        if (!out)
            throw std::runtime_error("cannot write " + path.string());
    }
}

} // namespace duqusim::fixtures
