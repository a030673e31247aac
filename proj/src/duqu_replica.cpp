#include "duqusim/duqu_replica.hpp"

#include "duqusim/pe_builder.hpp"

#include <algorithm>

namespace duqusim::duqu {

using sim::hex8;
using sim::hex_short;
using sim::Kernel;
using sim::KernelError;

namespace {

constexpr std::array<std::uint8_t, 5> kPush104h = {0x68, 0x04, 0x01, 0x00, 0x00};
constexpr std::array<std::string_view, 2> kKernelFiles = {"ntoskrnl.exe", "ntkrnlpa.exe"};
constexpr std::string_view kAllocateExport = "ZwAllocateVirtualMemory";
constexpr std::size_t kImportSlot = 2; // slots 0 and 1 hold the Zw routines
constexpr std::uint32_t kHeaderProbe = 0x400;

void append_field(Bytes& out, ByteView field)
{
    const std::size_t at = out.size();
    out.resize(at + 4);
    pe::store_u32(out, at, static_cast<std::uint32_t>(field.size()));
    out.insert(out.end(), field.begin(), field.end());
}

ByteView as_bytes(std::string_view s)
{
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

Bytes u32_bytes(std::uint32_t value)
{
    Bytes out(4);
    pe::store_u32(out, 0, value);
    return out;
}

} // namespace

std::string_view to_string(DuquErrc code) noexcept
{
    switch (code) {
    case DuquErrc::halted: return "Halted";
    case DuquErrc::config_decrypt_failed: return "ConfigDecryptFailed";
    case DuquErrc::hal_never_loaded: return "HalNeverLoaded";
    case DuquErrc::kernel_not_found: return "KernelNotFound";
    case DuquErrc::not_found: return "NotFound";
    case DuquErrc::function_rejected: return "FunctionRejected";
    case DuquErrc::version_unsupported: return "VersionUnsupported";
    case DuquErrc::peb_mismatch: return "PebMismatch";
    case DuquErrc::hash_not_found: return "HashNotFound";
    case DuquErrc::not_staged: return "NotStaged";
    case DuquErrc::stub_fault: return "StubFault";
    }
    return "Unknown";
}

std::string_view to_string(DuquState state) noexcept
{
    switch (state) {
    case DuquState::created: return "created";
    case DuquState::halted: return "halted";
    case DuquState::waiting_for_hal: return "waiting_for_hal";
    case DuquState::armed: return "armed";
    case DuquState::failed: return "failed";
    }
    return "unknown";
}

DuquError::DuquError(DuquErrc code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code)
{
}

Bytes decrypt_blob(ByteView blob, std::uint8_t key)
{
    Bytes out(blob.size());
    for (std::size_t i = 0; i < blob.size(); ++i)
        out[i] = static_cast<std::uint8_t>(blob[i] ^ key ^ static_cast<std::uint8_t>(i & 0xFF));
    return out;
}

Bytes encode_config(const InjectionConfig& config, std::uint8_t key)
{
    Bytes body;
    append_field(body, as_bytes(config.target_process));
    append_field(body, as_bytes(config.registry_key));
    append_field(body, config.payload);
    Bytes out(kConfigMagic.begin(), kConfigMagic.end());
    out.push_back(key);
    const Bytes sealed = decrypt_blob(body, key);
    out.insert(out.end(), sealed.begin(), sealed.end());
    return out;
}

DecodedConfig decode_config(ByteView blob)
{
    if (blob.size() < kConfigMagic.size() + 1 || !std::equal(kConfigMagic.begin(), kConfigMagic.end(), blob.begin()))
        throw DuquError(DuquErrc::config_decrypt_failed, "missing DQRC magic");
    DecodedConfig out;
    out.key = blob[kConfigMagic.size()];
    const Bytes body = decrypt_blob(blob.subspan(kConfigMagic.size() + 1), out.key);
    std::size_t at = 0;
    auto field = [&]() -> Bytes {
        if (body.size() - at < 4)
            throw DuquError(DuquErrc::config_decrypt_failed, "truncated field length");
        const std::uint32_t n = pe::load_u32(body, at);
        at += 4;
        if (body.size() - at < n)
            throw DuquError(DuquErrc::config_decrypt_failed, "field overruns the blob");
        Bytes f(body.begin() + static_cast<std::ptrdiff_t>(at), body.begin() + static_cast<std::ptrdiff_t>(at + n));
        at += n;
        return f;
    };
    const Bytes target = field();
    const Bytes registry = field();
    out.config.payload = field();
    if (at != body.size())
        throw DuquError(DuquErrc::config_decrypt_failed, "trailing bytes after the payload field");
    if (target.empty())
        throw DuquError(DuquErrc::config_decrypt_failed, "empty target name");
    out.config.target_process.assign(target.begin(), target.end());
    out.config.registry_key.assign(registry.begin(), registry.end());
    return out;
}

Bytes encode_mask(const MaskSpec& spec)
{
    Bytes out(spec.mask.begin(), spec.mask.end());
    out.insert(out.end(), spec.reference.begin(), spec.reference.end());
    return out;
}

MaskSpec decode_mask(ByteView bytes)
{
    if (bytes.size() != 2 * kMaskLength)
        throw std::invalid_argument("mask file must hold exactly 64 bytes, got " + std::to_string(bytes.size()));
    MaskSpec spec;
    std::copy_n(bytes.begin(), kMaskLength, spec.mask.begin());
    std::copy_n(bytes.begin() + kMaskLength, kMaskLength, spec.reference.begin());
    return spec;
}

Bytes syscall_stub(std::uint32_t service, std::uint32_t stub_address, std::uint32_t dispatcher,
                   std::uint16_t arg_bytes)
{
    Bytes out = {0xB8, 0, 0, 0, 0, 0x8D, 0x54, 0x24, 0x04, 0x9C, 0x6A, 0x08};
    pe::store_u32(out, 1, service);
    const auto call = pe::encode_near_call(stub_address + 12, dispatcher);
    out.insert(out.end(), call.begin(), call.end());
    out.insert(out.end(), {0xC2, 0, 0});
    pe::store_u16(out, 18, arg_bytes);
    return out;
}

MaskSpec default_mask_spec()
{
    // Opcode positions of one 20-byte stub followed by the next stub's
    // first 12 bytes.
    static constexpr std::array<std::uint8_t, 20> kStubMask = {0xFF, 0,    0,    0,    0,    0xFF, 0xFF,
                                                               0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0,
                                                               0,    0,    0,    0xFF, 0,    0};
    MaskSpec spec;
    const Bytes first = syscall_stub(0, 0, 0, 0);
    for (std::size_t i = 0; i < kMaskLength; ++i) {
        const std::size_t j = i % kStubMask.size();
        spec.mask[i] = kStubMask[j];
        spec.reference[i] = static_cast<std::uint8_t>(first[j] & kStubMask[j]);
    }
    return spec;
}

std::vector<std::string> default_import_names()
{
    return {"LoadLibraryA",  "LoadLibraryExA", "GetProcAddress", "GetModuleHandleA", "FreeLibrary",
            "VirtualAlloc",  "VirtualFree",    "VirtualProtect", "VirtualQuery",     "FlushInstructionCache"};
}

LocatedFunction locate_unexported(const pe::PeImage& image, std::string_view known_export, std::uint32_t window)
{
    std::uint32_t export_address = 0;
    try {
        export_address = pe::find_export_by_name(image, known_export);
    } catch (const pe::PeError& e) {
        throw DuquError(DuquErrc::not_found, std::string(known_export) + " is not exported: " + e.what());
    }
    for (const pe::Section& section : image.sections) {
        if (!section.is_code())
            continue;
        const std::size_t n = std::min<std::size_t>(section.raw_size, section.mapped_size());
        const ByteView code = ByteView(image.raw).subspan(section.raw_offset, n);
        const std::uint32_t va = image.nt.image_base + section.virtual_address;
        auto is_call = [&](std::size_t i) { return code[i] == pe::kNearCallOpcode; };
        for (std::size_t i = 0; i + pe::kNearCallLength <= n; ++i) {
            if (!is_call(i) || pe::resolve_near_call(va + i, code.subspan(i, 5)) != export_address)
                continue;
            const std::size_t push_end = std::min(n, i + 5 + window + kPush104h.size());
            for (std::size_t j = i + 5; j + kPush104h.size() <= push_end; ++j) {
                if (!std::equal(kPush104h.begin(), kPush104h.end(), code.begin() + static_cast<std::ptrdiff_t>(j)))
                    continue;
                const std::size_t call_end = std::min(n, j + 5 + window + pe::kNearCallLength);
                for (std::size_t k = j + 5; k + pe::kNearCallLength <= call_end; ++k) {
                    if (!is_call(k))
                        continue;
                    const auto site = static_cast<std::uint32_t>(va + k);
                    return {pe::resolve_near_call(site, code.subspan(k, 5)), site, static_cast<std::uint32_t>(va + i),
                            static_cast<std::uint32_t>(va + j)};
                }
                break;
            }
        }
    }
    throw DuquError(DuquErrc::not_found,
                    "no call/push 104h/call pattern anchored on " + std::string(known_export));
}

Verdict validate_function(std::uint32_t address, ByteView first32, const MaskSpec& mask, std::uint32_t kernel_base)
{
    if (address < kernel_base)
        return {false, "range"};
    if (first32.size() < kMaskLength)
        return {false, "mask"};
    for (std::size_t i = 0; i < kMaskLength; ++i) {
        if ((first32[i] & mask.mask[i]) != (mask.reference[i] & mask.mask[i]))
            return {false, "mask"};
    }
    return {true, "ok"};
}

std::array<std::uint8_t, 7> encode_hook(std::uint32_t target) noexcept
{
    return {0xB8,
            static_cast<std::uint8_t>(target),
            static_cast<std::uint8_t>(target >> 8),
            static_cast<std::uint8_t>(target >> 16),
            static_cast<std::uint8_t>(target >> 24),
            0xFF,
            0xD0};
}

// ---------------------------------------------------------------------------
// driver

DuquDriver::DuquDriver(Kernel& kernel, DuquOptions options) : kernel_(kernel), options_(std::move(options)) {}

void DuquDriver::note(const std::string& text)
{
    kernel_.log("duqu", "[duqu] " + text);
}

const Injection* DuquDriver::injection(std::uint32_t pid) const
{
    auto it = injections_.find(pid);
    return it == injections_.end() ? nullptr : &it->second;
}

void DuquDriver::boot_init()
{
    handle_ = kernel_.register_driver(options_.driver_name);
    function_table_.assign(kFunctionTableSize, 0);
    try {
        const DecodedConfig decoded = decode_config(options_.config_blob);
        config_ = decoded.config;
        key_ = decoded.key;
    } catch (const DuquError& e) {
        state_ = DuquState::failed;
        last_error_ = e.code();
        note(std::string("init failed: ") + e.what());
        throw;
    }
    if (kernel_.boot_mode() != sim::BootMode::normal) {
        state_ = DuquState::halted;
        last_error_ = DuquErrc::halted;
        note("halted: " + std::string(sim::to_string(kernel_.boot_mode())) + " mode");
        throw DuquError(DuquErrc::halted, std::string(sim::to_string(kernel_.boot_mode())) + " mode");
    }
    stub1_stripped_ = pe::strip_headers(options_.stub1);
    stub2_stripped_ = pe::strip_headers(options_.stub2);

    kernel_.create_device(handle_, std::string(kControlDevice),
                          [this](const sim::DeviceRequest& r) { return handle_control(r); });
    kernel_.create_device(handle_, std::string(kAccessPoint), [](const sim::DeviceRequest&) { return Bytes{}; });
    kernel_.create_symbolic_link(std::string(kAccessLink), std::string(kAccessPoint));
    state_ = DuquState::waiting_for_hal;
    kernel_.queue_reinitialization(handle_, [this](std::uint32_t count) { return wait_for_hal(count); });
    note("config decrypted: target=" + config_.target_process + " registry=" + config_.registry_key);
    note("device " + std::string(kControlDevice) + " created, waiting for hal.dll");
}

bool DuquDriver::wait_for_hal(std::uint32_t)
{
    const auto& modules = kernel_.system_modules();
    const bool hal_loaded = std::any_of(modules.begin(), modules.end(),
                                        [](const sim::LoadedModule& m) { return sim::iequals(m.name, "hal.dll"); });
    if (hal_loaded) {
        complete_init();
        return false;
    }
    if (hal_requeues_ == kHalRetryLimit) {
        state_ = DuquState::failed;
        last_error_ = DuquErrc::hal_never_loaded;
        note("hal.dll never loaded after " + std::to_string(kHalRetryLimit) + " retries");
        return false;
    }
    ++hal_requeues_;
    return true;
}

void DuquDriver::complete_init()
{
    kernel_.create_device(handle_, std::string(kLateAccessPoint), [](const sim::DeviceRequest&) { return Bytes{}; });
    try {
        locate_kernel_functions();
    } catch (const std::exception& e) {
        state_ = DuquState::failed;
        if (const auto* d = dynamic_cast<const DuquError*>(&e))
            last_error_ = d->code();
        else
            last_error_ = DuquErrc::not_found;
        note(std::string("stealth setup failed: ") + e.what());
        return;
    }
    kernel_.set_image_notify(handle_, [this](const sim::NotificationEvent& e) { on_image_load(e); });
    state_ = DuquState::armed;
    note("hal.dll present after " + std::to_string(hal_requeues_) + " retries; image-load notification registered");
}

void DuquDriver::locate_kernel_functions()
{
    const sim::LoadedModule* kernel_module = nullptr;
    for (std::string_view file : kKernelFiles) {
        kernel_module = kernel_.find_module(Kernel::kSystemPid, file);
        if (kernel_module != nullptr)
            break;
    }
    if (kernel_module == nullptr)
        throw DuquError(DuquErrc::kernel_not_found, "neither ntoskrnl.exe nor ntkrnlpa.exe is loaded");

    const pe::PeImage image = pe::parse_pe(kernel_.dump_module(Kernel::kSystemPid, kernel_module->base));
    std::uint32_t allocate = 0;
    try {
        allocate = pe::find_export_by_name(image, kAllocateExport);
    } catch (const pe::PeError& e) {
        throw DuquError(DuquErrc::not_found, e.what());
    }
    const LocatedFunction protect = locate_unexported(image, kAllocateExport, options_.scan_window);

    for (const auto& [name, address] : {std::pair<std::string_view, std::uint32_t>{kAllocateExport, allocate},
                                        {"ZwProtectVirtualMemory", protect.target}}) {
        const Bytes head = kernel_.read_memory(Kernel::kSystemPid, address, kMaskLength);
        const Verdict v = validate_function(address, head, options_.mask, options_.kernel_base);
        if (!v.valid)
            throw DuquError(DuquErrc::function_rejected,
                            std::string(name) + " at " + hex8(address) + " failed the " + v.reason + " check");
    }
    zw_allocate_ = allocate;
    zw_protect_ = protect.target;
    pe::store_u32(function_table_, 0, allocate);
    pe::store_u32(function_table_, 4, protect.target);
    note(std::string(kernel_module->name) + ": ZwAllocateVirtualMemory=" + hex8(allocate) +
         " ZwProtectVirtualMemory=" + hex8(protect.target) + " (call at " + hex8(protect.call_site) + ")");
}

void DuquDriver::on_image_load(const sim::NotificationEvent& event)
{
    if (event.pid == Kernel::kSystemPid)
        return;
    try {
        if (stage_injection(event))
            return;
        const auto it = injections_.find(event.pid);
        if (it != injections_.end() && !it->second.hooked && sim::iequals(event.module_name, "kernel32.dll"))
            hook_entrypoint(event);
    } catch (const std::exception& e) {
        if (const auto* d = dynamic_cast<const DuquError*>(&e))
            last_error_ = d->code();
        note("pid=" + hex_short(event.pid) + " " + event.module_name + ": injection aborted: " + e.what());
    }
}

bool DuquDriver::stage_injection(const sim::NotificationEvent& event)
{
    if (!sim::iequals(sim::basename(event.module_name), config_.target_process))
        return false;
    if (injections_.contains(event.pid))
        return false;
    if (state_ != DuquState::armed)
        throw DuquError(DuquErrc::not_staged, "driver is " + std::string(to_string(state_)));
    const auto& versions = options_.supported_versions;
    if (std::find(versions.begin(), versions.end(), kernel_.os_version()) == versions.end())
        throw DuquError(DuquErrc::version_unsupported, "Windows " + kernel_.os_version());

    const std::uint32_t pid = event.pid;
    const sim::Peb peb = kernel_.query_peb(pid);
    if (peb.image_base_address != event.base)
        throw DuquError(DuquErrc::peb_mismatch, "PEB says " + hex8(peb.image_base_address) + ", loader says " +
                                                    hex8(event.base));
    const Bytes headers = kernel_.read_memory(pid, event.base, kHeaderProbe);
    Injection inj;
    inj.pid = pid;
    inj.image_base = event.base;
    inj.entrypoint = event.base + pe::read_entry_point_rva(headers);

    // Stub 1 is a flat image, so its file bytes are already in mapped layout.
    const pe::PeImage stub1 = pe::parse_pe(options_.stub1);
    const std::uint32_t stub1_span = pe::align_up(
        std::max<std::uint32_t>(stub1.nt.size_of_image, static_cast<std::uint32_t>(stub1_stripped_.size())),
        Kernel::kPageSize);
    const auto stub2_size = static_cast<std::uint32_t>(stub2_stripped_.size());
    inj.stub_region = kernel_.allocate_memory(pid, stub1_span + stub2_size, sim::kRWX);
    inj.stub2_address = inj.stub_region + stub1_span;
    kernel_.write_memory(pid, inj.stub_region, stub1_stripped_);
    kernel_.write_memory(pid, inj.stub2_address, stub2_stripped_);

    Bytes mapped = kernel_.read_memory(pid, inj.stub_region, static_cast<std::uint32_t>(stub1_stripped_.size()));
    pe::restore_headers_in_place(mapped);
    pe::apply_relocations(mapped, inj.stub_region, stub1.nt.image_base, stub1.relocations);
    kernel_.write_memory(pid, inj.stub_region, mapped);
    inj.stub1_entry = inj.stub_region + stub1.nt.entry_point_rva;

    inj.saved_perms = kernel_.protect_memory(pid, inj.entrypoint, kSavedEntryLength, sim::kRWX);
    note("pid=" + hex_short(pid) + " entrypoint " + hex8(inj.entrypoint) + " " + sim::to_string(inj.saved_perms) +
         " -> " + sim::to_string(sim::kRWX));

    const Bytes payload = decrypt_blob(config_.payload, key_);
    inj.payload_size = static_cast<std::uint32_t>(payload.size());
    inj.launch_block =
        kernel_.allocate_memory(pid, static_cast<std::uint32_t>(LaunchBlock::kSize + payload.size()), sim::kRW);
    kernel_.write_memory(pid, inj.launch_block + LaunchBlock::kSize, payload);
    inj.driver_handle = kernel_.open_device(pid, std::string(kControlDevice));

    Bytes block(LaunchBlock::kSize, 0);
    pe::store_u32(block, LaunchBlock::kEntrypoint, inj.entrypoint);
    pe::store_u32(block, LaunchBlock::kStub1Base, inj.stub_region);
    pe::store_u32(block, LaunchBlock::kStub2Address, inj.stub2_address);
    pe::store_u32(block, LaunchBlock::kStub2Size, stub2_size);
    pe::store_u32(block, LaunchBlock::kPayloadSize, inj.payload_size);
    pe::store_u32(block, LaunchBlock::kDriverHandle, inj.driver_handle);
    kernel_.write_memory(pid, inj.launch_block, block);

    note("pid=" + hex_short(pid) + " staged: stubs at " + hex8(inj.stub_region) + ", launch block at " +
         hex8(inj.launch_block) + " (57 + " + std::to_string(payload.size()) + " bytes)");
    injections_.emplace(pid, std::move(inj));
    return true;
}

void DuquDriver::hook_entrypoint(const sim::NotificationEvent& event)
{
    const auto it = injections_.find(event.pid);
    if (it == injections_.end())
        throw DuquError(DuquErrc::not_staged, "pid " + hex_short(event.pid) + " was never staged");
    Injection& inj = it->second;
    if (inj.hooked)
        return;

    const pe::PeImage k32 = pe::parse_pe(kernel_.dump_module(event.pid, event.base));
    std::vector<ResolvedImport> imports;
    for (const std::string& name : options_.import_names) {
        const std::uint32_t hash = pe::ror13_hash(name);
        try {
            imports.push_back({name, hash, pe::find_export_by_hash(k32, hash).address});
        } catch (const pe::PeError& e) {
            throw DuquError(DuquErrc::hash_not_found, "hash " + hex8(hash) + " (" + name + "): " + e.what());
        }
    }

    const Bytes saved = kernel_.read_memory(event.pid, inj.entrypoint, kSavedEntryLength);
    std::array<std::uint8_t, kSavedEntryLength> saved_array{};
    std::copy(saved.begin(), saved.end(), saved_array.begin());
    kernel_.write_memory(event.pid, inj.launch_block + LaunchBlock::kSavedBytes, saved);
    kernel_.write_memory(event.pid, inj.launch_block + LaunchBlock::kKernel32Base, u32_bytes(event.base));
    inj.saved_entry_bytes = saved_array;
    inj.imports = std::move(imports);

    const auto hook = encode_hook(inj.stub1_entry);
    kernel_.write_memory(event.pid, inj.entrypoint, hook);
    kernel_.write_memory(event.pid, inj.launch_block + LaunchBlock::kState, Bytes{1});
    kernel_.register_native_routine(event.pid, inj.stub1_entry,
                                    [this](const sim::NativeContext& c) { run_stub(c); });
    inj.hooked = true;
    note("pid=" + hex_short(event.pid) + " resolved " + std::to_string(inj.imports.size()) +
         " kernel32 imports; entrypoint " + hex8(inj.entrypoint) + " hooked -> " + hex8(inj.stub1_entry));
}

DuquDriver::Mapped DuquDriver::manual_map(std::uint32_t pid, ByteView file)
{
    const pe::PeImage image = pe::parse_pe(file);
    const std::uint32_t size = pe::align_up(image.nt.size_of_image, Kernel::kPageSize);
    const std::uint32_t base = kernel_.allocate_memory(pid, size, sim::kRWX);
    Bytes mapped(size, 0);
    std::copy_n(file.begin(), std::min<std::size_t>({image.nt.size_of_headers, file.size(), size}), mapped.begin());
    for (const pe::Section& s : image.sections) {
        const std::size_t n = std::min<std::size_t>(s.raw_size, s.mapped_size());
        if (s.virtual_address >= size)
            continue;
        std::copy_n(file.begin() + s.raw_offset, std::min<std::size_t>(n, size - s.virtual_address),
                    mapped.begin() + s.virtual_address);
    }
    pe::apply_relocations(mapped, base, image.nt.image_base, image.relocations);
    kernel_.write_memory(pid, base, mapped);
    return {base, base + image.nt.entry_point_rva};
}

void DuquDriver::run_stub(const sim::NativeContext& context)
{
    const std::uint32_t pid = context.pid;
    Injection& inj = injections_.at(pid);
    try {
        // call-pop: the stub derives its own base from where it is running.
        const pe::PeImage stub1 = pe::parse_pe(options_.stub1);
        const std::uint32_t self = context.address - stub1.nt.entry_point_rva;
        if (self != inj.stub_region)
            throw DuquError(DuquErrc::stub_fault, "entered at " + hex8(context.address) + ", not stub 1's entry");
        const std::uint32_t delta = self - stub1.nt.image_base;
        for (const pe::RelocationBlock& block : stub1.relocations) {
            for (const pe::Fixup& f : block.fixups) {
                if (f.type != pe::kRelHighLow)
                    continue;
                const std::uint32_t rva = block.page_rva + f.offset;
                const std::uint32_t expected = pe::load_u32(options_.stub1, rva) + delta;
                if (pe::load_u32(kernel_.read_memory(pid, self + rva, 4), 0) != expected)
                    throw DuquError(DuquErrc::stub_fault, "relocation marker at " + hex8(self + rva) + " is stale");
            }
        }

        const auto stub2_size = static_cast<std::uint32_t>(stub2_stripped_.size());
        Bytes stub2 = kernel_.read_memory(pid, inj.stub2_address, stub2_size);
        pe::restore_headers_in_place(stub2);
        kernel_.write_memory(pid, inj.stub2_address, stub2);
        for (std::size_t i = 0; i < inj.imports.size() && (kImportSlot + i + 1) * 4 <= kFunctionTableSize; ++i)
            pe::store_u32(function_table_, (kImportSlot + i) * 4, inj.imports[i].address);
        const sim::LoadedModule* ntdll = kernel_.find_module(pid, "ntdll.dll");
        const std::uint32_t ntdll_handle = ntdll != nullptr ? ntdll->base : 0;
        kernel_.write_memory(pid, inj.launch_block + LaunchBlock::kNtdllHandle, u32_bytes(ntdll_handle));
        note("pid=" + hex_short(pid) + " stub 1 running at " + hex8(self) + ": stub 2 headers restored, " +
             std::to_string(inj.imports.size()) + " imports filled, ntdll handle " + hex8(ntdll_handle));

        // Stub 2 maps itself, then the payload as a DLL linked to it.
        const Mapped host = manual_map(pid, stub2);
        const Bytes payload = kernel_.read_memory(pid, inj.launch_block + LaunchBlock::kSize, inj.payload_size);
        const Mapped dll = manual_map(pid, payload);
        inj.host_base = host.base;
        inj.payload_base = dll.base;
        kernel_.write_memory(pid, inj.launch_block + LaunchBlock::kHostBase, u32_bytes(host.base));
        kernel_.write_memory(pid, inj.launch_block + LaunchBlock::kPayloadBase, u32_bytes(dll.base));
        kernel_.write_memory(pid, inj.launch_block + LaunchBlock::kPayloadEntry, u32_bytes(dll.entry));
        inj.payload_started = true;
        milestones_.push_back("PAYLOAD_STARTED");
        note("PAYLOAD_STARTED pid=" + hex_short(pid) + " host=" + hex8(host.base) + " payload=" + hex8(dll.base) +
             " entry=" + hex8(dll.entry));

        kernel_.send_device_request({std::string(kControlDevice), kRestoreEntrypoint, u32_bytes(pid)});
        kernel_.send_device_request({std::string(kControlDevice), kRestoreProtection, u32_bytes(pid)});
    } catch (const std::exception& e) {
        last_error_ = DuquErrc::stub_fault;
        note("pid=" + hex_short(pid) + " stub fault: " + e.what());
        if (kernel_.alive(pid))
            kernel_.terminate_process(pid);
    }
}

Bytes DuquDriver::handle_control(const sim::DeviceRequest& request)
{
    if (request.payload.size() < 4)
        return {0};
    const std::uint32_t pid = pe::load_u32(request.payload, 0);
    const auto it = injections_.find(pid);
    if (it == injections_.end() || !it->second.saved_entry_bytes)
        return {0};
    const Injection& inj = it->second;
    switch (request.code) {
    case kRestoreEntrypoint:
        kernel_.write_memory(pid, inj.entrypoint, *inj.saved_entry_bytes);
        milestones_.push_back("RESTORE_ENTRYPOINT");
        note("RESTORE_ENTRYPOINT pid=" + hex_short(pid) + ": " + std::to_string(kSavedEntryLength) +
             " bytes rewritten at " + hex8(inj.entrypoint));
        return {1};
    case kRestoreProtection:
        kernel_.protect_memory(pid, inj.entrypoint, kSavedEntryLength, inj.saved_perms);
        milestones_.push_back("RESTORE_PROTECTION");
        note("RESTORE_PROTECTION pid=" + hex_short(pid) + ": " + hex8(inj.entrypoint) + " back to " +
             sim::to_string(inj.saved_perms));
        return {1};
    default:
        return {0};
    }
}

} // namespace duqusim::duqu
