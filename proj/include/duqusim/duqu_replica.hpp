// Re-implementation of the injecting driver on top of the simulated kernel:
// boot initialization with the hal.dll wait loop, discovery of the
// unexported ZwProtectVirtualMemory, the range/mask hook-avoidance checks,
// the two-notification injection into the configured target process and
// the stub chain that maps the payload and asks the driver to undo the
// entrypoint hook.

#ifndef DUQUSIM_DUQU_REPLICA_HPP
#define DUQUSIM_DUQU_REPLICA_HPP

#include "duqusim/pe_format.hpp"
#include "duqusim/simkernel.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace duqusim::duqu {

using pe::Bytes;
using pe::ByteView;

enum class DuquErrc {
    halted,
    config_decrypt_failed,
    hal_never_loaded,
    kernel_not_found,
    not_found,
    function_rejected,
    version_unsupported,
    peb_mismatch,
    hash_not_found,
    not_staged,
    stub_fault,
};

std::string_view to_string(DuquErrc code) noexcept;

class DuquError : public std::runtime_error {
public:
    DuquError(DuquErrc code, const std::string& detail);
    [[nodiscard]] DuquErrc code() const noexcept { return code_; }

private:
    DuquErrc code_;
};

inline constexpr std::string_view kControlDevice = "\\Device\\{624409B3-4CEF-41c0-8B81-7634279A41E5}";
inline constexpr std::string_view kAccessPoint = "\\Device\\Gpd0";
inline constexpr std::string_view kAccessLink = "\\DosDevices\\GpdDev";
inline constexpr std::string_view kLateAccessPoint = "\\Device\\Gpd1";

// Control codes understood by kControlDevice; the payload is the target pid.
inline constexpr std::uint32_t kRestoreEntrypoint = 0x000D0001;
inline constexpr std::uint32_t kRestoreProtection = 0x000D0002;

inline constexpr std::size_t kFunctionTableSize = 512;
inline constexpr std::size_t kSavedEntryLength = 12;
inline constexpr std::uint32_t kHalRetryLimit = 200;

// Rolling XOR, its own inverse: out[i] = in[i] ^ key ^ (i mod 256).
Bytes decrypt_blob(ByteView blob, std::uint8_t key);

// ---------------------------------------------------------------------------
// configuration

struct InjectionConfig {
    std::string target_process = "services.exe";
    std::string registry_key;
    Bytes payload; // still encrypted with the blob key

    friend bool operator==(const InjectionConfig&, const InjectionConfig&) = default;
};

// Wire form: "DQRC", key byte, then decrypt_blob(body, key) where body is
// three u32-length-prefixed fields: target, registry key, payload.
inline constexpr std::array<std::uint8_t, 4> kConfigMagic = {'D', 'Q', 'R', 'C'};

Bytes encode_config(const InjectionConfig& config, std::uint8_t key);
struct DecodedConfig {
    InjectionConfig config;
    std::uint8_t key = 0;
};
DecodedConfig decode_config(ByteView blob);

inline constexpr std::size_t kMaskLength = 32;

// Bytes at positions where mask is non-zero must agree with the reference.
struct MaskSpec {
    std::array<std::uint8_t, kMaskLength> mask{};
    std::array<std::uint8_t, kMaskLength> reference{};
};

// File form: 32 mask bytes then 32 reference bytes.
Bytes encode_mask(const MaskSpec& spec);
MaskSpec decode_mask(ByteView bytes);

// Canonical 20-byte system-call stub: mov eax, service; lea edx, [esp+4];
// pushfd; push 8; call rel32; ret arg_bytes.
Bytes syscall_stub(std::uint32_t service, std::uint32_t stub_address, std::uint32_t dispatcher,
                   std::uint16_t arg_bytes);

// Mask covering the opcode bytes of two consecutive syscall stubs and
// none of their immediates.
MaskSpec default_mask_spec();

// The ten kernel32 routines resolved for the injected code.
std::vector<std::string> default_import_names();

// ---------------------------------------------------------------------------
// static analysis helpers

struct LocatedFunction {
    std::uint32_t target = 0;    // resolved address of the unexported routine
    std::uint32_t call_site = 0; // the near call that reaches it
    std::uint32_t anchor = 0;    // near call to the known export
    std::uint32_t push_site = 0; // the push 104h between them
};

inline constexpr std::uint32_t kDefaultScanWindow = 64;

// Finds a call to `known_export`, a push 104h within `window` bytes after
// it, and the next near call within `window` bytes after the push.
// Throws DuquError{not_found}.
LocatedFunction locate_unexported(const pe::PeImage& image, std::string_view known_export,
                                  std::uint32_t window = kDefaultScanWindow);

struct Verdict {
    bool valid = false;
    std::string reason; // "ok", "range" or "mask"
};

inline constexpr std::uint32_t kDefaultKernelBase = 0x80000000;

Verdict validate_function(std::uint32_t address, ByteView first32, const MaskSpec& mask,
                          std::uint32_t kernel_base = kDefaultKernelBase);

// The hook written over the target entrypoint: mov eax, target; call eax.
std::array<std::uint8_t, 7> encode_hook(std::uint32_t target) noexcept;

// ---------------------------------------------------------------------------
// the driver

struct DuquOptions {
    std::string driver_name = "nfrd965";
    Bytes config_blob;
    Bytes stub1; // unstripped PE files; the driver carries stripped copies
    Bytes stub2;
    MaskSpec mask = default_mask_spec();
    std::uint32_t kernel_base = kDefaultKernelBase;
    std::uint32_t scan_window = kDefaultScanWindow;
    std::vector<std::string> supported_versions = {"5.1.2600"};
    std::vector<std::string> import_names = default_import_names();
};

enum class DuquState { created, halted, waiting_for_hal, armed, failed };

std::string_view to_string(DuquState state) noexcept;

// Launch block at the start of the second allocation (57 bytes): eleven
// dwords, the saved entrypoint bytes, one state byte. The payload follows.
struct LaunchBlock {
    static constexpr std::size_t kEntrypoint = 0;
    static constexpr std::size_t kStub1Base = 4;
    static constexpr std::size_t kStub2Address = 8;
    static constexpr std::size_t kStub2Size = 12;
    static constexpr std::size_t kPayloadSize = 16;
    static constexpr std::size_t kDriverHandle = 20;
    static constexpr std::size_t kNtdllHandle = 24;
    static constexpr std::size_t kKernel32Base = 28;
    static constexpr std::size_t kHostBase = 32;
    static constexpr std::size_t kPayloadBase = 36;
    static constexpr std::size_t kPayloadEntry = 40;
    static constexpr std::size_t kSavedBytes = 44;
    static constexpr std::size_t kState = 56;
    static constexpr std::size_t kSize = 57;
};

struct ResolvedImport {
    std::string name;
    std::uint32_t hash = 0;
    std::uint32_t address = 0;
};

// Per-target bookkeeping kept in the driver's shared structure.
struct Injection {
    std::uint32_t pid = 0;
    std::uint32_t image_base = 0;
    std::uint32_t entrypoint = 0;
    std::uint32_t stub_region = 0; // stub 1 mapped here, stub 2 after it
    std::uint32_t stub1_entry = 0; // hook target
    std::uint32_t stub2_address = 0;
    std::uint32_t launch_block = 0;
    std::uint32_t payload_size = 0;
    std::uint32_t driver_handle = 0;
    sim::Perm saved_perms = sim::Perm::none;
    std::optional<std::array<std::uint8_t, kSavedEntryLength>> saved_entry_bytes;
    std::vector<ResolvedImport> imports;
    bool hooked = false;
    bool payload_started = false;
    std::uint32_t host_base = 0;
    std::uint32_t payload_base = 0;
};

class DuquDriver {
public:
    DuquDriver(sim::Kernel& kernel, DuquOptions options);
    DuquDriver(const DuquDriver&) = delete;
    DuquDriver& operator=(const DuquDriver&) = delete;

    // Registers the driver and runs the boot-time part of initialization.
    // Throws DuquError{config_decrypt_failed} or DuquError{halted}.
    void boot_init();

    [[nodiscard]] DuquState state() const noexcept { return state_; }
    [[nodiscard]] std::optional<DuquErrc> last_error() const noexcept { return last_error_; }
    // How many times the hal.dll wait routine re-queued itself.
    [[nodiscard]] std::uint32_t hal_requeues() const noexcept { return hal_requeues_; }
    [[nodiscard]] const std::vector<std::uint8_t>& function_table() const noexcept { return function_table_; }
    [[nodiscard]] const InjectionConfig& config() const noexcept { return config_; }
    [[nodiscard]] std::optional<std::uint32_t> zw_allocate() const noexcept { return zw_allocate_; }
    [[nodiscard]] std::optional<std::uint32_t> zw_protect() const noexcept { return zw_protect_; }
    [[nodiscard]] const Injection* injection(std::uint32_t pid) const;
    // Stub-side milestones in order: PAYLOAD_STARTED, RESTORE_ENTRYPOINT, ...
    [[nodiscard]] const std::vector<std::string>& milestones() const noexcept { return milestones_; }

    // First notification for the target: checks and payload staging.
    // Returns false when the module is not the configured target.
    bool stage_injection(const sim::NotificationEvent& event);
    // kernel32.dll notification for a staged pid: imports and the hook.
    void hook_entrypoint(const sim::NotificationEvent& event);

private:
    bool wait_for_hal(std::uint32_t count);
    void complete_init();
    void locate_kernel_functions();
    void on_image_load(const sim::NotificationEvent& event);
    void run_stub(const sim::NativeContext& context);
    Bytes handle_control(const sim::DeviceRequest& request);
    struct Mapped {
        std::uint32_t base;
        std::uint32_t entry;
    };
    Mapped manual_map(std::uint32_t pid, ByteView file);
    void note(const std::string& text);

    sim::Kernel& kernel_;
    DuquOptions options_;
    sim::DriverHandle handle_{};
    DuquState state_ = DuquState::created;
    std::optional<DuquErrc> last_error_;
    std::uint32_t hal_requeues_ = 0;
    std::vector<std::uint8_t> function_table_;
    InjectionConfig config_;
    std::uint8_t key_ = 0;
    Bytes stub1_stripped_;
    Bytes stub2_stripped_;
    std::optional<std::uint32_t> zw_allocate_;
    std::optional<std::uint32_t> zw_protect_;
    std::map<std::uint32_t, Injection> injections_;
    std::vector<std::string> milestones_;
};

} // namespace duqusim::duqu

#endif // DUQUSIM_DUQU_REPLICA_HPP
