// Deterministic single-threaded model of the kernel services both drivers
// rely on: per-process virtual memory with R/W/X permissions, a PE loader,
// process/image notifications delivered in driver registration order,
// device objects with a synchronous request channel, and boot-time
// reinitialization callbacks.
//
// Nothing here executes x86. "Running" a process means fetching the bytes
// at its entrypoint: a `mov eax, imm32; call eax` whose target has a
// registered native routine transfers control to that host routine.

#ifndef DUQUSIM_SIMKERNEL_HPP
#define DUQUSIM_SIMKERNEL_HPP

#include "duqusim/pe_format.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace duqusim::sim {

using pe::Bytes;
using pe::ByteView;

enum class Perm : std::uint8_t {
    none = 0,
    read = 1,
    write = 2,
    execute = 4,
};

constexpr Perm operator|(Perm a, Perm b) noexcept
{
    return static_cast<Perm>(static_cast<std::uint8_t>(a) | static_cast<std::uint8_t>(b));
}

constexpr Perm operator&(Perm a, Perm b) noexcept
{
    return static_cast<Perm>(static_cast<std::uint8_t>(a) & static_cast<std::uint8_t>(b));
}

constexpr bool has_all(Perm set, Perm required) noexcept
{
    return (set & required) == required;
}

inline constexpr Perm kR = Perm::read;
inline constexpr Perm kRW = Perm::read | Perm::write;
inline constexpr Perm kRX = Perm::read | Perm::execute;
inline constexpr Perm kRWX = Perm::read | Perm::write | Perm::execute;

// "R-X" style rendering.
std::string to_string(Perm perms);

enum class KernelErrc {
    duplicate_name,
    duplicate_device,
    no_such_process,
    no_such_device,
    access_violation,
    unmapped_address,
    spans_regions,
    address_space_exhausted,
    image_not_relocatable,
    invalid_argument,
    reentrant_call,
};

std::string_view to_string(KernelErrc code) noexcept;

class KernelError : public std::runtime_error {
public:
    KernelError(KernelErrc code, const std::string& detail, std::uint32_t address = 0, Perm missing = Perm::none);

    [[nodiscard]] KernelErrc code() const noexcept { return code_; }
    // Faulting address and missing permission for access violations.
    [[nodiscard]] std::uint32_t address() const noexcept { return address_; }
    [[nodiscard]] Perm missing() const noexcept { return missing_; }

private:
    KernelErrc code_;
    std::uint32_t address_;
    Perm missing_;
};

struct MemoryRegion {
    std::uint32_t base = 0;
    Bytes bytes;
    Perm perms = Perm::none;
    std::string tag;

    [[nodiscard]] std::uint64_t end() const noexcept { return std::uint64_t{base} + bytes.size(); }
    [[nodiscard]] bool contains(std::uint32_t address) const noexcept
    {
        return address >= base && address < end();
    }
};

struct LoadedModule {
    std::string name;
    std::string path;
    std::uint32_t base = 0;
    std::uint32_t size = 0;
};

struct Peb {
    std::uint32_t address = 0;
    std::uint32_t image_base_address = 0;
};

struct SimProcess {
    std::uint32_t pid = 0;
    std::string name;
    std::string image_path;
    std::uint32_t image_base = 0;
    std::uint32_t peb_address = 0;
    std::vector<MemoryRegion> regions; // sorted by base, disjoint
    std::vector<LoadedModule> modules; // modules[0] is the main image
    bool alive = true;
};

enum class EventKind { process_create, process_exit, image_load };

std::string_view to_string(EventKind kind) noexcept;

struct NotificationEvent {
    EventKind kind = EventKind::image_load;
    std::uint32_t pid = 0;
    std::string module_name; // image_load only
    std::string module_path; // image_load only
    std::uint32_t base = 0;  // image_load only: where the loader mapped it

    friend bool operator==(const NotificationEvent&, const NotificationEvent&) = default;
};

struct DeviceRequest {
    std::string device;
    std::uint32_t code = 0;
    Bytes payload;
};

enum class BootMode { normal, debug, failsafe };

std::string_view to_string(BootMode mode) noexcept;
std::optional<BootMode> parse_boot_mode(std::string_view text) noexcept;

struct LogLine {
    std::uint64_t seq = 0;
    std::string source;
    std::string text;
};

struct DriverHandle {
    std::size_t index = 0;
};

struct NativeContext {
    std::uint32_t pid = 0;
    std::uint32_t address = 0;        // where control arrived (what call-pop recovers)
    std::uint32_t return_address = 0; // pushed by the `call eax`
};

using NotifyRoutine = std::function<void(const NotificationEvent&)>;
using DeviceHandler = std::function<Bytes(const DeviceRequest&)>;
// Receives the 1-based invocation count; returns true to be queued again.
using ReinitRoutine = std::function<bool(std::uint32_t count)>;
using NativeRoutine = std::function<void(const NativeContext&)>;

struct ProcessOptions {
    std::optional<std::uint32_t> base; // overrides the image's preferred base
    std::optional<std::uint32_t> pid;
    std::string path;                  // default: \WINDOWS\system32\<name>
};

struct ExecutionResult {
    std::uint32_t entrypoint = 0;
    std::vector<std::uint32_t> native_calls; // targets entered, in order
    bool reached_original_code = false;
};

class Kernel {
public:
    static constexpr std::uint32_t kSystemPid = 4;
    static constexpr std::uint32_t kPageSize = 0x1000;
    static constexpr std::uint32_t kAllocationGranularity = 0x10000;
    static constexpr std::uint32_t kAllocationFloor = 0x000A0000;
    static constexpr std::uint32_t kPebAddress = 0x7FFD6000;
    static constexpr std::uint32_t kPebImageBaseOffset = 0x08;

    Kernel();

    void set_boot_mode(BootMode mode) noexcept { boot_mode_ = mode; }
    [[nodiscard]] BootMode boot_mode() const noexcept { return boot_mode_; }
    void set_os_version(std::string version) { os_version_ = std::move(version); }
    [[nodiscard]] const std::string& os_version() const noexcept { return os_version_; }

    // Drivers and devices.
    DriverHandle register_driver(const std::string& name);
    void set_process_notify(DriverHandle driver, NotifyRoutine routine);
    void set_image_notify(DriverHandle driver, NotifyRoutine routine);
    void create_device(DriverHandle driver, const std::string& path, DeviceHandler handler);
    void create_symbolic_link(const std::string& link, const std::string& target);
    [[nodiscard]] bool device_exists(const std::string& path) const;
    [[nodiscard]] std::vector<std::string> driver_order() const;
    [[nodiscard]] std::size_t device_count() const noexcept { return devices_.size(); }
    [[nodiscard]] std::size_t notify_routine_count() const noexcept;

    void queue_reinitialization(DriverHandle driver, ReinitRoutine routine);
    // Runs every queued routine once; returns how many ran.
    std::size_t run_reinitialization();
    [[nodiscard]] std::size_t pending_reinitializations() const noexcept { return reinit_queue_.size(); }

    Bytes send_device_request(const DeviceRequest& request);
    std::uint32_t open_device(std::uint32_t pid, const std::string& path);

    // Processes and images.
    const SimProcess& create_process(const std::string& name, ByteView image, const ProcessOptions& options = {});
    std::uint32_t load_module(std::uint32_t pid, const std::string& name, ByteView image,
                              std::optional<std::uint32_t> base = std::nullopt, const std::string& path = {});
    void terminate_process(std::uint32_t pid);

    [[nodiscard]] const SimProcess& process(std::uint32_t pid) const;
    [[nodiscard]] const SimProcess* find_process(std::uint32_t pid) const noexcept;
    [[nodiscard]] bool alive(std::uint32_t pid) const noexcept;
    [[nodiscard]] std::optional<std::uint32_t> find_live_process(std::string_view name) const;
    [[nodiscard]] const std::vector<LoadedModule>& system_modules() const;
    [[nodiscard]] const LoadedModule* find_module(std::uint32_t pid, std::string_view name) const;
    [[nodiscard]] std::string process_image_path(std::uint32_t pid) const;
    // Reads the PEB from process memory, as a driver handed only a pid would.
    [[nodiscard]] Peb query_peb(std::uint32_t pid) const;
    // Rebuilds a file-layout PE from the image mapped at `base`.
    [[nodiscard]] Bytes dump_module(std::uint32_t pid, std::uint32_t base) const;

    // Memory.
    [[nodiscard]] Bytes read_memory(std::uint32_t pid, std::uint32_t address, std::uint32_t length) const;
    void write_memory(std::uint32_t pid, std::uint32_t address, ByteView bytes);
    std::uint32_t allocate_memory(std::uint32_t pid, std::uint32_t size, Perm perms,
                                  const std::string& tag = "injected");
    Perm protect_memory(std::uint32_t pid, std::uint32_t address, std::uint32_t length, Perm perms);
    [[nodiscard]] std::optional<Perm> query_protection(std::uint32_t pid, std::uint32_t address) const;
    [[nodiscard]] const MemoryRegion* region_at(std::uint32_t pid, std::uint32_t address) const;

    // Execution.
    void register_native_routine(std::uint32_t pid, std::uint32_t address, NativeRoutine routine);
    ExecutionResult execute_entrypoint(std::uint32_t pid);
    [[nodiscard]] std::uint32_t entrypoint(std::uint32_t pid) const;

    // Log stream shared by the kernel and every driver.
    void log(const std::string& source, const std::string& text);
    [[nodiscard]] const std::vector<LogLine>& log_lines() const noexcept { return log_; }
    [[nodiscard]] const std::vector<NotificationEvent>& event_history() const noexcept { return history_; }

private:
    struct DriverRecord {
        std::string name;
        NotifyRoutine on_process;
        NotifyRoutine on_image;
    };
    struct DeviceRecord {
        std::size_t driver;
        DeviceHandler handler;
    };
    struct ReinitEntry {
        std::size_t driver;
        ReinitRoutine routine;
        std::uint32_t count;
    };

    SimProcess& live_process(std::uint32_t pid);
    const SimProcess& live_process(std::uint32_t pid) const;
    void check_driver(DriverHandle driver) const;
    void check_not_dispatching(const char* what) const;
    void dispatch(NotificationEvent event);
    void deliver(const NotificationEvent& event);

    std::uint32_t map_image(SimProcess& proc, const std::string& name, const std::string& path, ByteView image,
                            std::optional<std::uint32_t> requested);
    std::uint32_t find_free_base(const SimProcess& proc, std::uint32_t start, std::uint64_t size) const;
    static bool range_free(const SimProcess& proc, std::uint64_t base, std::uint64_t size);
    static void insert_region(SimProcess& proc, MemoryRegion region);
    Bytes peek(const SimProcess& proc, std::uint32_t address, std::uint32_t length) const;
    void access(const SimProcess& proc, std::uint32_t address, std::uint32_t length, Perm required) const;

    BootMode boot_mode_ = BootMode::normal;
    std::string os_version_ = "5.1.2600";
    std::vector<DriverRecord> drivers_;
    std::map<std::string, DeviceRecord> devices_;
    std::map<std::string, std::string> links_;
    std::deque<ReinitEntry> reinit_queue_;
    std::map<std::uint32_t, SimProcess> processes_;
    std::map<std::pair<std::uint32_t, std::uint32_t>, NativeRoutine> native_routines_;
    std::map<std::uint32_t, std::string> handles_;
    std::uint32_t next_handle_ = 0x7C;
    std::uint32_t next_pid_ = 0x100;
    bool dispatching_ = false;
    std::deque<NotificationEvent> pending_;
    std::vector<NotificationEvent> history_;
    std::vector<LogLine> log_;
};

// Formatting helpers shared by the log producers.
std::string hex8(std::uint32_t value);     // 0x0101247f
std::string hex_short(std::uint32_t value); // 0x914
std::string byte_list(ByteView bytes);      // 0x6a 0x70 ...

bool iequals(std::string_view a, std::string_view b) noexcept;
// Final component of a '\\'- or '/'-separated path.
std::string_view basename(std::string_view path) noexcept;

} // namespace duqusim::sim

#endif // DUQUSIM_SIMKERNEL_HPP
