#include "duqusim/simkernel.hpp"

#include "duqusim/pe_builder.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

namespace duqusim::sim {

namespace {

constexpr std::uint64_t kAddressSpaceEnd = 0x100000000ULL;
constexpr std::size_t kHookLength = 7;

[[noreturn]] void fail(KernelErrc code, const std::string& detail, std::uint32_t address = 0,
                       Perm missing = Perm::none)
{
    throw KernelError(code, detail, address, missing);
}

Perm section_perms(std::uint32_t characteristics)
{
    Perm p = Perm::none;
    if (characteristics & pe::kScnMemRead)
        p = p | Perm::read;
    if (characteristics & pe::kScnMemWrite)
        p = p | Perm::write;
    if (characteristics & pe::kScnMemExecute)
        p = p | Perm::execute;
    return p == Perm::none ? kR : p;
}

std::string default_path(const std::string& name)
{
    return "\\WINDOWS\\system32\\" + name;
}

// Perm bits in `required` that `held` lacks.
Perm missing_bits(Perm held, Perm required)
{
    return static_cast<Perm>(static_cast<std::uint8_t>(required) & ~static_cast<std::uint8_t>(held));
}

bool is_call_eax_hook(ByteView bytes)
{
    return bytes.size() >= kHookLength && bytes[0] == 0xB8 && bytes[5] == 0xFF && bytes[6] == 0xD0;
}

class DispatchGuard {
public:
    explicit DispatchGuard(bool& flag) : flag_(flag) { flag_ = true; }
    ~DispatchGuard() { flag_ = false; }
    DispatchGuard(const DispatchGuard&) = delete;
    DispatchGuard& operator=(const DispatchGuard&) = delete;

private:
    bool& flag_;
};

} // namespace

std::string to_string(Perm perms)
{
    std::string out = "---";
    if (has_all(perms, Perm::read))
        out[0] = 'R';
    if (has_all(perms, Perm::write))
        out[1] = 'W';
    if (has_all(perms, Perm::execute))
        out[2] = 'X';
    return out;
}

std::string_view to_string(KernelErrc code) noexcept
{
    switch (code) {
    case KernelErrc::duplicate_name: return "DuplicateName";
    case KernelErrc::duplicate_device: return "DuplicateDevice";
    case KernelErrc::no_such_process: return "NoSuchProcess";
    case KernelErrc::no_such_device: return "NoSuchDevice";
    case KernelErrc::access_violation: return "AccessViolation";
    case KernelErrc::unmapped_address: return "UnmappedAddress";
    case KernelErrc::spans_regions: return "SpansRegions";
    case KernelErrc::address_space_exhausted: return "AddressSpaceExhausted";
    case KernelErrc::image_not_relocatable: return "ImageNotRelocatable";
    case KernelErrc::invalid_argument: return "InvalidArgument";
    case KernelErrc::reentrant_call: return "ReentrantCall";
    }
    return "Unknown";
}

std::string_view to_string(EventKind kind) noexcept
{
    switch (kind) {
    case EventKind::process_create: return "PROCESS_CREATE";
    case EventKind::process_exit: return "PROCESS_EXIT";
    case EventKind::image_load: return "IMAGE_LOAD";
    }
    return "UNKNOWN";
}

std::string_view to_string(BootMode mode) noexcept
{
    switch (mode) {
    case BootMode::normal: return "normal";
    case BootMode::debug: return "debug";
    case BootMode::failsafe: return "failsafe";
    }
    return "normal";
}

std::optional<BootMode> parse_boot_mode(std::string_view text) noexcept
{
    if (text == "normal")
        return BootMode::normal;
    if (text == "debug")
        return BootMode::debug;
    if (text == "failsafe")
        return BootMode::failsafe;
    return std::nullopt;
}

KernelError::KernelError(KernelErrc code, const std::string& detail, std::uint32_t address, Perm missing)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code), address_(address),
      missing_(missing)
{
}

std::string hex8(std::uint32_t value)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", value);
    return buf;
}

std::string hex_short(std::uint32_t value)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%x", value);
    return buf;
}

std::string byte_list(ByteView bytes)
{
    std::string out;
    char buf[8];
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        std::snprintf(buf, sizeof buf, "0x%02x", bytes[i]);
        if (i != 0)
            out += ' ';
        out += buf;
    }
    return out;
}

bool iequals(std::string_view a, std::string_view b) noexcept
{
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
               return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
           });
}

std::string_view basename(std::string_view path) noexcept
{
    const auto slash = path.find_last_of("\\/");
    return slash == std::string_view::npos ? path : path.substr(slash + 1);
}

Kernel::Kernel()
{
    SimProcess system;
    system.pid = kSystemPid;
    system.name = "System";
    system.image_path = "System";
    processes_.emplace(kSystemPid, std::move(system));
}

// ---------------------------------------------------------------------------
// drivers, devices, reinitialization

void Kernel::check_driver(DriverHandle driver) const
{
    if (driver.index >= drivers_.size())
        fail(KernelErrc::invalid_argument, "unknown driver handle");
}

DriverHandle Kernel::register_driver(const std::string& name)
{
    for (const DriverRecord& d : drivers_) {
        if (d.name == name)
            fail(KernelErrc::duplicate_name, "driver '" + name + "' already registered");
    }
    drivers_.push_back({name, {}, {}});
    log("kernel", "[kernel] driver " + name + " loaded");
    return {drivers_.size() - 1};
}

void Kernel::set_process_notify(DriverHandle driver, NotifyRoutine routine)
{
    check_driver(driver);
    drivers_[driver.index].on_process = std::move(routine);
}

void Kernel::set_image_notify(DriverHandle driver, NotifyRoutine routine)
{
    check_driver(driver);
    drivers_[driver.index].on_image = std::move(routine);
}

std::size_t Kernel::notify_routine_count() const noexcept
{
    std::size_t n = 0;
    for (const DriverRecord& d : drivers_)
        n += (d.on_process ? 1 : 0) + (d.on_image ? 1 : 0);
    return n;
}

void Kernel::create_device(DriverHandle driver, const std::string& path, DeviceHandler handler)
{
    check_driver(driver);
    if (devices_.contains(path) || links_.contains(path))
        fail(KernelErrc::duplicate_device, "device '" + path + "' already exists");
    devices_.emplace(path, DeviceRecord{driver.index, std::move(handler)});
}

void Kernel::create_symbolic_link(const std::string& link, const std::string& target)
{
    if (devices_.contains(link) || links_.contains(link))
        fail(KernelErrc::duplicate_device, "name '" + link + "' already exists");
    if (!devices_.contains(target))
        fail(KernelErrc::no_such_device, "link target '" + target + "' does not exist");
    links_.emplace(link, target);
}

bool Kernel::device_exists(const std::string& path) const
{
    return devices_.contains(path) || links_.contains(path);
}

std::vector<std::string> Kernel::driver_order() const
{
    std::vector<std::string> out;
    for (const DriverRecord& d : drivers_)
        out.push_back(d.name);
    return out;
}

void Kernel::queue_reinitialization(DriverHandle driver, ReinitRoutine routine)
{
    check_driver(driver);
    reinit_queue_.push_back({driver.index, std::move(routine), 1});
}

std::size_t Kernel::run_reinitialization()
{
    std::deque<ReinitEntry> batch;
    batch.swap(reinit_queue_);
    const std::size_t ran = batch.size();
    for (ReinitEntry& entry : batch) {
        if (entry.routine(entry.count)) {
            ++entry.count;
            reinit_queue_.push_back(std::move(entry));
        }
    }
    return ran;
}

Bytes Kernel::send_device_request(const DeviceRequest& request)
{
    std::string path = request.device;
    if (auto link = links_.find(path); link != links_.end())
        path = link->second;
    const auto device = devices_.find(path);
    if (device == devices_.end())
        fail(KernelErrc::no_such_device, "no device '" + request.device + "'");
    log("kernel", "[kernel] device request " + request.device + " code=" + hex8(request.code));
    return device->second.handler(request);
}

std::uint32_t Kernel::open_device(std::uint32_t pid, const std::string& path)
{
    (void)live_process(pid);
    if (!device_exists(path))
        fail(KernelErrc::no_such_device, "no device '" + path + "'");
    const std::uint32_t handle = next_handle_;
    next_handle_ += 4;
    handles_.emplace(handle, path);
    return handle;
}

// ---------------------------------------------------------------------------
// notification dispatch

void Kernel::check_not_dispatching(const char* what) const
{
    if (dispatching_)
        fail(KernelErrc::reentrant_call, std::string(what) + " called from a notification routine");
}

void Kernel::dispatch(NotificationEvent event)
{
    pending_.push_back(std::move(event));
    if (dispatching_)
        return;
    DispatchGuard guard(dispatching_);
    try {
        while (!pending_.empty()) {
            const NotificationEvent next = std::move(pending_.front());
            pending_.pop_front();
            history_.push_back(next);
            deliver(next);
        }
    } catch (...) {
        pending_.clear();
        throw;
    }
}

void Kernel::deliver(const NotificationEvent& event)
{
    for (const DriverRecord& driver : drivers_) {
        const NotifyRoutine& routine = event.kind == EventKind::image_load ? driver.on_image : driver.on_process;
        if (!routine)
            continue;
        // A driver earlier in the order may have killed the process.
        if (event.kind != EventKind::process_exit && !alive(event.pid))
            break;
        routine(event);
    }
}

// ---------------------------------------------------------------------------
// processes and images

SimProcess& Kernel::live_process(std::uint32_t pid)
{
    auto it = processes_.find(pid);
    if (it == processes_.end() || !it->second.alive)
        fail(KernelErrc::no_such_process, "no live process " + hex_short(pid));
    return it->second;
}

const SimProcess& Kernel::live_process(std::uint32_t pid) const
{
    auto it = processes_.find(pid);
    if (it == processes_.end() || !it->second.alive)
        fail(KernelErrc::no_such_process, "no live process " + hex_short(pid));
    return it->second;
}

const SimProcess& Kernel::process(std::uint32_t pid) const
{
    const SimProcess* p = find_process(pid);
    if (p == nullptr)
        fail(KernelErrc::no_such_process, "no process " + hex_short(pid));
    return *p;
}

const SimProcess* Kernel::find_process(std::uint32_t pid) const noexcept
{
    auto it = processes_.find(pid);
    return it == processes_.end() ? nullptr : &it->second;
}

bool Kernel::alive(std::uint32_t pid) const noexcept
{
    const SimProcess* p = find_process(pid);
    return p != nullptr && p->alive;
}

std::optional<std::uint32_t> Kernel::find_live_process(std::string_view name) const
{
    std::optional<std::uint32_t> found;
    for (const auto& [pid, proc] : processes_) {
        if (proc.alive && iequals(proc.name, name))
            found = pid;
    }
    return found;
}

const std::vector<LoadedModule>& Kernel::system_modules() const
{
    return processes_.at(kSystemPid).modules;
}

const LoadedModule* Kernel::find_module(std::uint32_t pid, std::string_view name) const
{
    const SimProcess* p = find_process(pid);
    if (p == nullptr)
        return nullptr;
    for (const LoadedModule& m : p->modules) {
        if (iequals(m.name, name))
            return &m;
    }
    return nullptr;
}

std::string Kernel::process_image_path(std::uint32_t pid) const
{
    return live_process(pid).image_path;
}

Peb Kernel::query_peb(std::uint32_t pid) const
{
    const SimProcess& proc = live_process(pid);
    if (proc.peb_address == 0)
        fail(KernelErrc::unmapped_address, "process " + hex_short(pid) + " has no PEB");
    const Bytes field = read_memory(pid, proc.peb_address + kPebImageBaseOffset, 4);
    return {proc.peb_address, pe::load_u32(field, 0)};
}

const SimProcess& Kernel::create_process(const std::string& name, ByteView image, const ProcessOptions& options)
{
    check_not_dispatching("create_process");
    (void)pe::parse_pe(image); // report format errors before any state changes

    std::uint32_t pid = 0;
    if (options.pid) {
        pid = *options.pid;
        if (pid == 0 || alive(pid))
            fail(KernelErrc::invalid_argument, "pid " + hex_short(pid) + " is in use");
    } else {
        do {
            pid = next_pid_;
            next_pid_ += 4;
        } while (processes_.contains(pid));
    }

    SimProcess proc;
    proc.pid = pid;
    proc.name = name;
    proc.image_path = options.path.empty() ? default_path(name) : options.path;
    proc.peb_address = kPebAddress;
    insert_region(proc, {kPebAddress, Bytes(kPageSize, 0), kRW, "peb"});
    proc.image_base = map_image(proc, name, proc.image_path, image, options.base);
    for (MemoryRegion& r : proc.regions) {
        if (r.base == kPebAddress)
            pe::store_u32(r.bytes, kPebImageBaseOffset, proc.image_base);
    }

    processes_.insert_or_assign(pid, std::move(proc));
    const SimProcess& created = processes_.at(pid);
    log("kernel", "[kernel] create process " + name + " pid=" + hex_short(pid) + " base=" +
                      hex8(created.image_base) + " entry=" + hex8(entrypoint(pid)));

    dispatch({EventKind::process_create, pid, {}, {}, 0});
    const LoadedModule& main = created.modules.front();
    dispatch({EventKind::image_load, pid, main.name, main.path, main.base});
    return processes_.at(pid);
}

std::uint32_t Kernel::load_module(std::uint32_t pid, const std::string& name, ByteView image,
                                  std::optional<std::uint32_t> base, const std::string& path)
{
    check_not_dispatching("load_module");
    SimProcess& proc = live_process(pid);
    const std::string module_path = path.empty() ? default_path(name) : path;
    const std::uint32_t mapped = map_image(proc, name, module_path, image, base);
    dispatch({EventKind::image_load, pid, name, module_path, mapped});
    return mapped;
}

std::uint32_t Kernel::map_image(SimProcess& proc, const std::string& name, const std::string& path, ByteView bytes,
                                std::optional<std::uint32_t> requested)
{
    const pe::PeImage image = pe::parse_pe(bytes);
    const std::uint32_t size = pe::align_up(image.nt.size_of_image, kPageSize);
    const std::uint32_t preferred = requested.value_or(image.nt.image_base);
    if (preferred % kPageSize != 0)
        fail(KernelErrc::invalid_argument, "image base " + hex8(preferred) + " is not page aligned");

    std::uint32_t base = preferred;
    if (!range_free(proc, preferred, size)) {
        if (image.relocations.empty())
            fail(KernelErrc::image_not_relocatable,
                 name + " cannot be moved from occupied base " + hex8(preferred) + " (no relocations)");
        base = find_free_base(proc, preferred, size);
    }

    Bytes mapped(size, 0);
    const std::size_t header_bytes = std::min<std::size_t>({image.nt.size_of_headers, bytes.size(), size});
    std::copy_n(bytes.begin(), header_bytes, mapped.begin());
    for (const pe::Section& s : image.sections) {
        if (s.virtual_address >= size)
            continue;
        const std::size_t room = size - s.virtual_address;
        const std::size_t n = std::min<std::size_t>({s.raw_size, pe::align_up(s.mapped_size(), kPageSize), room});
        std::copy_n(bytes.begin() + s.raw_offset, n, mapped.begin() + s.virtual_address);
    }
    if (base != image.nt.image_base)
        pe::apply_relocations(mapped, base, image.nt.image_base, image.relocations);
    const std::size_t image_base_field = image.dos.e_lfanew + pe::kFileHeaderSize + 28;
    if (image_base_field + 4 <= mapped.size())
        pe::store_u32(mapped, image_base_field, base);

    // Slice the flat image into header and per-section regions.
    struct Cut {
        std::uint32_t start, end;
        Perm perms;
    };
    std::vector<Cut> cuts;
    cuts.push_back({0, std::min(pe::align_up(image.nt.size_of_headers, kPageSize), size), kR});
    std::vector<pe::Section> ordered = image.sections;
    std::sort(ordered.begin(), ordered.end(),
              [](const pe::Section& a, const pe::Section& b) { return a.virtual_address < b.virtual_address; });
    for (const pe::Section& s : ordered) {
        const std::uint32_t start = std::max(s.virtual_address, cuts.back().end);
        const std::uint32_t end =
            std::min<std::uint32_t>(size, pe::align_up(s.virtual_address + s.mapped_size(), kPageSize));
        if (start < end)
            cuts.push_back({start, end, section_perms(s.characteristics)});
    }
    const std::string tag = "image:" + name;
    for (const Cut& c : cuts) {
        if (c.start >= c.end)
            continue;
        insert_region(proc, {base + c.start, Bytes(mapped.begin() + c.start, mapped.begin() + c.end), c.perms, tag});
    }
    proc.modules.push_back({name, path, base, size});

    std::string line = "[kernel] map " + name + " pid=" + hex_short(proc.pid) + " base=" + hex8(base);
    if (base != image.nt.image_base)
        line += " (relocated from " + hex8(image.nt.image_base) + ")";
    log("kernel", line);
    return base;
}

bool Kernel::range_free(const SimProcess& proc, std::uint64_t base, std::uint64_t size)
{
    if (size == 0 || base + size > kAddressSpaceEnd)
        return false;
    for (const MemoryRegion& r : proc.regions) {
        if (base < r.end() && r.base < base + size)
            return false;
    }
    return true;
}

std::uint32_t Kernel::find_free_base(const SimProcess& proc, std::uint32_t start, std::uint64_t size) const
{
    auto scan = [&](std::uint64_t from, std::uint64_t to) -> std::optional<std::uint32_t> {
        for (std::uint64_t b = pe::align_up(static_cast<std::uint32_t>(from), kAllocationGranularity);
             b < to && b + size <= kAddressSpaceEnd; b += kAllocationGranularity) {
            if (range_free(proc, b, size))
                return static_cast<std::uint32_t>(b);
        }
        return std::nullopt;
    };
    if (auto b = scan(std::max(start, kAllocationFloor), kAddressSpaceEnd))
        return *b;
    if (auto b = scan(kAllocationFloor, start))
        return *b;
    fail(KernelErrc::address_space_exhausted, "no free range of " + hex8(static_cast<std::uint32_t>(size)) +
                                                  " bytes in process " + hex_short(proc.pid));
}

void Kernel::insert_region(SimProcess& proc, MemoryRegion region)
{
    auto at = std::lower_bound(proc.regions.begin(), proc.regions.end(), region.base,
                               [](const MemoryRegion& r, std::uint32_t b) { return r.base < b; });
    proc.regions.insert(at, std::move(region));
}

void Kernel::terminate_process(std::uint32_t pid)
{
    SimProcess& proc = live_process(pid);
    proc.alive = false;
    for (auto it = native_routines_.begin(); it != native_routines_.end();) {
        it = it->first.first == pid ? native_routines_.erase(it) : std::next(it);
    }
    log("kernel", "[kernel] terminate pid=" + hex_short(pid) + " (" + proc.name + ")");
    dispatch({EventKind::process_exit, pid, {}, {}, 0});
}

Bytes Kernel::dump_module(std::uint32_t pid, std::uint32_t base) const
{
    const SimProcess& proc = process(pid);
    const MemoryRegion* header = region_at(pid, base);
    if (header == nullptr || header->base != base)
        fail(KernelErrc::unmapped_address, "no image mapped at " + hex8(base));
    const Bytes& h = header->bytes;
    auto need = [&](std::size_t end) {
        if (end > h.size())
            fail(KernelErrc::invalid_argument, "image headers at " + hex8(base) + " are malformed");
    };
    need(pe::kDosHeaderSize);
    const std::uint32_t lfanew = pe::load_u32(h, pe::kLfanewOffset);
    need(std::size_t{lfanew} + pe::kFileHeaderSize);
    const std::uint16_t count = pe::load_u16(h, lfanew + 6);
    const std::uint16_t opt_size = pe::load_u16(h, lfanew + 20);
    const std::size_t table = std::size_t{lfanew} + pe::kFileHeaderSize + opt_size;
    need(table + std::size_t{count} * pe::kSectionHeaderSize);
    const std::uint32_t size_of_headers = pe::load_u32(h, lfanew + pe::kFileHeaderSize + 60);

    Bytes file(std::min<std::size_t>(size_of_headers, h.size()), 0);
    std::copy_n(h.begin(), file.size(), file.begin());
    for (std::uint16_t i = 0; i < count; ++i) {
        const std::size_t sh = table + i * pe::kSectionHeaderSize;
        const std::uint32_t vsize = pe::load_u32(h, sh + 8);
        const std::uint32_t va = pe::load_u32(h, sh + 12);
        const std::uint32_t raw_size = pe::load_u32(h, sh + 16);
        const std::uint32_t raw_offset = pe::load_u32(h, sh + 20);
        if (file.size() < std::size_t{raw_offset} + raw_size)
            file.resize(std::size_t{raw_offset} + raw_size, 0);
        const std::uint32_t mapped = std::min(raw_size, pe::align_up(vsize != 0 ? vsize : raw_size, kPageSize));
        if (mapped == 0)
            continue;
        const Bytes body = peek(proc, base + va, mapped);
        std::copy(body.begin(), body.end(), file.begin() + raw_offset);
    }
    return file;
}

// ---------------------------------------------------------------------------
// memory

const MemoryRegion* Kernel::region_at(std::uint32_t pid, std::uint32_t address) const
{
    const SimProcess* proc = find_process(pid);
    if (proc == nullptr)
        return nullptr;
    for (const MemoryRegion& r : proc->regions) {
        if (r.contains(address))
            return &r;
    }
    return nullptr;
}

std::optional<Perm> Kernel::query_protection(std::uint32_t pid, std::uint32_t address) const
{
    const MemoryRegion* r = region_at(pid, address);
    if (r == nullptr)
        return std::nullopt;
    return r->perms;
}

void Kernel::access(const SimProcess& proc, std::uint32_t address, std::uint32_t length, Perm required) const
{
    const std::uint64_t end = std::uint64_t{address} + length;
    if (end > kAddressSpaceEnd)
        fail(KernelErrc::unmapped_address, "span wraps the address space", address);
    std::uint64_t cursor = address;
    while (cursor < end) {
        const auto at = static_cast<std::uint32_t>(cursor);
        const MemoryRegion* region = nullptr;
        for (const MemoryRegion& r : proc.regions) {
            if (r.contains(at)) {
                region = &r;
                break;
            }
        }
        if (region == nullptr)
            fail(KernelErrc::unmapped_address, "address " + hex8(at) + " is not mapped", at);
        if (!has_all(region->perms, required)) {
            const Perm missing = missing_bits(region->perms, required);
            fail(KernelErrc::access_violation,
                 "address " + hex8(at) + " is " + to_string(region->perms) + ", missing " + to_string(missing), at,
                 missing);
        }
        cursor = region->end();
    }
}

Bytes Kernel::peek(const SimProcess& proc, std::uint32_t address, std::uint32_t length) const
{
    access(proc, address, length, Perm::none);
    Bytes out;
    out.reserve(length);
    std::uint64_t cursor = address;
    const std::uint64_t end = std::uint64_t{address} + length;
    for (const MemoryRegion& r : proc.regions) {
        if (cursor >= end)
            break;
        if (!r.contains(static_cast<std::uint32_t>(cursor)))
            continue;
        const std::uint64_t stop = std::min(end, r.end());
        out.insert(out.end(), r.bytes.begin() + (cursor - r.base), r.bytes.begin() + (stop - r.base));
        cursor = stop;
    }
    return out;
}

Bytes Kernel::read_memory(std::uint32_t pid, std::uint32_t address, std::uint32_t length) const
{
    const SimProcess& proc = live_process(pid);
    access(proc, address, length, Perm::read);
    return peek(proc, address, length);
}

void Kernel::write_memory(std::uint32_t pid, std::uint32_t address, ByteView bytes)
{
    SimProcess& proc = live_process(pid);
    const auto length = static_cast<std::uint32_t>(bytes.size());
    access(proc, address, length, Perm::write);
    std::uint64_t cursor = address;
    const std::uint64_t end = std::uint64_t{address} + length;
    for (MemoryRegion& r : proc.regions) {
        if (cursor >= end)
            break;
        if (!r.contains(static_cast<std::uint32_t>(cursor)))
            continue;
        const std::uint64_t stop = std::min(end, r.end());
        std::copy(bytes.begin() + (cursor - address), bytes.begin() + (stop - address),
                  r.bytes.begin() + (cursor - r.base));
        cursor = stop;
    }
}

std::uint32_t Kernel::allocate_memory(std::uint32_t pid, std::uint32_t size, Perm perms, const std::string& tag)
{
    SimProcess& proc = live_process(pid);
    if (size == 0)
        fail(KernelErrc::invalid_argument, "allocation of zero bytes");
    const std::uint32_t base = find_free_base(proc, kAllocationFloor, size);
    insert_region(proc, {base, Bytes(size, 0), perms, tag});
    return base;
}

Perm Kernel::protect_memory(std::uint32_t pid, std::uint32_t address, std::uint32_t length, Perm perms)
{
    SimProcess& proc = live_process(pid);
    if (length == 0)
        fail(KernelErrc::invalid_argument, "protect of zero bytes");
    auto it = std::find_if(proc.regions.begin(), proc.regions.end(),
                           [&](const MemoryRegion& r) { return r.contains(address); });
    if (it == proc.regions.end())
        fail(KernelErrc::unmapped_address, "address " + hex8(address) + " is not mapped", address);
    const std::uint64_t end = std::uint64_t{address} + length;
    if (end > it->end()) {
        const auto next = std::next(it);
        if (next != proc.regions.end() && next->base == it->end())
            fail(KernelErrc::spans_regions, "span " + hex8(address) + "+" + hex_short(length) + " crosses regions",
                 address);
        fail(KernelErrc::unmapped_address, "span " + hex8(address) + "+" + hex_short(length) + " runs off the region",
             static_cast<std::uint32_t>(it->end()));
    }

    const Perm old = it->perms;
    const std::uint64_t page_start = std::max<std::uint64_t>(it->base, address & ~(kPageSize - 1));
    const std::uint64_t page_end = std::min<std::uint64_t>(it->end(), (end + kPageSize - 1) & ~std::uint64_t{kPageSize - 1});

    MemoryRegion whole = std::move(*it);
    it = proc.regions.erase(it);
    auto slice = [&](std::uint64_t from, std::uint64_t to, Perm p) {
        return MemoryRegion{static_cast<std::uint32_t>(from),
                            Bytes(whole.bytes.begin() + (from - whole.base), whole.bytes.begin() + (to - whole.base)),
                            p, whole.tag};
    };
    std::vector<MemoryRegion> pieces;
    if (page_start > whole.base)
        pieces.push_back(slice(whole.base, page_start, old));
    const std::size_t middle = pieces.size();
    pieces.push_back(slice(page_start, page_end, perms));
    if (page_end < whole.end())
        pieces.push_back(slice(page_end, whole.end(), old));
    const auto first = proc.regions.insert(it, std::make_move_iterator(pieces.begin()),
                                           std::make_move_iterator(pieces.end()));

    // Fold the changed piece back into neighbours with identical attributes.
    auto pos = static_cast<std::size_t>(first - proc.regions.begin()) + middle;
    auto mergeable = [&](std::size_t a, std::size_t b) {
        const MemoryRegion& x = proc.regions[a];
        const MemoryRegion& y = proc.regions[b];
        return x.end() == y.base && x.perms == y.perms && x.tag == y.tag;
    };
    if (pos + 1 < proc.regions.size() && mergeable(pos, pos + 1)) {
        Bytes& dst = proc.regions[pos].bytes;
        const Bytes& src = proc.regions[pos + 1].bytes;
        dst.insert(dst.end(), src.begin(), src.end());
        proc.regions.erase(proc.regions.begin() + static_cast<std::ptrdiff_t>(pos + 1));
    }
    if (pos > 0 && mergeable(pos - 1, pos)) {
        Bytes& dst = proc.regions[pos - 1].bytes;
        const Bytes& src = proc.regions[pos].bytes;
        dst.insert(dst.end(), src.begin(), src.end());
        proc.regions.erase(proc.regions.begin() + static_cast<std::ptrdiff_t>(pos));
    }
    return old;
}

// ---------------------------------------------------------------------------
// execution

void Kernel::register_native_routine(std::uint32_t pid, std::uint32_t address, NativeRoutine routine)
{
    (void)live_process(pid);
    native_routines_[{pid, address}] = std::move(routine);
}

std::uint32_t Kernel::entrypoint(std::uint32_t pid) const
{
    const SimProcess& proc = process(pid);
    const MemoryRegion* header = region_at(pid, proc.image_base);
    if (header == nullptr)
        fail(KernelErrc::unmapped_address, "process " + hex_short(pid) + " has no mapped image");
    return proc.image_base + pe::read_entry_point_rva(header->bytes);
}

ExecutionResult Kernel::execute_entrypoint(std::uint32_t pid)
{
    ExecutionResult result;
    result.entrypoint = entrypoint(pid);
    // Each pass fetches the entrypoint afresh; a stub that restores the
    // original bytes lets the next pass run the real code.
    for (int pass = 0; pass < 8 && alive(pid); ++pass) {
        const SimProcess& proc = live_process(pid);
        try {
            access(proc, result.entrypoint, kHookLength, Perm::execute);
        } catch (const KernelError& fault) {
            log("kernel", "[kernel] pid=" + hex_short(pid) + " faulted at entrypoint: " + fault.what());
            terminate_process(pid);
            return result;
        }
        const Bytes code = peek(proc, result.entrypoint, kHookLength);
        if (!is_call_eax_hook(code)) {
            log("kernel", "[kernel] pid=" + hex_short(pid) + " running original code at " + hex8(result.entrypoint));
            result.reached_original_code = true;
            return result;
        }
        const std::uint32_t target = pe::load_u32(code, 1);
        log("kernel", "[kernel] pid=" + hex_short(pid) + " entrypoint " + hex8(result.entrypoint) +
                          ": mov eax, " + hex8(target) + "; call eax");
        const MemoryRegion* code_region = region_at(pid, target);
        const auto routine = native_routines_.find({pid, target});
        if (code_region == nullptr || !has_all(code_region->perms, Perm::execute) ||
            routine == native_routines_.end()) {
            log("kernel", "[kernel] pid=" + hex_short(pid) + " faulted: no executable code at " + hex8(target));
            terminate_process(pid);
            return result;
        }
        result.native_calls.push_back(target);
        const NativeRoutine body = routine->second;
        body(NativeContext{pid, target, result.entrypoint + static_cast<std::uint32_t>(kHookLength)});
    }
    return result;
}

void Kernel::log(const std::string& source, const std::string& text)
{
    log_.push_back({log_.size() + 1, source, text});
}

} // namespace duqusim::sim
