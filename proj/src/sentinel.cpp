#include "duqusim/sentinel.hpp"

#include <algorithm>

namespace duqusim::sentinel {

using sim::byte_list;
using sim::hex8;
using sim::hex_short;

namespace {

constexpr std::uint32_t kHeaderProbe = 0x400;

sim::ByteView first(sim::ByteView bytes, std::size_t n)
{
    return bytes.first(std::min(n, bytes.size()));
}

} // namespace

Sentinel::Sentinel(sim::Kernel& kernel, SentinelOptions options) : kernel_(kernel), options_(std::move(options)) {}

void Sentinel::init()
{
    const sim::DriverHandle h = kernel_.register_driver(options_.driver_name);
    kernel_.set_process_notify(h, [this](const sim::NotificationEvent& e) { on_process(e); });
    kernel_.set_image_notify(h, [this](const sim::NotificationEvent& e) { on_image_load(e); });
}

const IntegrityRecord* Sentinel::record(std::uint32_t pid) const
{
    auto it = records_.find(pid);
    return it == records_.end() ? nullptr : &it->second;
}

std::size_t Sentinel::mismatches() const noexcept
{
    return static_cast<std::size_t>(
        std::count_if(verifications_.begin(), verifications_.end(), [](const Verification& v) { return !v.ok; }));
}

void Sentinel::say(const std::string& text)
{
    kernel_.log("sentinel", text);
}

bool Sentinel::watched(std::string_view image_path) const
{
    const std::string_view name = sim::basename(image_path);
    return std::any_of(options_.watched.begin(), options_.watched.end(),
                       [&](const std::string& w) { return sim::iequals(w, name); });
}

void Sentinel::on_process(const sim::NotificationEvent& event)
{
    if (event.kind == sim::EventKind::process_create) {
        on_process_create(event.pid);
    } else if (event.kind == sim::EventKind::process_exit) {
        records_.erase(event.pid);
    }
}

void Sentinel::on_process_create(std::uint32_t pid)
{
    say("-+* Create process " + hex_short(pid) + " *+-");
    const std::string path = kernel_.process_image_path(pid);
    if (!watched(path)) {
        say("ProcessImageName: " + path);
        return;
    }
    // The event carries only the pid: everything else comes from the PEB
    // and the mapped headers it points at.
    sim::Peb peb;
    std::uint32_t entry = 0;
    sim::Bytes bytes;
    try {
        peb = kernel_.query_peb(pid);
        const sim::Bytes headers = kernel_.read_memory(pid, peb.image_base_address, kHeaderProbe);
        entry = peb.image_base_address + pe::read_entry_point_rva(headers);
        bytes = kernel_.read_memory(pid, entry, kHashSpan);
    } catch (const std::exception& e) {
        say("ProcessImageInformation: unreadable (" + std::string(e.what()) + ")");
        return;
    }
    say("ProcessImageInformation:");
    say("  PEB=" + hex8(peb.address) + " ImageBaseAddress=" + hex8(peb.image_base_address));
    say("  UniqueProcessId=" + hex_short(pid));
    say("Entrypoint bytes at " + hex8(entry) + ":");
    say("  " + byte_list(first(bytes, kDisplaySpan)));
    say("ProcessImageName: " + path);
    say("ProcessImageName: save processID=" + hex_short(pid));

    IntegrityRecord rec;
    rec.pid = pid;
    rec.name = std::string(sim::basename(path));
    rec.entrypoint = entry;
    rec.baseline_hash = pe::ror13_hash(bytes);
    std::copy(bytes.begin(), bytes.end(), rec.baseline.begin());
    records_[pid] = rec;
    say("CreateProcessNotify: ImageBaseAddress=" + hex8(peb.image_base_address));
    say("  EntryPoint=" + hex8(entry));
    say("  EntrypointChecksum=" + hex8(rec.baseline_hash));
}

void Sentinel::on_image_load(const sim::NotificationEvent& event)
{
    const auto it = records_.find(event.pid);
    if (it == records_.end())
        return;
    const IntegrityRecord rec = it->second;

    say("* Loaded module " + event.module_path + " *");
    say("LoadImageNotifyRoutine:");
    say("  ImageBaseAddress=" + hex8(event.base) + " ProcessId=" + hex_short(event.pid));
    say("-> Verify " + rec.name + " process:");
    say("   Entrypoint at " + hex8(rec.entrypoint) + ":");

    Verification v;
    v.pid = event.pid;
    v.module_name = event.module_name;
    try {
        const sim::Bytes now = kernel_.read_memory(event.pid, rec.entrypoint, kHashSpan);
        say("     " + byte_list(first(now, kDisplaySpan)));
        v.hash = pe::ror13_hash(now);
        v.ok = v.hash == rec.baseline_hash;
    } catch (const sim::KernelError& e) {
        // Fail closed: an entrypoint we cannot read is treated as altered.
        say("     unreadable: " + std::string(e.what()));
        v.readable = false;
        v.ok = false;
    }
    verifications_.push_back(v);
    if (v.ok) {
        say("-> OK!");
        return;
    }
    say("-> Checksum error !!!!");
    if (options_.report_only) {
        say("-> Reporting " + rec.name + " (left running)");
        return;
    }
    say("-> Terminating " + rec.name);
    records_.erase(event.pid);
    kernel_.terminate_process(event.pid);
}

} // namespace duqusim::sentinel
