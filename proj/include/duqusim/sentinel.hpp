// The defensive driver: remembers a ror13 checksum of each watched
// process's first 12 entrypoint bytes at creation and re-verifies it on
// every later image load in that process, terminating on mismatch.
//
// Log lines follow the WinDbg transcript grammar:
//   -+* Create process 0x<pid> *+-
//   Entrypoint bytes at 0x<addr>:
//   * Loaded module <path> *
//   -> OK! | -> Checksum error !!!! | -> Terminating <name>

#ifndef DUQUSIM_SENTINEL_HPP
#define DUQUSIM_SENTINEL_HPP

#include "duqusim/simkernel.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace duqusim::sentinel {

inline constexpr std::size_t kHashSpan = 12;
inline constexpr std::size_t kDisplaySpan = 8;

struct IntegrityRecord {
    std::uint32_t pid = 0;
    std::string name; // basename of the image path
    std::uint32_t entrypoint = 0;
    std::uint32_t baseline_hash = 0;
    std::array<std::uint8_t, kHashSpan> baseline{};
};

struct Verification {
    std::uint32_t pid = 0;
    std::string module_name;
    bool ok = false;
    bool readable = true;
    std::uint32_t hash = 0;
};

struct SentinelOptions {
    std::string driver_name = "sentinel";
    std::vector<std::string> watched = {"services.exe"};
    bool report_only = false;
};

class Sentinel {
public:
    Sentinel(sim::Kernel& kernel, SentinelOptions options = {});
    Sentinel(const Sentinel&) = delete;
    Sentinel& operator=(const Sentinel&) = delete;

    // Registers the driver and its process and image notifications.
    void init();

    [[nodiscard]] const IntegrityRecord* record(std::uint32_t pid) const;
    [[nodiscard]] std::size_t record_count() const noexcept { return records_.size(); }
    [[nodiscard]] const std::vector<Verification>& verifications() const noexcept { return verifications_; }
    [[nodiscard]] std::size_t mismatches() const noexcept;

private:
    void on_process(const sim::NotificationEvent& event);
    void on_process_create(std::uint32_t pid);
    void on_image_load(const sim::NotificationEvent& event);
    [[nodiscard]] bool watched(std::string_view image_path) const;
    void say(const std::string& text);

    sim::Kernel& kernel_;
    SentinelOptions options_;
    std::map<std::uint32_t, IntegrityRecord> records_;
    std::vector<Verification> verifications_;
};

} // namespace duqusim::sentinel

#endif // DUQUSIM_SENTINEL_HPP
