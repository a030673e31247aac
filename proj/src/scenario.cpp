#include "duqusim/scenario.hpp"

#include "duqusim/duqu_replica.hpp"
#include "duqusim/fixtures.hpp"
#include "duqusim/sentinel.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

namespace duqusim::scenario {

namespace {

struct Arity {
    std::size_t min;
    std::size_t max;
    std::set<std::string> keys;
};

const std::map<std::string, Arity>& grammar()
{
    static const std::map<std::string, Arity> g = {
        {"driver", {1, 1, {"watch", "report-only", "config", "stub1", "stub2", "mask", "kernel-base", "window",
                           "versions"}}},
        {"set-mode", {1, 1, {}}},
        {"set-version", {1, 1, {}}},
        {"process", {2, 2, {"base", "pid", "path"}}},
        {"module", {3, 3, {"base", "path"}}},
        {"run", {1, 1, {}}},
        {"tick", {0, 1, {}}},
    };
    return g;
}

std::uint32_t parse_number(const std::string& text, std::size_t line)
{
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(text, &used, 0);
        if (used != text.size() || v > 0xFFFFFFFFULL)
            throw std::invalid_argument(text);
        return static_cast<std::uint32_t>(v);
    } catch (const std::exception&) {
        throw ScenarioError(line, "not a 32-bit number: '" + text + "'");
    }
}

std::vector<std::string> split_list(const std::string& text)
{
    std::vector<std::string> out;
    std::stringstream in(text);
    for (std::string item; std::getline(in, item, ',');) {
        if (!item.empty())
            out.push_back(item);
    }
    return out;
}

bool parse_flag(const std::string& text, std::size_t line)
{
    if (text == "1" || text == "yes" || text == "true")
        return true;
    if (text == "0" || text == "no" || text == "false")
        return false;
    throw ScenarioError(line, "not a boolean: '" + text + "'");
}

void validate(const Command& c)
{
    if (c.verb == "expect") {
        if (c.text.empty())
            throw ScenarioError(c.line, "expect needs a substring");
        return;
    }
    const auto it = grammar().find(c.verb);
    if (it == grammar().end())
        throw ScenarioError(c.line, "unknown command '" + c.verb + "'");
    const Arity& a = it->second;
    if (c.args.size() < a.min || c.args.size() > a.max)
        throw ScenarioError(c.line, c.verb + " takes " + std::to_string(a.min) +
                                        (a.min == a.max ? "" : "-" + std::to_string(a.max)) + " arguments");
    for (const auto& [key, value] : c.opts) {
        if (!a.keys.contains(key))
            throw ScenarioError(c.line, c.verb + " does not accept '" + key + "='");
        if (key == "base" || key == "pid" || key == "kernel-base" || key == "window")
            (void)parse_number(value, c.line);
        if (key == "report-only")
            (void)parse_flag(value, c.line);
    }
    if (c.verb == "driver" && c.args[0] != "sentinel" && c.args[0] != "duqu")
        throw ScenarioError(c.line, "unknown driver '" + c.args[0] + "' (expected sentinel or duqu)");
    if (c.verb == "set-mode" && !sim::parse_boot_mode(c.args[0]))
        throw ScenarioError(c.line, "unknown boot mode '" + c.args[0] + "'");
    if (c.verb == "tick" && !c.args.empty())
        (void)parse_number(c.args[0], c.line);
}

class Runner {
public:
    explicit Runner(std::filesystem::path base_dir) : base_dir_(std::move(base_dir)) {}

    ScenarioResult run(const std::vector<Command>& commands)
    {
        for (const Command& c : commands) {
            if (c.verb == "expect") {
                expect(c);
                continue;
            }
            try {
                execute(c);
            } catch (const ScenarioError&) {
                throw;
            } catch (const std::exception& e) {
                kernel_.log("scenario", "[scenario] line " + std::to_string(c.line) + ": " + e.what());
            }
            kernel_.run_reinitialization();
        }
        result_.log = kernel_.log_lines();
        return std::move(result_);
    }

private:
    void expect(const Command& c)
    {
        ++result_.expectations;
        const auto& lines = kernel_.log_lines();
        for (std::size_t i = cursor_; i < lines.size(); ++i) {
            if (lines[i].text.find(c.text) != std::string::npos) {
                cursor_ = i + 1;
                return;
            }
        }
        result_.failures.push_back({c.line, c.text});
    }

    sim::Bytes load(const std::string& name, std::size_t line) const
    {
        const std::filesystem::path path = base_dir_ / name;
        std::ifstream in(path, std::ios::binary);
        if (!in)
            throw ScenarioError(line, "cannot read fixture " + path.string());
        return sim::Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    sim::Bytes load_or(const Command& c, const std::string& key, sim::Bytes fallback) const
    {
        const auto it = c.opts.find(key);
        return it == c.opts.end() ? fallback : load(it->second, c.line);
    }

    std::optional<std::uint32_t> number_opt(const Command& c, const std::string& key) const
    {
        const auto it = c.opts.find(key);
        if (it == c.opts.end())
            return std::nullopt;
        return parse_number(it->second, c.line);
    }

    std::string string_opt(const Command& c, const std::string& key) const
    {
        const auto it = c.opts.find(key);
        return it == c.opts.end() ? std::string() : it->second;
    }

    std::uint32_t resolve_pid(const std::string& ref, std::size_t line) const
    {
        if (ref == "system")
            return sim::Kernel::kSystemPid;
        if (!ref.empty() && std::isdigit(static_cast<unsigned char>(ref[0])))
            return parse_number(ref, line);
        if (const auto pid = kernel_.find_live_process(ref))
            return *pid;
        throw sim::KernelError(sim::KernelErrc::no_such_process, "no live process named " + ref);
    }

    void execute(const Command& c)
    {
        if (c.verb == "driver") {
            if (c.args[0] == "sentinel")
                add_sentinel(c);
            else
                add_duqu(c);
        } else if (c.verb == "set-mode") {
            kernel_.set_boot_mode(*sim::parse_boot_mode(c.args[0]));
        } else if (c.verb == "set-version") {
            kernel_.set_os_version(c.args[0]);
        } else if (c.verb == "process") {
            sim::ProcessOptions o;
            o.base = number_opt(c, "base");
            o.pid = number_opt(c, "pid");
            o.path = string_opt(c, "path");
            (void)kernel_.create_process(c.args[0], load(c.args[1], c.line), o);
        } else if (c.verb == "module") {
            const sim::Bytes image = load(c.args[2], c.line);
            (void)kernel_.load_module(resolve_pid(c.args[0], c.line), c.args[1], image, number_opt(c, "base"),
                                      string_opt(c, "path"));
        } else if (c.verb == "run") {
            (void)kernel_.execute_entrypoint(resolve_pid(c.args[0], c.line));
        } else if (c.verb == "tick") {
            const std::uint32_t n = c.args.empty() ? 1 : parse_number(c.args[0], c.line);
            for (std::uint32_t i = 0; i < n; ++i)
                kernel_.run_reinitialization();
        }
    }

    void add_sentinel(const Command& c)
    {
        sentinel::SentinelOptions o;
        if (const auto it = c.opts.find("watch"); it != c.opts.end())
            o.watched = split_list(it->second);
        if (const auto it = c.opts.find("report-only"); it != c.opts.end())
            o.report_only = parse_flag(it->second, c.line);
        sentinels_.push_back(std::make_unique<sentinel::Sentinel>(kernel_, o));
        sentinels_.back()->init();
    }

    void add_duqu(const Command& c)
    {
        duqu::DuquOptions o;
        o.config_blob = load_or(c, "config", fixtures::config_blob());
        o.stub1 = load_or(c, "stub1", fixtures::stub1_image());
        o.stub2 = load_or(c, "stub2", fixtures::stub2_image());
        o.mask = duqu::decode_mask(load_or(c, "mask", fixtures::mask_file()));
        o.kernel_base = number_opt(c, "kernel-base").value_or(duqu::kDefaultKernelBase);
        o.scan_window = number_opt(c, "window").value_or(duqu::kDefaultScanWindow);
        if (const auto it = c.opts.find("versions"); it != c.opts.end())
            o.supported_versions = split_list(it->second);
        duqus_.push_back(std::make_unique<duqu::DuquDriver>(kernel_, std::move(o)));
        try {
            duqus_.back()->boot_init();
        } catch (const duqu::DuquError&) {
            // Already reported on the log by the driver itself.
        }
    }

    std::filesystem::path base_dir_;
    sim::Kernel kernel_;
    std::vector<std::unique_ptr<sentinel::Sentinel>> sentinels_;
    std::vector<std::unique_ptr<duqu::DuquDriver>> duqus_;
    ScenarioResult result_;
    std::size_t cursor_ = 0;
};

} // namespace

ScenarioError::ScenarioError(std::size_t line, const std::string& message)
    : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line)
{
}

std::vector<Command> parse_scenario(const std::string& text)
{
    std::vector<Command> out;
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#')
            continue;
        Command c;
        c.line = line_no;
        std::istringstream words(line.substr(first));
        words >> c.verb;
        if (c.verb == "expect") {
            const std::size_t after = first + c.verb.size();
            c.text = after < line.size() ? line.substr(after + 1) : std::string();
        } else {
            for (std::string w; words >> w;) {
                const auto eq = w.find('=');
                if (eq == std::string::npos)
                    c.args.push_back(w);
                else if (eq == 0)
                    throw ScenarioError(line_no, "option without a key: '" + w + "'");
                else
                    c.opts[w.substr(0, eq)] = w.substr(eq + 1);
            }
        }
        validate(c);
        out.push_back(std::move(c));
    }
    return out;
}

ScenarioResult run_scenario(const std::string& text, const std::filesystem::path& base_dir)
{
    const std::vector<Command> commands = parse_scenario(text);
    return Runner(base_dir).run(commands);
}

ScenarioResult run_scenario_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ScenarioError(0, "cannot read scenario " + path.string());
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return run_scenario(text, path.parent_path());
}

} // namespace duqusim::scenario
