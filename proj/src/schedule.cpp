#include "slq/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace slq {

const char* region_name(Region r) {
    switch (r) {
        case Region::pesw: return "PESW";
        case Region::fssw: return "FSSW";
        case Region::pcsw: return "PCSW";
    }
    return "?";
}

void ScheduleConfig::validate() const {
    if (shallow < 1) throw ConfigError("schedule: L_s must be >= 1");
    if (deep < 1) throw ConfigError("schedule: L_d must be >= 1");
    if (layers < shallow + deep)
        throw ConfigError("schedule: L must be >= L_s + L_d (" + std::to_string(layers) + " < " +
                          std::to_string(shallow + deep) + ")");
    if (window < 1) throw ConfigError("schedule: window size s must be >= 1");
    if (stride < 1 || stride > window)
        throw ConfigError("schedule: stride i must satisfy 1 <= i <= s");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("schedule: gamma must be in (0, 1]");
    const double n = 1.0 / gamma;
    if (std::abs(n - std::llround(n)) > 1e-9)
        throw ConfigError("schedule: 1/gamma must be an integer, gamma=" + std::to_string(gamma));
}

StagePlan stage_plan(double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("stage plan: gamma must be in (0, 1]");
    const double nf = 1.0 / gamma;
    const int64_t n = std::llround(nf);
    if (std::abs(nf - static_cast<double>(n)) > 1e-9)
        throw ConfigError("stage plan: 1/gamma must be an integer, gamma=" + std::to_string(gamma));
    StagePlan plan;
    plan.fractions.resize(static_cast<size_t>(n));
    for (int64_t s = 1; s <= n; ++s)
        plan.fractions[static_cast<size_t>(s - 1)] = static_cast<double>(s) / static_cast<double>(n);
    plan.fractions.back() = 1.0;
    return plan;
}

WindowSchedule generate_schedule(const ScheduleConfig& cfg) {
    cfg.validate();
    const int64_t L = cfg.layers, Ls = cfg.shallow, Ld = cfg.deep, s = cfg.window, i = cfg.stride;

    WindowSchedule sched;
    sched.layers = L;
    sched.plan = stage_plan(cfg.gamma);

    auto push = [&sched](int64_t first, int64_t last, Region region) {
        Window w;
        w.first = first;
        w.last = last;
        w.region = region;
        w.position = static_cast<int64_t>(sched.windows.size());
        sched.windows.push_back(w);
    };

    if (cfg.use_pesw) {
        // {0}, {0,1}, ..., {0..L_s-1}: the first layer anchors every window
        for (int64_t last = 0; last < Ls; ++last) push(0, last, Region::pesw);
    }

    // Fixed-size windows across the intermediate layers [L_s, L-L_d), entering
    // the shallow/deep regions by s-1 overlap layers on each side. With PESW or
    // PCSW disabled the fixed window sweeps the released region instead.
    const int64_t inter_first = cfg.use_pesw ? Ls : 0;
    const int64_t inter_last = cfg.use_pcsw ? L - Ld - 1 : L - 1;
    if (inter_first <= inter_last) {
        int64_t first_start = std::max<int64_t>(0, inter_first - (s - 1));
        int64_t last_start = std::min(inter_last, L - s);
        if (cfg.use_pesw && cfg.use_pcsw) {
            // pure bridge: window must end at or before the deep overlap
            last_start = std::min(last_start, L - Ld - 1);
        }
        if (last_start >= first_start) {
            int64_t start = first_start;
            bool emitted_last = false;
            while (start <= last_start) {
                push(start, std::min(start + s - 1, L - 1), Region::fssw);
                emitted_last = (start == last_start);
                start += i;
            }
            // clamped stride: guarantee the sweep reaches the last start
            if (!emitted_last) push(last_start, std::min(last_start + s - 1, L - 1), Region::fssw);
        }
    }

    if (cfg.use_pcsw) {
        // {L-L_d..L-1}, ..., {L-1}: the last layer anchors every window
        for (int64_t first = L - Ld; first < L; ++first) push(first, L - 1, Region::pcsw);
    }

    return sched;
}

WindowSchedule layerwise_schedule(int64_t layers, double gamma) {
    ScheduleConfig cfg;
    cfg.layers = layers;
    cfg.shallow = 1;
    cfg.deep = 1;
    cfg.window = 1;
    cfg.stride = 1;
    cfg.gamma = gamma;
    cfg.use_pesw = false;
    cfg.use_pcsw = false;
    return generate_schedule(cfg);
}

WindowSchedule fixed_sliding_schedule(int64_t layers, int64_t window, int64_t stride,
                                      double gamma) {
    ScheduleConfig cfg;
    cfg.layers = layers;
    cfg.shallow = 1;
    cfg.deep = 1;
    cfg.window = window;
    cfg.stride = stride;
    cfg.gamma = gamma;
    cfg.use_pesw = false;
    cfg.use_pcsw = false;
    return generate_schedule(cfg);
}

int64_t WindowSchedule::last_window_of(int64_t layer) const {
    int64_t pos = -1;
    for (const Window& w : windows)
        if (w.contains(layer)) pos = w.position;
    return pos;
}

std::vector<int64_t> WindowSchedule::membership_counts() const {
    std::vector<int64_t> counts(static_cast<size_t>(layers), 0);
    for (const Window& w : windows)
        for (int64_t l = w.first; l <= w.last; ++l) counts[static_cast<size_t>(l)] += 1;
    return counts;
}

bool ValidationReport::all_passed() const {
    return std::all_of(checks.begin(), checks.end(),
                       [](const ValidationCheck& c) { return c.passed; });
}

ValidationReport validate_schedule(const WindowSchedule& sched, const ScheduleConfig& cfg) {
    ValidationReport report;
    auto check = [&report](const std::string& name, bool ok, const std::string& detail) {
        report.checks.push_back({name, ok, ok ? "" : detail});
    };

    const int64_t L = sched.layers;

    // coverage: every layer appears in some window
    {
        std::vector<int64_t> counts = sched.membership_counts();
        int64_t uncovered = -1;
        for (int64_t l = 0; l < L; ++l)
            if (counts[static_cast<size_t>(l)] == 0) { uncovered = l; break; }
        check("coverage", uncovered < 0, "layer " + std::to_string(uncovered) + " never covered");
    }

    // contiguity + bounds (windows are stored as [first,last] ranges, so
    // contiguity reduces to range sanity)
    {
        bool ok = true;
        std::string detail;
        for (const Window& w : sched.windows) {
            if (w.first > w.last || w.first < 0 || w.last >= L) {
                ok = false;
                detail = "window " + std::to_string(w.position) + " has bad range";
                break;
            }
        }
        check("contiguity", ok, detail);
    }

    // ordering: PESW then FSSW then PCSW, non-decreasing starts
    {
        bool ok = true;
        std::string detail;
        int prev_region = -1;
        int64_t prev_start = -1;
        for (const Window& w : sched.windows) {
            if (static_cast<int>(w.region) < prev_region) {
                ok = false;
                detail = "region order violated at window " + std::to_string(w.position);
                break;
            }
            if (static_cast<int>(w.region) == prev_region && w.first < prev_start) {
                ok = false;
                detail = "window starts decrease at window " + std::to_string(w.position);
                break;
            }
            prev_region = static_cast<int>(w.region);
            prev_start = w.first;
        }
        check("ordering", ok, detail);
    }

    // anchors: layer 0 in every PESW window, layer L-1 in every PCSW window
    {
        bool ok = true;
        std::string detail;
        for (const Window& w : sched.windows) {
            if (w.region == Region::pesw && !w.contains(0)) {
                ok = false;
                detail = "PESW window " + std::to_string(w.position) + " misses layer 0";
                break;
            }
            if (w.region == Region::pcsw && !w.contains(L - 1)) {
                ok = false;
                detail = "PCSW window " + std::to_string(w.position) + " misses last layer";
                break;
            }
        }
        check("anchor", ok, detail);
    }

    // prefix-commit: once a window starts at `a`, no later window touches < a
    {
        bool ok = true;
        std::string detail;
        for (size_t wi = 0; wi + 1 < sched.windows.size() && ok; ++wi) {
            const int64_t start = sched.windows[wi].first;
            for (size_t later = wi + 1; later < sched.windows.size(); ++later) {
                if (sched.windows[later].first < start) {
                    ok = false;
                    detail = "window " + std::to_string(later) + " reaches below start of window " +
                             std::to_string(wi);
                    break;
                }
            }
        }
        check("prefix_commit", ok, detail);
    }

    // even frequency for the default fixed window {s=2, i=1}
    if (cfg.window == 2 && cfg.stride == 1 && cfg.use_pesw && cfg.use_pcsw &&
        cfg.layers > cfg.shallow + cfg.deep) {
        std::vector<int64_t> counts = sched.membership_counts();
        bool ok = true;
        std::string detail;
        for (int64_t l = cfg.shallow - 1; l <= L - cfg.deep; ++l) {
            if (counts[static_cast<size_t>(l)] != cfg.window) {
                ok = false;
                detail = "layer " + std::to_string(l) + " appears " +
                         std::to_string(counts[static_cast<size_t>(l)]) + " times, expected " +
                         std::to_string(cfg.window);
                break;
            }
        }
        check("even_frequency", ok, detail);
    }

    // stage plan sanity
    {
        bool ok = !sched.plan.fractions.empty() && sched.plan.fractions.back() == 1.0;
        for (size_t i = 1; i < sched.plan.fractions.size(); ++i)
            ok = ok && sched.plan.fractions[i] > sched.plan.fractions[i - 1];
        check("stage_plan", ok, "fractions must increase to 1.0");
    }

    return report;
}

std::string schedule_to_text(const WindowSchedule& sched) {
    std::ostringstream os;
    for (const Window& w : sched.windows) {
        os << region_name(w.region) << " " << w.first << ".." << w.last << " stages";
        for (double f : sched.plan.fractions) os << " " << f;
        os << "\n";
    }
    return os.str();
}

std::string schedule_to_json(const WindowSchedule& sched) {
    std::ostringstream os;
    os << "{\"layers\":" << sched.layers << ",\"stage_fractions\":[";
    for (size_t i = 0; i < sched.plan.fractions.size(); ++i)
        os << (i ? "," : "") << sched.plan.fractions[i];
    os << "],\"windows\":[";
    for (size_t i = 0; i < sched.windows.size(); ++i) {
        const Window& w = sched.windows[i];
        os << (i ? "," : "") << "{\"region\":\"" << region_name(w.region) << "\",\"first\":"
           << w.first << ",\"last\":" << w.last << "}";
    }
    os << "]}";
    return os.str();
}

} // namespace slq
