#pragma once

// Inter-layer sliding schedule: a progressively expanded window over the
// shallow layers, a fixed-size sliding window over the intermediate layers,
// a progressively contracted window over the deep layers, plus the
// per-window intra-layer stage plan (fractions gamma, 2*gamma, ..., 1).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "slq/error.hpp"

namespace slq {

enum class Region : uint8_t { pesw = 0, fssw = 1, pcsw = 2 };

const char* region_name(Region r);

struct ScheduleConfig {
    int64_t layers = 12;        // L
    int64_t shallow = 4;        // L_s
    int64_t deep = 4;           // L_d
    int64_t window = 2;         // s, fixed window size over intermediate layers
    int64_t stride = 1;         // i, moving interval per step
    double gamma = 0.5;         // intra-layer sliding ratio, stages N = 1/gamma

    // Schedule shape switches (ablations): drop the expanded/contracted ends
    // and run the fixed-size window across the released region instead.
    bool use_pesw = true;
    bool use_pcsw = true;

    void validate() const;      // throws ConfigError naming the failing constraint
    int64_t stage_count() const { return static_cast<int64_t>(std::llround(1.0 / gamma)); }
};

struct Window {
    int64_t first = 0;          // first layer index, inclusive
    int64_t last = 0;           // last layer index, inclusive
    Region region = Region::fssw;
    int64_t position = 0;       // sequence position in the schedule

    int64_t size() const { return last - first + 1; }
    bool contains(int64_t layer) const { return first <= layer && layer <= last; }
};

struct StagePlan {
    std::vector<double> fractions;   // strictly increasing, last == 1.0
    int64_t stages() const { return static_cast<int64_t>(fractions.size()); }
};

struct WindowSchedule {
    std::vector<Window> windows;
    StagePlan plan;                  // one plan, applied to every window
    int64_t layers = 0;

    // Schedule position after which `layer` is never revisited (commit point).
    int64_t last_window_of(int64_t layer) const;
    std::vector<int64_t> membership_counts() const;
};

struct ValidationCheck {
    std::string name;
    bool passed = true;
    std::string detail;
};

struct ValidationReport {
    std::vector<ValidationCheck> checks;
    bool all_passed() const;
};

StagePlan stage_plan(double gamma);
WindowSchedule generate_schedule(const ScheduleConfig& cfg);

// Degenerate schedules used by the baselines.
WindowSchedule layerwise_schedule(int64_t layers, double gamma = 1.0);
WindowSchedule fixed_sliding_schedule(int64_t layers, int64_t window, int64_t stride,
                                      double gamma = 1.0);

// Checks coverage, contiguity, ordering, anchor, prefix-commit and (for
// s=2, i=1) even-frequency. Failures are reported, not thrown.
ValidationReport validate_schedule(const WindowSchedule& schedule, const ScheduleConfig& cfg);

std::string schedule_to_text(const WindowSchedule& schedule);
std::string schedule_to_json(const WindowSchedule& schedule);

} // namespace slq
