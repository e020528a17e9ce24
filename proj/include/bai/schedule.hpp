#pragma once

// BAI weight schedules lambda = Lambda(t), t counting optimizer iterations.
//
// eq5:          eta + (1 - eta) / (1 + exp(-(t/T - phi) / gamma))
// const:        const_value
// linear_up:    eta + (1 - eta) * (e / ramp)            e = t/T epochs
// linear_down:  (1 - eta) * (ramp - e) / ramp + eta
//
// Linear kinds are clamped to [0, 1] once e leaves [0, ramp].

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bai/errors.hpp"

namespace bai {

enum class ScheduleKind { eq5, constant, linear_up, linear_down };

struct LambdaSchedule {
    ScheduleKind kind = ScheduleKind::eq5;
    double eta = 1e-3;
    double gamma = 0.5;
    double phi = 15.0;               // midpoint, in epochs
    double iters_per_epoch = 1.0;    // T
    double const_value = 1.0;
    double ramp_epochs = 30.0;

    void validate() const {
        if (!(iters_per_epoch >= 1.0)) throw ConfigError("schedule: iterations per epoch T must be >= 1");
        if (kind == ScheduleKind::eq5 && !(gamma > 0.0)) throw ConfigError("schedule: gamma must be > 0, got " + std::to_string(gamma));
        if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("schedule: eta must be in [0, 1]");
        if ((kind == ScheduleKind::linear_up || kind == ScheduleKind::linear_down) && !(ramp_epochs > 0.0))
            throw ConfigError("schedule: ramp_epochs must be > 0");
        if (kind == ScheduleKind::constant && !(const_value >= 0.0 && const_value <= 1.0))
            throw ConfigError("schedule: const value must be in [0, 1]");
    }
};

inline const char* to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::eq5: return "eq5";
        case ScheduleKind::constant: return "const";
        case ScheduleKind::linear_up: return "linear_up";
        case ScheduleKind::linear_down: return "linear_down";
    }
    return "?";
}

inline double lambda_weight(const LambdaSchedule& s, double t) {
    s.validate();
    const double epoch = t / s.iters_per_epoch;
    switch (s.kind) {
        case ScheduleKind::eq5: return s.eta + (1.0 / (1.0 + std::exp(-(epoch - s.phi) / s.gamma))) * (1.0 - s.eta);
        case ScheduleKind::constant: return s.const_value;
        case ScheduleKind::linear_up: {
            const double v = s.eta + (1.0 - s.eta) * (epoch / s.ramp_epochs);
            return std::clamp(v, 0.0, 1.0);
        }
        case ScheduleKind::linear_down: {
            const double v = (1.0 - s.eta) * (s.ramp_epochs - epoch) / s.ramp_epochs + s.eta;
            return std::clamp(v, 0.0, 1.0);
        }
    }
    return 0.0;
}

inline std::vector<std::string> schedule_preset_names() {
    return {"eq5", "l1", "l2", "l3", "l4", "l5", "const", "linear_up", "linear_down"};
}

// Resolves a preset name. `base` supplies eta/gamma/phi/T and the generic
// kinds' parameters; the l1..l5 presets override them with fixed values.
inline LambdaSchedule schedule_preset(const std::string& name, LambdaSchedule base) {
    if (name == "eq5" || name == "lstar") {
        base.kind = ScheduleKind::eq5;
    } else if (name == "l1" || name == "l2" || name == "l3") {
        base.kind = ScheduleKind::constant;
        base.const_value = name == "l1" ? 1e-3 : name == "l2" ? 1e-6 : 1.0;
    } else if (name == "l4" || name == "l5") {
        base.kind = name == "l4" ? ScheduleKind::linear_up : ScheduleKind::linear_down;
        base.eta = 1e-6;
        base.ramp_epochs = 30.0;
    } else if (name == "const") {
        base.kind = ScheduleKind::constant;
    } else if (name == "linear_up") {
        base.kind = ScheduleKind::linear_up;
    } else if (name == "linear_down") {
        base.kind = ScheduleKind::linear_down;
    } else {
        std::string known;
        for (const auto& n : schedule_preset_names()) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("unknown schedule '" + name + "'; known presets: " + known);
    }
    base.validate();
    return base;
}

}  // namespace bai
