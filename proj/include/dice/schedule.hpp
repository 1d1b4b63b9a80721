#pragma once

#include <cstddef>
#include <utility>
#include <vector>

namespace dice {

/// Piecewise schedule over training position (epochs, possibly fractional).
class Schedule {
public:
    enum class Mode { StepHold, Linear };
    using Anchor = std::pair<double, double>; // (position, value)

    Schedule() = default;
    /// Throws std::invalid_argument on empty or non-increasing anchors.
    Schedule(std::vector<Anchor> anchors, Mode mode);

    static Schedule constant(double value) { return Schedule({{0.0, value}}, Mode::StepHold); }
    /// 0 at `start`, `value` at `end`, held afterwards.
    static Schedule ramp(double start, double end, double from, double to);

    /// Step-hold returns the last anchor at or before `position`; linear
    /// interpolates between the surrounding anchors. Before the first anchor
    /// the first value holds, after the last the last value holds.
    double value(double position) const;

    const std::vector<Anchor>& anchors() const { return anchors_; }
    Mode mode() const { return mode_; }
    bool empty() const { return anchors_.empty(); }
    /// Copy with every anchor position multiplied by `factor` (> 0).
    Schedule rescaled(double factor) const;
    /// Copy with every value multiplied by `factor`.
    Schedule scaled_values(double factor) const;

private:
    std::vector<Anchor> anchors_;
    Mode mode_ = Mode::StepHold;
};

} // namespace dice
