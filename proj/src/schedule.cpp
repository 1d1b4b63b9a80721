#include "dice/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dice {

Schedule::Schedule(std::vector<Anchor> anchors, Mode mode) : anchors_(std::move(anchors)), mode_(mode) {
    if (anchors_.empty())
        throw std::invalid_argument("schedule needs at least one anchor");
    for (std::size_t i = 0; i < anchors_.size(); ++i) {
        if (!std::isfinite(anchors_[i].first))
            throw std::invalid_argument("schedule anchor positions must be finite");
        if (i > 0 && !(anchors_[i].first > anchors_[i - 1].first))
            throw std::invalid_argument("schedule anchors must be strictly increasing");
    }
}

Schedule Schedule::ramp(double start, double end, double from, double to) {
    if (start == end)
        return Schedule({{start, to}}, Mode::StepHold);
    return Schedule({{start, from}, {end, to}}, Mode::Linear);
}

double Schedule::value(double position) const {
    if (anchors_.empty())
        throw std::invalid_argument("empty schedule");
    if (position < 0.0)
        throw std::invalid_argument("schedule position must be nonnegative");
    if (position <= anchors_.front().first)
        return anchors_.front().second;
    auto next = std::upper_bound(anchors_.begin(), anchors_.end(), position,
                                 [](double p, const Anchor& a) { return p < a.first; });
    if (next == anchors_.end())
        return anchors_.back().second;
    auto prev = next - 1;
    if (mode_ == Mode::StepHold || prev->first == position)
        return prev->second;
    double t = (position - prev->first) / (next->first - prev->first);
    return prev->second + t * (next->second - prev->second);
}

Schedule Schedule::rescaled(double factor) const {
    if (!(factor > 0.0))
        throw std::invalid_argument("rescale factor must be positive");
    auto a = anchors_;
    for (auto& [pos, v] : a)
        pos *= factor;
    return Schedule(std::move(a), mode_);
}

Schedule Schedule::scaled_values(double factor) const {
    auto a = anchors_;
    for (auto& [pos, v] : a)
        v *= factor;
    return Schedule(std::move(a), mode_);
}

} // namespace dice
