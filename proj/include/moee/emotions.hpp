#pragma once

#include <array>
#include <string>

#include "moee/common.hpp"

namespace moee {

/// The six basic emotions in their fixed expert-index order. Everything that
/// indexes experts, gating columns, label weights or anchor tables uses this
/// order.
constexpr int kNumBasicEmotions = 6;

enum class Emotion : int {
    Angry = 0,
    Disgusted = 1,
    Fear = 2,
    Happy = 3,
    Sad = 4,
    Surprised = 5,
};

inline const std::array<std::string, kNumBasicEmotions>& emotion_names() {
    static const std::array<std::string, kNumBasicEmotions> names = {
        "angry", "disgusted", "fear", "happy", "sad", "surprised"};
    return names;
}

inline const std::string& emotion_name(int i) {
    check(i >= 0 && i < kNumBasicEmotions, "emotion index out of range: " + std::to_string(i));
    return emotion_names()[static_cast<size_t>(i)];
}

inline int emotion_index(const std::string& name) {
    const auto& names = emotion_names();
    for (int i = 0; i < kNumBasicEmotions; ++i)
        if (names[static_cast<size_t>(i)] == name) return i;
    throw ContractError("unknown emotion '" + name + "'");
}

/// The four compound pairs used for gating training and compound evaluation.
struct CompoundPair {
    Emotion a;
    Emotion b;
    const char* name;
};

inline const std::array<CompoundPair, 4>& compound_pairs() {
    static const std::array<CompoundPair, 4> pairs = {{
        {Emotion::Angry, Emotion::Disgusted, "angrily_disgusted"},
        {Emotion::Sad, Emotion::Surprised, "sadly_surprised"},
        {Emotion::Sad, Emotion::Fear, "sadly_fear"},
        {Emotion::Happy, Emotion::Surprised, "happily_surprised"},
    }};
    return pairs;
}

}  // namespace moee
