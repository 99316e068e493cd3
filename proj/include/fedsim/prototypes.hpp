#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <vector>

namespace fedsim {

// Per-class mean feature vector computed by a client on its current stage.
struct Prototype {
    int class_id = 0;
    std::vector<double> mean;
    std::size_t support_count = 0;
};

// Scalar feature-spread statistic paired with the prototypes.
struct RadiusStat {
    double radius = 0.0;
    std::size_t support_count = 0;
};

// Server-side registry of global prototypes, the blended radius and the set
// of classes discovered so far (== the entry keys).
struct GlobalPrototypeStore {
    struct Entry {
        std::vector<double> mean;
        std::size_t last_update_round = 0;
    };

    std::map<int, Entry> entries;
    double radius = 0.0;
    bool has_radius = false;

    std::set<int> discovered() const {
        std::set<int> out;
        for (const auto& [c, _] : entries) out.insert(c);
        return out;
    }
    bool empty() const { return entries.empty(); }
};

}  // namespace fedsim
