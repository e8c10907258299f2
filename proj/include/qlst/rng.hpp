#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace qlst {

// mt19937_64 has a fully specified output sequence; the distribution
// transforms below are our own so results do not depend on the standard
// library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    // Independent stream for a named consumer ("init", "dropout", "shuffle",
    // "query", ...) and an index such as a sample number or epoch.
    static Rng stream(uint64_t seed, std::string_view name, uint64_t index = 0);

    uint64_t next_u64() { return eng_(); }
    double uniform();  // [0, 1), 53-bit resolution
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    bool bernoulli(double p) { return uniform() < p; }
    uint64_t below(uint64_t n);

    template <class V>
    void shuffle(std::vector<V>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a64(std::string_view s);

}  // namespace qlst
