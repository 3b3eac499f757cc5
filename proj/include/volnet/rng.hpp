#ifndef VOLNET_RNG_HPP
#define VOLNET_RNG_HPP

#include <cmath>
#include <cstdint>

namespace volnet {

// Counter-based 64-bit generator (splitmix64). Output i for seed s is
//   mix(s + (i+1) * 0x9E3779B97F4A7C15)
// which makes streams reproducible from (seed, counter) alone, on any
// platform and in any language that can do 64-bit arithmetic.
class CounterRng {
public:
    explicit CounterRng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in (0, 1]
    double next_unit() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    // standard normal via Box-Muller, always computed in double
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = next_unit();
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // derive an independent stream seed, e.g. per parameter or per epoch
    static uint64_t mix(uint64_t seed, uint64_t salt) {
        CounterRng r(seed ^ (salt * 0xD6E8FEB86659FD93ULL + 0x2545F4914F6CDD1DULL));
        return r.next_u64();
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace volnet

#endif
