#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace stft {

// Deterministic RNG helpers. std::normal_distribution is implementation
// defined, so gaussians go through Box-Muller to keep generated files and
// training runs byte-stable across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return (engine_() >> 11) * (1.0 / 9007199254740992.0);  // 2^53
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // integer in [0, n)
    std::uint64_t next_below(std::uint64_t n) {
        // modulo bias is irrelevant at the scales used here (n << 2^64)
        return engine_() % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[next_below(i)]);
        }
    }

    std::mt19937_64& engine() { return engine_; }

    // exact state round trip, including the Box-Muller spare
    std::string state() const {
        std::ostringstream os;
        os << engine_ << '|' << (have_spare_ ? 1 : 0) << '|';
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(spare_));
        std::memcpy(&bits, &spare_, sizeof(bits));
        os << bits;
        return os.str();
    }

    void set_state(const std::string& text) {
        const auto p1 = text.rfind('|');
        const auto p0 = text.rfind('|', p1 - 1);
        std::istringstream es(text.substr(0, p0));
        es >> engine_;
        have_spare_ = text[p0 + 1] == '1';
        const std::uint64_t bits = std::stoull(text.substr(p1 + 1));
        std::memcpy(&spare_, &bits, sizeof(spare_));
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace stft
