#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace msdet {

// 64-bit FNV-1a. Used for content digests in manifests and checkpoints.
class Fnv1a {
public:
    void update(const void* data, std::size_t n)
    {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t value() const { return h_; }
    std::string hex() const
    {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
        return buf;
    }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view s)
{
    Fnv1a f;
    f.update(s);
    return f.hex();
}

} // namespace msdet
