#include "quantstat/core.hpp"

#include <cmath>

#include "quantstat/errors.hpp"

namespace quantstat {

uint64_t quantile_rank(double q, uint64_t total) {
    // ceil(q * total), clamped into [1, total]. Matches the sort-and-index
    // definition: the quantile is the element at 0-based index rank - 1.
    const double t = q * static_cast<double>(total);
    auto rank = static_cast<uint64_t>(std::ceil(t));
    if (rank < 1) rank = 1;
    if (rank > total) rank = total;
    return rank;
}

void SparseHistogram::add(int64_t value_ms, uint64_t count) {
    if (count == 0) return;
    counts_[value_ms] += count;
    total_ += count;
}

void SparseHistogram::merge(const SparseHistogram& other) {
    for (const auto& [value, count] : other.counts_) counts_[value] += count;
    total_ += other.total_;
}

int64_t SparseHistogram::min_value() const {
    if (empty()) throw EmptyDataError("min_value on empty histogram");
    return counts_.begin()->first;
}

int64_t SparseHistogram::max_value() const {
    if (empty()) throw EmptyDataError("max_value on empty histogram");
    return counts_.rbegin()->first;
}

int64_t SparseHistogram::quantile(double q) const {
    if (empty()) throw EmptyDataError("quantile on empty histogram");
    const uint64_t rank = quantile_rank(q, total_);
    uint64_t cum = 0;
    for (const auto& [value, count] : counts_) {
        cum += count;
        if (cum >= rank) return value;
    }
    return counts_.rbegin()->first; // unreachable: rank <= total
}

uint64_t SparseHistogram::count_in_range(int64_t lo, int64_t hi) const {
    if (lo > hi) return 0;
    uint64_t n = 0;
    for (auto it = counts_.lower_bound(lo); it != counts_.end() && it->first <= hi; ++it)
        n += it->second;
    return n;
}

const char* to_string(Method m) {
    switch (m) {
    case Method::proposed_fixed: return "proposed_fixed";
    case Method::proposed_dynamic: return "proposed_dynamic";
    case Method::naive_iid: return "naive_iid";
    case Method::bootstrap: return "bootstrap";
    }
    return "unknown";
}

Method method_from_string(const std::string& name) {
    if (name == "proposed_fixed") return Method::proposed_fixed;
    if (name == "proposed_dynamic") return Method::proposed_dynamic;
    if (name == "naive_iid") return Method::naive_iid;
    if (name == "bootstrap") return Method::bootstrap;
    throw ConfigError("unknown method: " + name);
}

} // namespace quantstat
