#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "davqa/errors.hpp"
#include "davqa/tensor.hpp"

namespace davqa {

// A hook receives the site's base output and returns an additive delta of the
// same shape; the engine performs base + delta, so injection is additive by
// construction.
using DeltaFn = std::function<Tensor(const Tensor&)>;

struct HookHandle {
    std::string site;
    std::uint64_t id = 0;
};

// Named-site additive injection. Sites are declared once by the model; each
// site carries at most one active transform, swapped atomically between
// domains. Any mutation bumps an epoch counter so inference can assert the
// hook set stayed fixed for a whole generation episode.
class HookEngine {
public:
    void declare_site(const std::string& name, Shape expected_shape) {
        if (sites_.count(name)) throw ConflictError("hook site '" + name + "' already declared");
        sites_[name] = Site{std::move(expected_shape), std::nullopt};
    }

    bool has_site(const std::string& name) const { return sites_.count(name) > 0; }

    HookHandle register_hook(const std::string& site_name, DeltaFn transform) {
        Site& site = site_or_throw(site_name);
        if (site.slot) {
            throw ConflictError("hook slot at '" + site_name + "' is already occupied");
        }
        const std::uint64_t id = ++next_id_;
        site.slot = Slot{id, std::move(transform)};
        ++epoch_;
        return HookHandle{site_name, id};
    }

    // Idempotent: removing an already-removed (or superseded) handle is a no-op.
    void remove_hook(const HookHandle& handle) {
        auto it = sites_.find(handle.site);
        if (it == sites_.end()) return;
        if (it->second.slot && it->second.slot->id == handle.id) {
            it->second.slot.reset();
            ++epoch_;
        }
    }

    bool active(const std::string& site_name) const {
        auto it = sites_.find(site_name);
        return it != sites_.end() && it->second.slot.has_value();
    }

    std::size_t active_count() const {
        std::size_t n = 0;
        for (const auto& [name, site] : sites_) n += site.slot ? 1 : 0;
        return n;
    }

    // Called by the model at each site. Validates the base output against the
    // declared contract and the delta against the base; never broadcasts.
    Tensor apply(const std::string& site_name, const Tensor& base_output) const {
        const Site& site = site_or_throw(site_name);
        if (base_output.shape() != site.expected_shape) {
            throw ShapeError("site '" + site_name + "' expects " + shape_str(site.expected_shape) +
                             " but model produced " + shape_str(base_output.shape()));
        }
        if (!site.slot) return base_output;
        Tensor delta = site.slot->fn(base_output);
        if (delta.shape() != base_output.shape()) {
            throw ShapeError("hook at '" + site_name + "' returned delta " + shape_str(delta.shape()) +
                             " for base output " + shape_str(base_output.shape()));
        }
        return add(base_output, delta);
    }

    // Atomically replaces the whole active adapter set: all sites are
    // validated before any mutation, so a failure leaves the previous set
    // intact. The optional prefix rides along for the next generation call.
    void swap_active_set(const std::vector<std::pair<std::string, DeltaFn>>& hooks,
                         std::optional<Tensor> prefix) {
        for (const auto& [name, fn] : hooks) {
            site_or_throw(name);
            if (!fn) throw ContractError("swap_active_set: empty transform for site '" + name + "'");
        }
        for (auto& [name, site] : sites_) site.slot.reset();
        for (const auto& [name, fn] : hooks) {
            sites_[name].slot = Slot{++next_id_, fn};
        }
        prefix_ = std::move(prefix);
        ++epoch_;
    }

    void clear_all() {
        for (auto& [name, site] : sites_) site.slot.reset();
        prefix_.reset();
        ++epoch_;
    }

    // Prefix rows bound for the next generation episode ([l x d_q]).
    void bind_prefix(Tensor prefix) {
        prefix_ = std::move(prefix);
        ++epoch_;
    }

    void clear_prefix() {
        prefix_.reset();
        ++epoch_;
    }

    const std::optional<Tensor>& bound_prefix() const { return prefix_; }

    // Epoch counter for the exclusive-write contract: inference records the
    // value at episode start and asserts it is unchanged at episode end.
    std::uint64_t epoch() const { return epoch_; }

    void assert_epoch(std::uint64_t started_at, const char* what) const {
        if (epoch_ != started_at) {
            throw StateError(std::string(what) + ": hook set changed mid-episode (epoch " +
                             std::to_string(started_at) + " -> " + std::to_string(epoch_) + ")");
        }
    }

    std::vector<std::string> site_names() const {
        std::vector<std::string> out;
        for (const auto& [name, site] : sites_) out.push_back(name);
        return out;
    }

    std::string dump_sites() const {
        std::ostringstream os;
        for (const auto& [name, site] : sites_) {
            os << name << " " << shape_str(site.expected_shape) << (site.slot ? " [hooked]" : "") << "\n";
        }
        return os.str();
    }

private:
    struct Slot {
        std::uint64_t id;
        DeltaFn fn;
    };
    struct Site {
        Shape expected_shape;
        std::optional<Slot> slot;
    };

    Site& site_or_throw(const std::string& name) {
        auto it = sites_.find(name);
        if (it == sites_.end()) {
            throw LookupError("unknown hook site '" + name + "'; available: " + available());
        }
        return it->second;
    }

    const Site& site_or_throw(const std::string& name) const {
        auto it = sites_.find(name);
        if (it == sites_.end()) {
            throw LookupError("unknown hook site '" + name + "'; available: " + available());
        }
        return it->second;
    }

    std::string available() const {
        std::ostringstream os;
        bool first = true;
        for (const auto& [name, site] : sites_) {
            os << (first ? "" : ", ") << name;
            first = false;
        }
        return os.str();
    }

    std::map<std::string, Site> sites_;  // ordered so dumps and errors are stable
    std::optional<Tensor> prefix_;
    std::uint64_t next_id_ = 0;
    std::uint64_t epoch_ = 0;
};

}  // namespace davqa
