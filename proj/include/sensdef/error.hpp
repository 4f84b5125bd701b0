// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sensdef {

/// Input or configuration rejected before any numeric work started.
class ValidationError : public std::invalid_argument {
  public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
  public:
    DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what)
        : std::runtime_error(what), epoch_(epoch), batch_(batch) {}

    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t batch() const noexcept { return batch_; }

  private:
    std::size_t epoch_;
    std::size_t batch_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

}  // namespace detail
}  // namespace sensdef
