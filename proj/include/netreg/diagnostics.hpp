#ifndef NETREG_DIAGNOSTICS_HPP
#define NETREG_DIAGNOSTICS_HPP

#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>

namespace netreg {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a penalized normal-equations system cannot be factorized.
class SingularSystemError : public Error {
 public:
  using Error::Error;
};

using WarningSink = std::function<void(std::string_view)>;

namespace detail {
struct WarningChannel {
  std::mutex mutex;
  WarningSink sink = [](std::string_view msg) {
    std::cerr << "netreg warning: " << msg << '\n';
  };
};

inline WarningChannel& warning_channel() {
  static WarningChannel channel;
  return channel;
}
}  // namespace detail

/// Replaces the process-wide warning sink; returns the previous one.
/// An empty sink silences warnings.
inline WarningSink set_warning_sink(WarningSink sink) {
  auto& ch = detail::warning_channel();
  std::lock_guard lock(ch.mutex);
  std::swap(ch.sink, sink);
  return sink;
}

inline void warn(std::string_view msg) {
  auto& ch = detail::warning_channel();
  std::lock_guard lock(ch.mutex);
  if (ch.sink) ch.sink(msg);
}

/// Installs a sink for the lifetime of the object (tests, quiet runs).
class ScopedWarningSink {
 public:
  explicit ScopedWarningSink(WarningSink sink)
      : previous_(set_warning_sink(std::move(sink))) {}
  ~ScopedWarningSink() { set_warning_sink(std::move(previous_)); }
  ScopedWarningSink(const ScopedWarningSink&) = delete;
  ScopedWarningSink& operator=(const ScopedWarningSink&) = delete;

 private:
  WarningSink previous_;
};

}  // namespace netreg

#endif  // NETREG_DIAGNOSTICS_HPP
