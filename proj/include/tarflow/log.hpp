#pragma once

#include <functional>
#include <string>

namespace tarflow {

using WarningHandler = std::function<void(const std::string&)>;

// Non-fatal diagnostics (clamped schedule steps, skipped optimizer steps,
// questionable evaluation settings). Defaults to "warning: ..." on stderr.
void warn(const std::string& message);

// Installs a handler and returns the previous one. An empty handler restores
// the default.
WarningHandler set_warning_handler(WarningHandler handler);

}  // namespace tarflow
