#pragma once

#include <functional>
#include <string_view>

namespace fediptw {

// Non-fatal diagnostics (single-class clients, clipped h_c, degenerate
// density fits). Defaults to stderr; thread-safe.
void warn(std::string_view message);

using WarningSink = std::function<void(std::string_view)>;
// Replaces the sink and returns the previous one. An empty sink silences.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace fediptw
