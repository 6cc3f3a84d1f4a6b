// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <spdlog/spdlog.h>

namespace xtal2dos {

/// Library logger writing to stderr. The level comes from XTAL2DOS_LOG
/// (trace, debug, info, warn, error, off); default warn.
spdlog::logger& logger();

}  // namespace xtal2dos
