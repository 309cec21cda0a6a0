#include "tarflow/log.hpp"

#include <iostream>
#include <utility>

namespace tarflow {
namespace {

WarningHandler& handler() {
  static WarningHandler h;
  return h;
}

}  // namespace

void warn(const std::string& message) {
  if (handler()) {
    handler()(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

WarningHandler set_warning_handler(WarningHandler h) {
  return std::exchange(handler(), std::move(h));
}

}  // namespace tarflow
