#pragma once

#include <stdexcept>

namespace recipecrit {

// Invalid grammar, training or service configuration.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace recipecrit
