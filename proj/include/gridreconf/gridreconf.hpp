#pragma once

/// @file gridreconf.hpp
/// @brief Convenience umbrella for the whole toolkit.

#include "gridreconf/common.hpp"
#include "gridreconf/conic.hpp"
#include "gridreconf/formulation.hpp"
#include "gridreconf/load_model.hpp"
#include "gridreconf/network.hpp"
#include "gridreconf/pipeline.hpp"
#include "gridreconf/report.hpp"
#include "gridreconf/verification.hpp"
