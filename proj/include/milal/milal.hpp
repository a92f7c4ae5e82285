#pragma once

#include "milal/active_learning.hpp"
#include "milal/autodiff.hpp"
#include "milal/bag_io.hpp"
#include "milal/checkpoint.hpp"
#include "milal/config.hpp"
#include "milal/data.hpp"
#include "milal/error.hpp"
#include "milal/metrics.hpp"
#include "milal/model.hpp"
#include "milal/parallel.hpp"
#include "milal/random.hpp"
#include "milal/reports.hpp"
#include "milal/uncertainty.hpp"
