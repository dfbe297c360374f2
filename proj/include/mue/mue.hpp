#pragma once

#include "mue/numerics.hpp"
#include "mue/autodiff.hpp"
#include "mue/model.hpp"
#include "mue/exit_policy.hpp"
#include "mue/data.hpp"
#include "mue/engine.hpp"
#include "mue/training.hpp"
#include "mue/evalbench.hpp"
#include "mue/checkpoint.hpp"
#include "mue/run_config.hpp"
