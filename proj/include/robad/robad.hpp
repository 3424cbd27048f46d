#pragma once

#include "attacks.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "random.hpp"
#include "tensor.hpp"
#include "train.hpp"
