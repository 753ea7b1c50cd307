#pragma once

#include "krkc/baselines.hpp"
#include "krkc/config.hpp"
#include "krkc/data.hpp"
#include "krkc/error.hpp"
#include "krkc/evaluation.hpp"
#include "krkc/gradcheck.hpp"
#include "krkc/io.hpp"
#include "krkc/losses.hpp"
#include "krkc/models.hpp"
#include "krkc/optim.hpp"
#include "krkc/rng.hpp"
#include "krkc/strategy.hpp"
#include "krkc/tensor.hpp"
#include "krkc/trainer.hpp"
