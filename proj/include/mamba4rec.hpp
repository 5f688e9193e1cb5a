#pragma once

// Core library. Command-level helpers (which need nlohmann/json) live in
// mamba4rec/commands.hpp and are not included here.

#include "mamba4rec/attention.hpp"
#include "mamba4rec/bench.hpp"
#include "mamba4rec/checkpoint.hpp"
#include "mamba4rec/config.hpp"
#include "mamba4rec/container.hpp"
#include "mamba4rec/data.hpp"
#include "mamba4rec/errors.hpp"
#include "mamba4rec/eval.hpp"
#include "mamba4rec/fixture.hpp"
#include "mamba4rec/mamba_block.hpp"
#include "mamba4rec/model.hpp"
#include "mamba4rec/ops.hpp"
#include "mamba4rec/parallel.hpp"
#include "mamba4rec/rng.hpp"
#include "mamba4rec/ssm.hpp"
#include "mamba4rec/tensor.hpp"
#include "mamba4rec/trainer.hpp"
