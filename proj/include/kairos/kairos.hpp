#pragma once

#include "kairos/config.hpp"
#include "kairos/data.hpp"
#include "kairos/diagnostics.hpp"
#include "kairos/errors.hpp"
#include "kairos/heads.hpp"
#include "kairos/hope.hpp"
#include "kairos/model.hpp"
#include "kairos/numerics/gradcheck.hpp"
#include "kairos/numerics/ops.hpp"
#include "kairos/numerics/rng.hpp"
#include "kairos/numerics/tensor.hpp"
#include "kairos/preprocess.hpp"
#include "kairos/statfeatures.hpp"
#include "kairos/trainer.hpp"
