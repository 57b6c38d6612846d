#pragma once

#include "crqat/tensor.hpp"
#include "crqat/ops.hpp"
#include "crqat/quant.hpp"
#include "crqat/data.hpp"
#include "crqat/model.hpp"
#include "crqat/losses.hpp"
#include "crqat/curriculum.hpp"
#include "crqat/metrics.hpp"
#include "crqat/checkpoint.hpp"
#include "crqat/config.hpp"
#include "crqat/experiment.hpp"
#include "crqat/report.hpp"
