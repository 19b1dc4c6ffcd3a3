#pragma once

#include "ietp/tensor.hpp"
#include "ietp/autodiff.hpp"
#include "ietp/nn.hpp"
#include "ietp/util.hpp"
#include "ietp/maneuver.hpp"
#include "ietp/trajectory_data.hpp"
#include "ietp/gaussian.hpp"
#include "ietp/model.hpp"
#include "ietp/weights_io.hpp"
#include "ietp/training.hpp"
#include "ietp/ensemble.hpp"
#include "ietp/evaluation.hpp"
#include "ietp/synthetic.hpp"
#include "ietp/workflow.hpp"
