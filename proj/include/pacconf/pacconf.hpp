#pragma once

#include "pacconf/bounds.hpp"
#include "pacconf/data.hpp"
#include "pacconf/error.hpp"
#include "pacconf/experiment.hpp"
#include "pacconf/nn.hpp"
#include "pacconf/numeric.hpp"
#include "pacconf/optimizer.hpp"
#include "pacconf/params.hpp"
#include "pacconf/predictor.hpp"
#include "pacconf/rng.hpp"
#include "pacconf/score.hpp"
#include "pacconf/soft.hpp"
#include "pacconf/tape.hpp"
#include "pacconf/tasks.hpp"
