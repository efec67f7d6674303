#pragma once

#include "qfactor/error.hpp"
#include "qfactor/nn.hpp"
#include "qfactor/envs.hpp"
#include "qfactor/agents.hpp"
#include "qfactor/training.hpp"
#include "qfactor/verifier.hpp"
#include "qfactor/harness.hpp"
