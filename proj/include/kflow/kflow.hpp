#pragma once

#include "kflow/analysis.hpp"
#include "kflow/autodiff.hpp"
#include "kflow/cfm.hpp"
#include "kflow/checkpoint.hpp"
#include "kflow/datasets.hpp"
#include "kflow/dual.hpp"
#include "kflow/error.hpp"
#include "kflow/io.hpp"
#include "kflow/koopman.hpp"
#include "kflow/linalg.hpp"
#include "kflow/nn.hpp"
#include "kflow/parallel.hpp"
#include "kflow/random.hpp"
#include "kflow/sampler.hpp"
#include "kflow/tensor.hpp"
