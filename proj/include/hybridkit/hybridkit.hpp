// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hybridkit/tensor.hpp"
#include "hybridkit/gemm.hpp"
#include "hybridkit/autodiff.hpp"
#include "hybridkit/gradcheck.hpp"
#include "hybridkit/positional.hpp"
#include "hybridkit/mixers.hpp"
#include "hybridkit/model.hpp"
#include "hybridkit/data.hpp"
#include "hybridkit/eval.hpp"
#include "hybridkit/halo.hpp"
#include "hybridkit/config.hpp"
#include "hybridkit/checkpoint.hpp"
#include "hybridkit/bench.hpp"
