// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ccli/concept.hpp"
#include "ccli/error.hpp"
#include "ccli/eval.hpp"
#include "ccli/feature_store.hpp"
#include "ccli/matrix.hpp"
#include "ccli/model.hpp"
#include "ccli/numerics.hpp"
#include "ccli/rng.hpp"
#include "ccli/tensor_io.hpp"
#include "ccli/trainer.hpp"
