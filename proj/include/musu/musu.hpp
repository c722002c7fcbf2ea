// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "musu/anchor_layout.hpp"
#include "musu/assignment.hpp"
#include "musu/detector.hpp"
#include "musu/eval.hpp"
#include "musu/experiment.hpp"
#include "musu/geometry.hpp"
#include "musu/losses.hpp"
#include "musu/random.hpp"
#include "musu/scenes.hpp"
