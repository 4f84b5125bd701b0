// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sensdef/attacks.hpp"
#include "sensdef/config.hpp"
#include "sensdef/dataio.hpp"
#include "sensdef/experiment.hpp"
#include "sensdef/losses.hpp"
#include "sensdef/manifest.hpp"
#include "sensdef/nncore.hpp"
#include "sensdef/robustness.hpp"
#include "sensdef/search.hpp"
#include "sensdef/training.hpp"
