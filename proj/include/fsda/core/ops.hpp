#pragma once

#include "fsda/core/ops_basic.hpp"
#include "fsda/core/ops_linalg.hpp"
