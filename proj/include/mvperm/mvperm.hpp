#pragma once

#include "mvperm/csv.hpp"
#include "mvperm/errors.hpp"
#include "mvperm/estimators.hpp"
#include "mvperm/inference.hpp"
#include "mvperm/io.hpp"
#include "mvperm/linalg.hpp"
#include "mvperm/model.hpp"
#include "mvperm/optimize.hpp"
#include "mvperm/parallel.hpp"
#include "mvperm/permutation.hpp"
#include "mvperm/signs.hpp"
#include "mvperm/simulation.hpp"
