#pragma once

#include "clsreg/bench.hpp"
#include "clsreg/cpd.hpp"
#include "clsreg/geometry.hpp"
#include "clsreg/grasp.hpp"
#include "clsreg/inference.hpp"
#include "clsreg/io.hpp"
#include "clsreg/parallel.hpp"
#include "clsreg/perturb.hpp"
#include "clsreg/rng.hpp"
#include "clsreg/shape_space.hpp"
#include "clsreg/synthetic.hpp"
