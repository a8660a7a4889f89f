#ifndef NETREG_NETREG_HPP
#define NETREG_NETREG_HPP

#include "netreg/diagnostics.hpp"
#include "netreg/glm.hpp"
#include "netreg/graph.hpp"
#include "netreg/hotzone.hpp"
#include "netreg/io.hpp"
#include "netreg/parallel.hpp"
#include "netreg/pipeline.hpp"
#include "netreg/rank_selection.hpp"
#include "netreg/simulation.hpp"
#include "netreg/spectral.hpp"
#include "netreg/tuner.hpp"

#endif  // NETREG_NETREG_HPP
