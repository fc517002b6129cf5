#pragma once

// Umbrella header for the jkolab library.

#include "jkolab/error.hpp"
#include "jkolab/experiment.hpp"
#include "jkolab/fourier.hpp"
#include "jkolab/harnack.hpp"
#include "jkolab/io.hpp"
#include "jkolab/jko.hpp"
#include "jkolab/parallel.hpp"
#include "jkolab/reference.hpp"
#include "jkolab/torus.hpp"
#include "jkolab/transport.hpp"
