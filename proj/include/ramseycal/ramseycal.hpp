#pragma once

#include "ramseycal/config.hpp"
#include "ramseycal/constants.hpp"
#include "ramseycal/datasets.hpp"
#include "ramseycal/errors.hpp"
#include "ramseycal/fits.hpp"
#include "ramseycal/fringe_cal.hpp"
#include "ramseycal/image.hpp"
#include "ramseycal/io.hpp"
#include "ramseycal/least_squares.hpp"
#include "ramseycal/parallel.hpp"
#include "ramseycal/photometry.hpp"
#include "ramseycal/physics.hpp"
#include "ramseycal/pipeline.hpp"
#include "ramseycal/pixel_map.hpp"
#include "ramseycal/plot.hpp"
#include "ramseycal/random.hpp"
#include "ramseycal/rf_phase.hpp"
#include "ramseycal/sensor_cal.hpp"
#include "ramseycal/synth.hpp"
