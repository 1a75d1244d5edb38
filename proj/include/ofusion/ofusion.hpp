#pragma once

#include "ofusion/error.hpp"
#include "ofusion/geometry.hpp"
#include "ofusion/pyramid.hpp"
#include "ofusion/warpfield.hpp"
#include "ofusion/confidence.hpp"
#include "ofusion/deform_solver.hpp"
#include "ofusion/prediction.hpp"
#include "ofusion/registration.hpp"
#include "ofusion/motion.hpp"
#include "ofusion/synthgen.hpp"
#include "ofusion/metrics.hpp"
#include "ofusion/config.hpp"
#include "ofusion/io.hpp"
