#pragma once

#include "vitmix/attribution.hpp"
#include "vitmix/attribution_map.hpp"
#include "vitmix/errors.hpp"
#include "vitmix/fusion.hpp"
#include "vitmix/harness.hpp"
#include "vitmix/interchange.hpp"
#include "vitmix/persist.hpp"
#include "vitmix/pigeonhole.hpp"
#include "vitmix/png_io.hpp"
#include "vitmix/rng.hpp"
#include "vitmix/segmentation.hpp"
#include "vitmix/tensor.hpp"
#include "vitmix/vit.hpp"
