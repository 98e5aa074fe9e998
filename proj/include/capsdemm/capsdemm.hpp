#pragma once

#include "capsdemm/capsule.hpp"
#include "capsdemm/config.hpp"
#include "capsdemm/image.hpp"
#include "capsdemm/metrics.hpp"
#include "capsdemm/morphology.hpp"
#include "capsdemm/ops.hpp"
#include "capsdemm/optim.hpp"
#include "capsdemm/pipeline.hpp"
#include "capsdemm/plot.hpp"
#include "capsdemm/rng.hpp"
#include "capsdemm/serialize.hpp"
#include "capsdemm/slic.hpp"
#include "capsdemm/synth.hpp"
#include "capsdemm/tensor.hpp"
#include "capsdemm/unet.hpp"
