#pragma once

// Umbrella header for the whole library.

#include "cotrain/augment.hpp"
#include "cotrain/binio.hpp"
#include "cotrain/core.hpp"
#include "cotrain/dataio.hpp"
#include "cotrain/experiment.hpp"
#include "cotrain/inference.hpp"
#include "cotrain/losses.hpp"
#include "cotrain/metrics.hpp"
#include "cotrain/nn.hpp"
#include "cotrain/rng.hpp"
#include "cotrain/segmodel.hpp"
#include "cotrain/textknow.hpp"
#include "cotrain/trainer.hpp"
