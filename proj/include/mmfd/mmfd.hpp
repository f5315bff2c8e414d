#pragma once

#include "mmfd/audio.hpp"
#include "mmfd/checkpoint.hpp"
#include "mmfd/config.hpp"
#include "mmfd/datagen.hpp"
#include "mmfd/encoders.hpp"
#include "mmfd/fusion.hpp"
#include "mmfd/grad_check.hpp"
#include "mmfd/layers.hpp"
#include "mmfd/metrics.hpp"
#include "mmfd/ops.hpp"
#include "mmfd/optim.hpp"
#include "mmfd/rng.hpp"
#include "mmfd/sample.hpp"
#include "mmfd/tensor.hpp"
#include "mmfd/train.hpp"
