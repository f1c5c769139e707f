#pragma once

// Umbrella header.

#include "qnn/autograd.hpp"
#include "qnn/bitkernel.hpp"
#include "qnn/dataset.hpp"
#include "qnn/distill.hpp"
#include "qnn/embed.hpp"
#include "qnn/error.hpp"
#include "qnn/im2col.hpp"
#include "qnn/model.hpp"
#include "qnn/model_io.hpp"
#include "qnn/nn_ops.hpp"
#include "qnn/pipeline.hpp"
#include "qnn/quant.hpp"
#include "qnn/rng.hpp"
#include "qnn/sgd.hpp"
#include "qnn/slim.hpp"
#include "qnn/tensor.hpp"
#include "qnn/trainer.hpp"
