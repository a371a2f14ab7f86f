#pragma once

#include "cktgen/autograd.hpp"
#include "cktgen/circuit.hpp"
#include "cktgen/config.hpp"
#include "cktgen/dataset.hpp"
#include "cktgen/decoder.hpp"
#include "cktgen/encoders.hpp"
#include "cktgen/error.hpp"
#include "cktgen/evaluator.hpp"
#include "cktgen/losses.hpp"
#include "cktgen/metrics.hpp"
#include "cktgen/model.hpp"
#include "cktgen/nn.hpp"
#include "cktgen/optim.hpp"
#include "cktgen/profile.hpp"
#include "cktgen/rng.hpp"
#include "cktgen/trainer.hpp"
