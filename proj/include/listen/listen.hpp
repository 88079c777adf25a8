#pragma once

// Umbrella header for the whole toolkit.

#include "listen/adam.hpp"
#include "listen/audio.hpp"
#include "listen/checkpoint.hpp"
#include "listen/dataset.hpp"
#include "listen/distill.hpp"
#include "listen/error.hpp"
#include "listen/finetune.hpp"
#include "listen/gridsearch.hpp"
#include "listen/mel.hpp"
#include "listen/model.hpp"
#include "listen/monitor.hpp"
#include "listen/ops.hpp"
#include "listen/pretrain.hpp"
#include "listen/synth.hpp"
#include "listen/tensor.hpp"
