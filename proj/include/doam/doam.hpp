#pragma once

#include "doam/errors.hpp"
#include "doam/tensor.hpp"
#include "doam/autograd.hpp"
#include "doam/ops.hpp"
#include "doam/nn.hpp"
#include "doam/edge_guidance.hpp"
#include "doam/material_awareness.hpp"
#include "doam/attention_fusion.hpp"
#include "doam/boxes.hpp"
#include "doam/detector.hpp"
#include "doam/model.hpp"
#include "doam/image_io.hpp"
#include "doam/data.hpp"
#include "doam/synth.hpp"
#include "doam/evaluation.hpp"
#include "doam/complexity.hpp"
#include "doam/checkpoint.hpp"
#include "doam/train.hpp"
#include "doam/visualize.hpp"
