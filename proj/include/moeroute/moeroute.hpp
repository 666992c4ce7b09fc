#pragma once

// Umbrella header.

#include "moeroute/attention_expert.hpp"
#include "moeroute/bench.hpp"
#include "moeroute/checkpoint.hpp"
#include "moeroute/config.hpp"
#include "moeroute/data.hpp"
#include "moeroute/embedding.hpp"
#include "moeroute/error.hpp"
#include "moeroute/experiment.hpp"
#include "moeroute/expert.hpp"
#include "moeroute/expert_training.hpp"
#include "moeroute/finite_diff.hpp"
#include "moeroute/lora.hpp"
#include "moeroute/metrics.hpp"
#include "moeroute/moe_layer.hpp"
#include "moeroute/objective.hpp"
#include "moeroute/optim.hpp"
#include "moeroute/ops.hpp"
#include "moeroute/rng.hpp"
#include "moeroute/router.hpp"
#include "moeroute/ssm_expert.hpp"
#include "moeroute/tensor.hpp"
