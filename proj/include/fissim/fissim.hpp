// Copyright (c) 2026 The fissim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "fissim/bench_harness.hpp"
#include "fissim/control_plane.hpp"
#include "fissim/executor_sim.hpp"
#include "fissim/executor_worker.hpp"
#include "fissim/http_api.hpp"
#include "fissim/invocation_graph.hpp"
#include "fissim/planner.hpp"
#include "fissim/record_replay.hpp"
#include "fissim/sidecar.hpp"
#include "fissim/sim_kernel.hpp"
#include "fissim/task_dispatcher.hpp"
#include "fissim/task_model.hpp"
#include "fissim/workload.hpp"
