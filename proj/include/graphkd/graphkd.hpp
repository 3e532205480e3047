#pragma once

#include <graphkd/active_selector.hpp>
#include <graphkd/error.hpp>
#include <graphkd/gnn_engine.hpp>
#include <graphkd/graph_store.hpp>
#include <graphkd/pipeline.hpp>
#include <graphkd/random.hpp>
#include <graphkd/teacher_bridge.hpp>
