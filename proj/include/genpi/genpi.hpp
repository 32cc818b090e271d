#pragma once

#include "genpi/adapter_budget.hpp"
#include "genpi/adapter_registry.hpp"
#include "genpi/backend.hpp"
#include "genpi/batches.hpp"
#include "genpi/conversation.hpp"
#include "genpi/errors.hpp"
#include "genpi/evaluator.hpp"
#include "genpi/hashing.hpp"
#include "genpi/local_backend.hpp"
#include "genpi/losses.hpp"
#include "genpi/orchestrator.hpp"
#include "genpi/profiler.hpp"
#include "genpi/records.hpp"
#include "genpi/remote_backend.hpp"
#include "genpi/serialization.hpp"
#include "genpi/synthesis.hpp"
#include "genpi/task.hpp"
#include "genpi/tiny_transformer.hpp"
#include "genpi/tokenizer.hpp"
#include "genpi/trainer.hpp"
