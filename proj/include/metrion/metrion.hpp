#pragma once

#include "metrion/attribution.hpp"
#include "metrion/core_model.hpp"
#include "metrion/error.hpp"
#include "metrion/exact_sum.hpp"
#include "metrion/ingestion.hpp"
#include "metrion/interval_engine.hpp"
#include "metrion/pipeline.hpp"
#include "metrion/report.hpp"
#include "metrion/simulator.hpp"
#include "metrion/store.hpp"
