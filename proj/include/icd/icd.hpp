#pragma once

#include "icd/config.hpp"
#include "icd/core.hpp"
#include "icd/decoder.hpp"
#include "icd/evaluation.hpp"
#include "icd/inversion.hpp"
#include "icd/loss.hpp"
#include "icd/report_io.hpp"
#include "icd/serialization.hpp"
#include "icd/stage1.hpp"
#include "icd/synthetic_cortex.hpp"
#include "icd/training.hpp"
