#pragma once

#include "ctrsink/errors.hpp"
#include "ctrsink/numerics/tensor.hpp"
#include "ctrsink/numerics/ops.hpp"
#include "ctrsink/numerics/optim.hpp"
#include "ctrsink/textdata/vocab.hpp"
#include "ctrsink/textdata/dataset.hpp"
#include "ctrsink/textdata/synth.hpp"
#include "ctrsink/retrieval/retrieval.hpp"
#include "ctrsink/retrieval/pipeline.hpp"
#include "ctrsink/model/config.hpp"
#include "ctrsink/model/model.hpp"
#include "ctrsink/model/checkpoint.hpp"
#include "ctrsink/training/metrics.hpp"
#include "ctrsink/training/trainer.hpp"
#include "ctrsink/diagnostics/diagnostics.hpp"
