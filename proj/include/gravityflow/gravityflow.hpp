#pragma once

// Everything in one include.
#include "gravityflow/array.hpp"
#include "gravityflow/errors.hpp"
#include "gravityflow/tape.hpp"
#include "gravityflow/ops.hpp"
#include "gravityflow/params.hpp"
#include "gravityflow/gradcheck.hpp"
#include "gravityflow/config.hpp"
#include "gravityflow/dataset.hpp"
#include "gravityflow/synthetic.hpp"
#include "gravityflow/embedding.hpp"
#include "gravityflow/adagravity.hpp"
#include "gravityflow/gc2former.hpp"
#include "gravityflow/model.hpp"
#include "gravityflow/diagnostics.hpp"
#include "gravityflow/training.hpp"
#include "gravityflow/checkpoint.hpp"
#include "gravityflow/inspect.hpp"
#include "gravityflow/manifest.hpp"
#include "gravityflow/selfcheck.hpp"
