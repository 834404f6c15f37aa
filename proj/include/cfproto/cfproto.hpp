#pragma once

#include "cfproto/error.hpp"
#include "cfproto/data.hpp"
#include "cfproto/nn.hpp"
#include "cfproto/subprocess.hpp"
#include "cfproto/predict.hpp"
#include "cfproto/proto.hpp"
#include "cfproto/search.hpp"
#include "cfproto/catembed.hpp"
#include "cfproto/metrics.hpp"
