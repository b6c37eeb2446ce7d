#pragma once

#include "moeclip/error.hpp"
#include "moeclip/rng.hpp"
#include "moeclip/linalg.hpp"
#include "moeclip/router.hpp"
#include "moeclip/experts.hpp"
#include "moeclip/adapter.hpp"
#include "moeclip/paa.hpp"
#include "moeclip/heads.hpp"
#include "moeclip/losses.hpp"
#include "moeclip/synthdata.hpp"
#include "moeclip/config.hpp"
#include "moeclip/model.hpp"
#include "moeclip/optim.hpp"
#include "moeclip/gradcheck.hpp"
#include "moeclip/training.hpp"
#include "moeclip/metrics.hpp"
#include "moeclip/evaluate.hpp"
#include "moeclip/io.hpp"
#include "moeclip/gradsuite.hpp"
