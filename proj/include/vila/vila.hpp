#pragma once

#include "vila/autodiff.hpp"
#include "vila/checkpoint.hpp"
#include "vila/config.hpp"
#include "vila/data.hpp"
#include "vila/error.hpp"
#include "vila/evaluate.hpp"
#include "vila/gradcheck.hpp"
#include "vila/image.hpp"
#include "vila/io.hpp"
#include "vila/metrics.hpp"
#include "vila/model.hpp"
#include "vila/objectives.hpp"
#include "vila/ops.hpp"
#include "vila/optim.hpp"
#include "vila/prompt_bank.hpp"
#include "vila/synthetic.hpp"
#include "vila/tokenizer.hpp"
#include "vila/trainer.hpp"
#include "vila/zsl.hpp"
