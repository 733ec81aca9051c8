#pragma once

#include "checkpoint.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "evaluation.hpp"
#include "genotype.hpp"
#include "grad_check.hpp"
#include "relaxation.hpp"
#include "search_space.hpp"
#include "supernet.hpp"
#include "trainer.hpp"
