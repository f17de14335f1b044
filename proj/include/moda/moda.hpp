#ifndef MODA_MODA_HPP
#define MODA_MODA_HPP

#include "moda/tensor.hpp"
#include "moda/autograd.hpp"
#include "moda/ops.hpp"
#include "moda/rng.hpp"
#include "moda/normalization.hpp"
#include "moda/network.hpp"
#include "moda/objectives.hpp"
#include "moda/dataset.hpp"
#include "moda/trainer.hpp"
#include "moda/digest.hpp"
#include "moda/decomposer.hpp"
#include "moda/composer.hpp"
#include "moda/replacement.hpp"
#include "moda/serialize.hpp"
#include "moda/sweep.hpp"
#include "moda/gradcheck.hpp"
#include "moda/text.hpp"
#include "moda/config.hpp"

#endif // MODA_MODA_HPP
