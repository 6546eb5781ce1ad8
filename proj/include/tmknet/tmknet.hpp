#ifndef TMKNET_TMKNET_HPP
#define TMKNET_TMKNET_HPP

#include "tmknet/error.hpp"
#include "tmknet/tensor.hpp"
#include "tmknet/linalg.hpp"
#include "tmknet/random.hpp"
#include "tmknet/autodiff.hpp"
#include "tmknet/spd.hpp"
#include "tmknet/optim.hpp"
#include "tmknet/stem.hpp"
#include "tmknet/spd_layers.hpp"
#include "tmknet/model.hpp"
#include "tmknet/metrics.hpp"
#include "tmknet/data.hpp"
#include "tmknet/experiment.hpp"

#endif  // TMKNET_TMKNET_HPP
