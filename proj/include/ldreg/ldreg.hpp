#pragma once

#include "ldreg/adam.hpp"
#include "ldreg/batch_norm.hpp"
#include "ldreg/checkpoint.hpp"
#include "ldreg/conv.hpp"
#include "ldreg/dataset.hpp"
#include "ldreg/distance_transform.hpp"
#include "ldreg/error.hpp"
#include "ldreg/evaluation.hpp"
#include "ldreg/label_smoothing.hpp"
#include "ldreg/losses.hpp"
#include "ldreg/model.hpp"
#include "ldreg/network.hpp"
#include "ldreg/spatial_ops.hpp"
#include "ldreg/spatial_transform.hpp"
#include "ldreg/synthetic.hpp"
#include "ldreg/tape.hpp"
#include "ldreg/tensor.hpp"
#include "ldreg/training.hpp"
#include "ldreg/volume.hpp"
#include "ldreg/volume_io.hpp"
