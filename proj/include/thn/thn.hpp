#pragma once

// Everything: ternary strassen layers, the tree head, training, fixed-point
// quantization, cost accounting, and the model container.

#include "thn/analyze.hpp"
#include "thn/arch.hpp"
#include "thn/autodiff.hpp"
#include "thn/bonsai.hpp"
#include "thn/common.hpp"
#include "thn/dataset.hpp"
#include "thn/graph.hpp"
#include "thn/quantize.hpp"
#include "thn/serialize.hpp"
#include "thn/strassen.hpp"
#include "thn/tensor.hpp"
#include "thn/ternary.hpp"
#include "thn/train.hpp"
