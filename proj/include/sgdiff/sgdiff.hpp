#pragma once

#include "sgdiff/checkpoint.hpp"
#include "sgdiff/datasets.hpp"
#include "sgdiff/diffusion.hpp"
#include "sgdiff/embedding.hpp"
#include "sgdiff/errors.hpp"
#include "sgdiff/guidance.hpp"
#include "sgdiff/layout.hpp"
#include "sgdiff/nn.hpp"
#include "sgdiff/pipeline.hpp"
#include "sgdiff/png.hpp"
#include "sgdiff/rng.hpp"
#include "sgdiff/scene_graph.hpp"
#include "sgdiff/sg2seg.hpp"
#include "sgdiff/tensor.hpp"
