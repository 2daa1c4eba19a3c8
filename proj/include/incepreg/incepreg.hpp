/******************************************************************************
 * Copyright 2026 The incepreg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * 	http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 *****************************************************************************/

#pragma once

#include "incepreg/tensor.hpp"
#include "incepreg/ops.hpp"
#include "incepreg/volume.hpp"
#include "incepreg/io.hpp"
#include "incepreg/preprocess.hpp"
#include "incepreg/edge.hpp"
#include "incepreg/losses.hpp"
#include "incepreg/warp.hpp"
#include "incepreg/params.hpp"
#include "incepreg/fusion.hpp"
#include "incepreg/attention.hpp"
#include "incepreg/backbone.hpp"
#include "incepreg/affine.hpp"
#include "incepreg/metrics.hpp"
#include "incepreg/synthetic.hpp"
#include "incepreg/config.hpp"
#include "incepreg/checkpoint.hpp"
#include "incepreg/train.hpp"
#include "incepreg/case_io.hpp"
