// Copyright 2026 The ReinPool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "reinpool/compress.hpp"
#include "reinpool/embedding_store.hpp"
#include "reinpool/error.hpp"
#include "reinpool/evaluator.hpp"
#include "reinpool/gradcheck.hpp"
#include "reinpool/matrix.hpp"
#include "reinpool/parallel.hpp"
#include "reinpool/pipeline.hpp"
#include "reinpool/policy.hpp"
#include "reinpool/pooling.hpp"
#include "reinpool/random.hpp"
#include "reinpool/ranking.hpp"
#include "reinpool/synth_bench.hpp"
#include "reinpool/trainer.hpp"
