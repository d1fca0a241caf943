// Copyright 2026 The UpliftRec Authors
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

#include "upliftrec/apportion.hpp"
#include "upliftrec/backend.hpp"
#include "upliftrec/causal.hpp"
#include "upliftrec/common.hpp"
#include "upliftrec/data.hpp"
#include "upliftrec/eval.hpp"
#include "upliftrec/pipeline.hpp"
#include "upliftrec/planner.hpp"
#include "upliftrec/synth.hpp"
