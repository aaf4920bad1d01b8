// Copyright 2026 The dpsubsel Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef DPSUBSEL_DPSUBSEL_HPP_
#define DPSUBSEL_DPSUBSEL_HPP_

#include "dpsubsel/data.hpp"
#include "dpsubsel/error.hpp"
#include "dpsubsel/experiment.hpp"
#include "dpsubsel/io.hpp"
#include "dpsubsel/model.hpp"
#include "dpsubsel/privacy.hpp"
#include "dpsubsel/rng.hpp"
#include "dpsubsel/selection.hpp"
#include "dpsubsel/trainer.hpp"

#endif  // DPSUBSEL_DPSUBSEL_HPP_
