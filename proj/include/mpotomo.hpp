// Copyright 2026 The mpo-tomo Authors
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

#include "mpotomo/core.hpp"
#include "mpotomo/pauli.hpp"
#include "mpotomo/parallel.hpp"
#include "mpotomo/rng.hpp"
#include "mpotomo/mpo.hpp"
#include "mpotomo/mpo_io.hpp"
#include "mpotomo/cluster.hpp"
#include "mpotomo/emission.hpp"
#include "mpotomo/moments.hpp"
#include "mpotomo/correlations.hpp"
#include "mpotomo/reconstruct.hpp"
#include "mpotomo/fit.hpp"
#include "mpotomo/entanglement.hpp"
