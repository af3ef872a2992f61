#pragma once

#include "lieflow/core.hpp"
#include "lieflow/gaussian.hpp"
#include "lieflow/random.hpp"
#include "lieflow/parallel.hpp"
#include "lieflow/lie_algebra.hpp"
#include "lieflow/dynamics_em.hpp"
#include "lieflow/latent_moments.hpp"
#include "lieflow/ppca_joint_em.hpp"
#include "lieflow/npca_joint_vem.hpp"
#include "lieflow/synth.hpp"
#include "lieflow/rollout.hpp"
#include "lieflow/tensor_file.hpp"
#include "lieflow/checkpoint.hpp"
