"""Motion fields are the exact identity at initialization.

The final layer of each deformation MLP starts at zero, so a fresh
field outputs all-zero deltas and animating with it reproduces the
static render bit for bit, for any audio input. This is what makes
stage-2 training start from the stage-1 solution instead of a
perturbed one.
"""
import numpy as np

from gaussianhead.motion import (AudioFeatureTrack, MotionFieldParams,
                                 dual_branch_animate)
from gaussianhead.synthetic import ScenePreset, synth_scene
from gaussianhead.trainer import HeadModel, TrainingConfig

preset = ScenePreset(name="static-head", resolution=32, n_frames=2,
                     local_resolution=32)
bundle = synth_scene(0, preset)
config = TrainingConfig(plane_resolution=32,
                        local_channels=bundle.f_local.shape[2],
                        global_channels=bundle.f_global.size, audio_dim=16)
model = HeadModel(config, bundle.priors[0].completion_indices.size,
                  np.random.default_rng(0))
cloud = model.reconstruct_cloud(bundle.f_local, bundle.f_global,
                                bundle.priors[0])

coarse = MotionFieldParams("coarse", 16, config.hash_grid(),
                           rng=np.random.default_rng(1))
fine = MotionFieldParams("fine", 16, config.hash_grid(),
                         rng=np.random.default_rng(2))

static_render = model.render_cloud_rgb(cloud, bundle.cameras[0])
rng = np.random.default_rng(3)
for trial in range(3):
    audio = rng.normal(0.0, 5.0, 16)  # arbitrary, even extreme, input
    deformed = dual_branch_animate(cloud, audio, coarse, fine)
    render = model.render_cloud_rgb(deformed, bundle.cameras[0])
    identical = np.array_equal(render, static_render)
    print(f"trial {trial}: animated render bitwise equals static: {identical}")

# one nonzero weight breaks the identity, as it should
coarse.mlp.layers[-1].weight.data[0, 0] = 1e-3
deformed = dual_branch_animate(cloud, rng.normal(0, 5, 16), coarse, fine)
render = model.render_cloud_rgb(deformed, bundle.cameras[0])
print("after perturbing the field:",
      "still identical" if np.array_equal(render, static_render)
      else "renders diverge (expected)")
