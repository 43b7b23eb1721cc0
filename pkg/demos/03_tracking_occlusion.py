"""The tracking loop end to end: synthetic detections, multi-pass
re-prediction, and both occlusion rules.

Fixed camera: an occluded block keeps its last pose. Moving camera: it is
inferred from a visible anchor, exactly when the estimates are exact and
with a distance-amplified error when they are not.
"""

import math

import numpy as np

from blockwind.se3 import compose, rotation_angle_between
from blockwind.synth import evaluate, fixed_camera_trajectory, generate_scene, orbit_trajectory
from blockwind.tracking import SyntheticEstimator, TrackerConfig, refine_multi_pass

scene = generate_scene(3, "row", seed=0)
print("scene:", ", ".join(scene.block_ids))


def truth_for(traj):
    return {
        b: [compose(cam, scene.world_poses[b]) for cam in traj.poses]
        for b in scene.block_ids
    }


# --- fixed camera, noisy estimator, two re-prediction passes -----------------
traj = fixed_camera_trajectory(40)
est = SyntheticEstimator(
    scene, list(traj.poses),
    sigma_rot=math.radians(5.0), sigma_trans=0.01, beta=0.5,
    occlusions={"blue": [(15, 25)]}, seed=1,
)
truth = truth_for(traj)
result = refine_multi_pass(
    est, scene, TrackerConfig(mode="fixed_camera", refinement_passes=2), truth=truth
)
print("\nfixed camera, sigma_rot 5 deg, beta 0.5:")
for m in result.pass_metrics:
    print(f"  pass {m.pass_n} {m.block_id:7s} rot err {m.mean_rot_err_deg:5.2f} deg")
blue = result.trajectories["blue"]
print("  provenance during occlusion:", blue.entry_at(20).provenance.to_str())
held = blue.pose_at(14) is blue.pose_at(20)
print("  frames 15..25 hold frame 14's pose object:", held)

# --- moving camera: anchor transfer fills the gap ----------------------------
orbit = orbit_trajectory(60, orbit_radius=1.2, height=0.7)
est2 = SyntheticEstimator(
    scene, list(orbit.poses), occlusions={"blue": [(20, 40)]}, seed=2
)
truth2 = truth_for(orbit)
out = refine_multi_pass(
    est2, scene, TrackerConfig(mode="moving_camera", refinement_passes=1)
).trajectories
worst = max(
    np.linalg.norm(out["blue"].pose_at(i).translation - truth2["blue"][i].translation)
    for i in range(20, 41)
)
print(f"\nmoving camera, noiseless: worst inferred translation error {worst:.2e} m")
print("  provenance at frame 30:", out["blue"].entry_at(30).provenance.to_str())

report = evaluate(out, truth2, scene)
print(f"  aggregate ADD: {report.aggregate.mean_add_m:.2e} m")
