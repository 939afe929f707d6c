# # Surveying anchors and finding the heading
#
# Two pieces happen before the estimator can fly: the anchors must be
# located, and the initial heading must be found from ranges alone.

from dataclasses import replace

import numpy as np

from viral_fusion.anchors import AnchorSurvey, field_deployment, self_localize, simulate_survey, survey_from_network
from viral_fusion.manifold import quat_to_rot
from viral_fusion.pipeline import PipelineConfig, dataset_records, run
from viral_fusion.sim import Scenario, TrajectorySpec, ground_truth, simulate

# ## Three anchors from three distances
#
# Anchor 0 defines the origin, anchor 1 the x axis, and anchor 2 lies in the
# negative-y half plane, all at a common height. Three pairwise distances fix
# the layout.

print(self_localize(AnchorSurvey(10.0, 10.0, 10.0, 1.0)).positions)

# In the field the anchors range to each other many times. The survey takes
# the median per pair, so a few bad samples do not matter.

truth = field_deployment("test_03")
samples = simulate_survey(truth, 50, 0.05, np.random.default_rng(0))
samples.append((100, 101, 80.0, 99.0))  # one wild sample
found = self_localize(survey_from_network(samples, 10))
for k in truth.ids():
    print(k, found[k], "error", np.linalg.norm(found[k] - truth[k]))

# ## Heading from ranges
#
# Ranges alone constrain heading only through the antenna offsets, and the
# cost is not convex in yaw. A single initial guess can settle in the wrong
# valley. The estimator therefore starts the solver from a grid of yaw seeds
# and keeps the lowest cost.


def heading_error(ds, config):
    seen = {}

    def watch(est):
        if est.initialized and not seen:
            seen["t"], seen["q"] = est.window.stamps[-1], est.window.newest.q.copy()

    run(dataset_records(ds), config, ds.anchors, ds.antennas, progress=watch)
    if not seen:
        return float("nan")
    yaw = lambda q: np.arctan2(quat_to_rot(q)[1, 0], quat_to_rot(q)[0, 0])  # noqa: E731
    d = yaw(seen["q"]) - yaw(ground_truth(ds.scenario.trajectory, [seen["t"]]).q[0])
    return float(np.degrees(abs((d + np.pi) % (2 * np.pi) - np.pi)))


grid = PipelineConfig(nudge_after_init=False)
single = replace(grid, init_yaw_grid=1, init_cost_threshold=np.inf)
for yaw in (20.0, 100.0, 170.0, 250.0):
    ds = simulate(Scenario(trajectory=TrajectorySpec(duration=2.0, yaw_mode="fixed", yaw0=np.radians(yaw))), seed=1)
    print(f"true yaw {yaw:5.1f} deg: grid error {heading_error(ds, grid):6.2f} deg, "
          f"single seed error {heading_error(ds, single):6.2f} deg")

# The grid error is the statistical precision of about 100 ranges at 5 cm
# noise (around one degree). The single seed fails outright when the truth is
# far from zero yaw.
