"""Stereo surface workflow: match a synthetic stereo pair, triangulate
the surface, track it through a rigid in-plane motion, and measure the
(zero) surface strain of the reconstructed mesh.

The scene is a flat plate facing a canonical side-by-side rig, so depth
has a closed form: Z = f b / disparity.

Run:  python3 demos/demo_stereo_surface.py
"""

import numpy as np

from dicfield import speckle, stereo
from dicfield.image import AnalyticWarp, synth_deform
from dicfield.rgdic import ROIGrid, SeedPoint


def main():
    f, baseline, disparity = 400.0, 0.03, 6.0
    z_true = f * baseline / disparity

    tex = speckle.gen_speckle(speckle.SpeckleParams(rng_seed=9), 128, 128)
    left0 = tex
    right0 = synth_deform(tex, AnalyticWarp.translation(-disparity, 0)).image
    # second time step: the plate slides 0.8 px right, 0.3 px down in
    # both views (pure in-plane motion, disparity unchanged)
    shift = AnalyticWarp.translation(0.8, 0.3)
    left1 = synth_deform(tex, shift).image
    right1 = synth_deform(right0, shift).image

    intr = stereo.Intrinsics(f1=f, f2=f, c1=64.0, c2=64.0)
    rig = stereo.StereoRig(left=intr, right=intr, R=np.eye(3),
                           t=np.array([-baseline, 0.0, 0.0]))

    roi = ROIGrid.rect(40, 40, 88, 88, 8)
    seeds = [SeedPoint(location=(64, 64))]
    frames = stereo.stereo_track([left0, left1], [right0, right1],
                                 roi, seeds)
    motion = stereo.surface_kinematics(frames, rig)

    ok0 = motion.valid[0]
    z = motion.points[0, ok0, 2]
    print(f"reconstructed {ok0.sum()} surface points")
    print(f"depth: mean Z = {z.mean():.6f}, expected f b / d = {z_true}")
    print(f"       max |Z - Z_true| = {np.abs(z - z_true).max():.2e}")

    ok = motion.valid[1] & ok0
    d = motion.displacement[1, ok]
    # an in-plane pixel shift u maps to dX = u Z / f on the plate
    want = np.array([0.8 * z_true / f, 0.3 * z_true / f, 0.0])
    print(f"\nframe 1 motion: mean (dX, dY, dZ) = "
          f"({d[:, 0].mean():.6f}, {d[:, 1].mean():.6f}, "
          f"{d[:, 2].mean():.6f})")
    print(f"expected rigid translation:         "
          f"({want[0]:.6f}, {want[1]:.6f}, {want[2]:.6f})")

    mesh = stereo.SurfaceMesh.from_grid(
        roi.shape, motion.points[0], motion.valid[0], frames[0].zncc)
    tracked = [t for t in mesh.triangles
               if motion.valid[1][list(t)].all()]
    strains = [stereo.triangle_strain(mesh.points[list(t)],
                                      motion.points[1][list(t)])
               for t in tracked]
    worst = max(float(np.abs(ts.E).max()) for ts in strains)
    print(f"\nsurface mesh: {len(mesh.triangles)} triangles, "
          f"{len(tracked)} fully tracked into frame 1; "
          f"rigid motion leaves max |E| = {worst:.2e}\n"
          f"(the floor set by ~0.002 px matching noise over "
          f"8 px triangle legs)")


if __name__ == "__main__":
    main()
