"""Pattern quality workflow: generate a speckle pattern, grade it, pick
a subset size for it, and size the camera stand-off distance.

Run:  python3 demos/demo_speckle_quality.py
"""

import numpy as np

from dicfield import speckle


def main():
    params = speckle.SpeckleParams(density=0.5, granule_radius=2.0,
                                   rng_seed=42)
    img = speckle.gen_speckle(params, 256, 256)
    print(f"generated a {img.width}x{img.height} pattern "
          f"(density {params.density}, nominal radius "
          f"{params.granule_radius} px)")

    # global quality: mean intensity gradient, on the 8-bit scale
    print(f"MIG = {speckle.mig(img):.1f}   (gate: >= 25)")
    print(f"mean granule diameter = "
          f"{speckle.mean_granule_diameter(img):.2f} px   (target: 3-5)")

    # local quality at a few probe subsets
    probes = [(64, 64), (128, 128), (192, 64), (64, 192)]
    report = speckle.quality_report(img, probes, M=10)
    print(f"\nquality report: mig={report.mig:.1f}, "
          f"min SSSIG over probes = {min(report.sssig_x):.3g} (x), "
          f"{min(report.sssig_y):.3g} (y)")
    print(f"passes MIG gate: {report.pass_mig}")

    # smallest subset half-width whose weakest probe clears the
    # SSSIG threshold
    m = speckle.select_subset_size(img, probes, threshold=2e4,
                                   M_min=5, M_max=15)
    print(f"\nselected subset half-width M = {m} "
          f"(subset {2 * m + 1}x{2 * m + 1} px)")

    # camera placement for a 60 mm specimen, 35 mm lens,
    # 2048 px sensor at 5 um pitch
    g = speckle.SetupGeometry(object_dim=60.0, focal_length=35.0,
                              sensor_pixels=2048, pixel_pitch=0.005)
    print(f"\nstand-off distance for a 60 mm field of view: "
          f"{speckle.optimal_distance(g):.1f} mm")

    # contrast: a flat image fails the gate
    flat = speckle.gen_speckle(
        speckle.SpeckleParams(density=0.0), 64, 64)
    print(f"\nfeatureless surface for comparison: MIG = "
          f"{speckle.mig(flat):.1f} -> needs paint")


if __name__ == "__main__":
    main()
