"""Viscoelastic post-processing: a Prony relaxation modulus, stress
from a strain history by hereditary convolution, and the pseudo
(elastic-equivalent) displacement transform.

Run:  python3 demos/demo_viscoelastic.py
"""

import numpy as np

from dicfield import mechanics as mech


def main():
    # three-branch Prony series, seconds and MPa
    m = mech.ViscoModel(E_e=800.0,
                        terms=((1200.0, 0.2), (900.0, 2.0), (500.0, 20.0)),
                        E_R=3400.0)
    print(f"relaxation modulus: E(0) = {m.instantaneous():.0f}, "
          f"E(inf) = {m.E_e:.0f}")
    for t in (0.0, 0.5, 2.0, 10.0, 100.0):
        print(f"  E({t:>5.1f} s) = {mech.relax_modulus(m, t):8.1f}")

    # stress under a ramp-and-hold strain history
    times = np.linspace(0.0, 30.0, 601)
    strain = np.minimum(times / 5.0, 1.0) * 2e-3  # ramp to 0.2% in 5 s
    stress = mech.visco_stress(strain, m, times)
    i_end_ramp = np.searchsorted(times, 5.0)
    print(f"\nramp-and-hold to 0.2% strain:")
    print(f"  stress at end of ramp   = {stress[i_end_ramp]:.4f}")
    print(f"  stress after 25 s hold  = {stress[-1]:.4f} "
          f"(relaxing toward {m.E_e * 2e-3:.4f})")

    # a constant-modulus model collapses to Hooke's law
    hooke = mech.ViscoModel(E_e=3400.0)
    s2 = mech.visco_stress(strain, hooke, times)
    print(f"\nconstant modulus sanity: max |sigma - E eps| = "
          f"{np.abs(s2 - 3400.0 * strain).max():.2e}")

    # pseudo displacement: convolution that maps a viscoelastic
    # displacement history onto an elastic-equivalent one, enabling
    # elastic fracture formulas on viscoelastic media
    u_hist = 0.5 * (1 - np.exp(-times / 3.0))  # creeping opening, px
    u_pseudo = mech.pseudo_displacement(u_hist, m, times)
    print(f"\npseudo displacement of a creeping history "
          f"(E_R = {m.E_R:.0f}):")
    for k in (0, 100, 300, 600):
        print(f"  t = {times[k]:>5.1f} s: u = {u_hist[k]:.4f} px -> "
              f"u_pseudo = {u_pseudo[k]:.4f} px")


if __name__ == "__main__":
    main()
