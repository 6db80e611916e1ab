"""Norm deflation of the approximate solution f_a = f_r + f_b over [T*, 0]."""
from kdl.deflation import DeflationParams, deflation_experiment, sphere_points

for M in (4, 8, 16):
    p = DeflationParams() if M == 4 else DeflationParams.desk(M)
    rep = deflation_experiment(p, sphere_points(p.d, p.J), n_times=5)
    print(f"M={M:<3d} J={p.J:<4d} T*={p.T_star:.4f}  ratio ||f_a(T*)|| / ||f_a(0)|| = {rep.ratio:.4f}")
    print("    t          f_a        f_r        f_b")
    for t, a, r, b in zip(rep.times, rep.norm_fa, rep.norm_fr, rep.norm_fb):
        print(f"    {t:+.5f}  {a:.4e} {r:.4e} {b:.4e}")
