import numpy as np
from scipy.spatial.transform import Rotation


def compose(r0_axis_angle, t0, omega, center):
    r0 = Rotation.from_rotvec(r0_axis_angle)
    rel = Rotation.from_rotvec(omega)
    r1 = rel * r0
    t1 = rel.apply(t0) + (np.eye(3) - rel.as_matrix()) @ center
    return r1.as_rotvec(), t1


def report(name, r0aa, t0, omega, center):
    r1aa, t1 = compose(np.array(r0aa), np.array(t0), np.array(omega),
                       np.array(center))
    n0, n1 = np.linalg.norm(t0), np.linalg.norm(t1)
    print(f"--- {name}")
    print(f"r1 axis_angle: {list(np.round(r1aa, 10))}")
    print(f"t1:            {list(np.round(t1, 10))}")
    print(f"|t0|={n0:.8f} |t1|={n1:.8f} ratio {n1 / n0:.6f}")
    print(f"dt_hat = {np.linalg.norm(np.array(t1) / n1 - np.array(t0) / n0):.4f}")


# threeplane fg centroid: pixel (96, 76), plane 0.15x - 0.1y - 0.98z = -3
fx = fy = 160.0
ray = np.array([(96 - 96.0) / fx, (76 - 72.0) / fy, 1.0])
z = 3.0 / (0.98 + 0.1 * ray[1] - 0.15 * ray[0])
C3 = ray * z
print("threeplane fg centroid:", C3)
report("threeplane", [0.002, -0.004, 0.001], [0.0, 0.01, 0.05],
       [0.0, 0.0, 0.004], C3)

# ksens fg centroid: pixel (64, 48) = principal point, plane
# 0.05x + 0.08y - z = -2.85 -> C on the optical axis
Ck = np.array([0.0, 0.0, 2.85])
print("ksens fg centroid:", Ck)
report("ksens", [0.001, -0.002, 0.0005], [0.0, 0.008, 0.03],
       [0.0, 0.0, 0.012], Ck)
