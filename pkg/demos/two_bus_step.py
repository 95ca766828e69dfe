"""A 0.2 pu load step on two buses, restored by DUC.

Run: python demos/two_bus_step.py
"""
import numpy as np

from ucgrid import experiments as ex

sc = ex.load_scenario("two_bus_step.toml")
res, sol, report = ex.verify_scenario(sc)

# frequency dips, then the integral action on lam brings it back to zero
w = res.series["omega[2]"]
print("nadir of omega[2]:   %.5f pu at t = %.2f s" % (w.min(), res.t[np.argmin(w)]))
print("final omega[2]:      %.2e pu" % w[-1])
print("settled:", res.settled, "at t =", res.settling_time, "s")

# the load bus takes part in the response; the split follows 1/alpha
print("final p:", res.final["p"])
print("oracle p:", sol.p)
print(report)
