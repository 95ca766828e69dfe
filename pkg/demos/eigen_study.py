"""Small-signal spectra of UC and DUC on the all-generator 39-bus grid.

UC is stable with a first-order turbine and loses stability once the
governor lag is added.  DUC feeds back an emulated turbine instead of the
measured one, and stays stable.

Run: python demos/eigen_study.py
"""
import numpy as np

from ucgrid import controller as ctl
from ucgrid import experiments as ex
from ucgrid import stability as st
from ucgrid.dynamics import TurbineModel

sc = ex.load_scenario("eigen39.toml")
print("gains scaled by", sc.gain_scale)
for (kind, turbine), rep in ex.run_eigen_study(sc).items():
    w = rep.eigenvalues
    print("%-4s %-13s abscissa %+.3e  unstable modes %d  (%d eigenvalues)"
          % (kind, turbine.value, rep.abscissa, rep.n_unstable, len(w)))

# abscissa against gain: UC crosses zero early, DUC does not
grid = sc.load_grid()
base = sc.resolved_controller(grid)
scales = np.logspace(-3, -1, 5)
uc = st.gain_sweep(grid, base, scales, TurbineModel.SECOND_ORDER)
duc = st.gain_sweep(grid, ctl.ControllerConfig(**{**base.__dict__, "kind": ctl.DUC}), scales)
print("\n   scale      UC        DUC")
for (s, a), (_, b) in zip(uc, duc):
    print("%8.4f  %+.2e  %+.2e" % (s, a, b))
