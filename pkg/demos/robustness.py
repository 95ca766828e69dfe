"""DUC with a mistuned turbine emulator.

Both emulator time constants are scaled by a factor.  A mismatch leaves the
equilibrium unchanged but costs settling time and overshoot.

Run: python demos/robustness.py      (about 10 s)
"""
from ucgrid import experiments as ex

sc = ex.load_scenario("robustness.toml")
print("focus", sc.focus)
print("factor  settled  settling [s]  overshoot  oscillating")
for row in ex.run_robustness_sweep(sc):
    print("%6.2f  %-7s  %12.2f  %9.4f  %s" % (row["factor"], row["settled"], row["settling_time"],
                                            row["overshoot"], row["oscillating"]))
