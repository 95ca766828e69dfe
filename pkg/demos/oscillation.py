"""The 7.35 pu generator loss at bus 38, UC against DUC.

With the second-order turbine the UC multiplier at bus 34 keeps ringing,
while DUC damps out and settles.

Run: python demos/oscillation.py      (about 10 s)
"""
from ucgrid import experiments as ex

sc = ex.load_scenario("fig4.toml")
for kind in ("UC", "DUC"):
    res = ex.run_scenario(sc.with_controller(kind=kind))
    flag, ratio = res.oscillation["lam[34]"]
    lam = res.series["lam[34]"]
    late = lam[res.t > res.t[-1] - 20.0]
    print("%-3s  oscillating=%-5s  ratio %.3f  late peak-to-peak %.2e  settled=%s"
          % (kind, flag, ratio, late.max() - late.min(), res.settled))
