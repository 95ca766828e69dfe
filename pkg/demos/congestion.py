"""Line 19-20 capped at 2 pu, and who respects the cap.

AGC only restores frequency and the area schedule, so the line stays
overloaded.  UC and DUC price the limit through rho and push the flow back
to the bound, ending at the dispatch optimum.

Run: python demos/congestion.py      (about 15 s)
"""
from ucgrid import experiments as ex

sc = ex.load_scenario("congested.toml")
limit = sc.load_grid().P_max[sc.load_grid().line_index(19, 20)]
print("limit on 19-20: %.3f pu" % limit)
for kind in ("AGC", "UC", "DUC"):
    res = ex.run_scenario(sc.with_controller(kind=kind))
    flow = res.series["flow[19-20]"]
    print("%-3s  peak %.4f  final %.6f  final max|omega| %.1e"
          % (kind, flow.max(), flow[-1], res.stats["final_max_omega"]))

res, sol, report = ex.verify_scenario(sc.with_controller(kind="DUC"))
print("\noracle flow on 19-20: %.6f" % sol.P[sc.load_grid().line_index(19, 20)])
print(report)
