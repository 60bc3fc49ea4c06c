"""Run the invariant suite, then break the graph and watch it fail."""

from unittest import mock

from dmps import latent_graph
from dmps.invariants import run_invariant_suite

report = run_invariant_suite()
print(f"{len(report.checks) - len(report.failures)}/{len(report.checks)} checks pass in {sum(c.seconds for c in report.checks):.1f}s")

# Skip the row normalisation: W is then just K.
with mock.patch.object(latent_graph, "normalize_to_stochastic", lambda k, *a, **kw: k):
    broken = run_invariant_suite(only=["latent_graph.W_row_stochastic"])
for check in broken.checks:
    print("FAIL" if not check.passed else "PASS", check.name, "|", check.detail.splitlines()[0])
