"""A small replicated experiment against an out-of-process simulator.

Run with ``python demos/external_experiment.py [output_dir]``.

The simulator is a child process speaking the line protocol (a handshake line,
then one request per line and one float per reply). Here the child is the
built-in server wrapping the sinusoidal testbed, so results match an in-process
run exactly; point ``command`` at any program that speaks the protocol.
"""
import sys
import tempfile
from pathlib import Path

from seqcal.experiment import load_spec, run_experiment
from seqcal.report import format_report, write_report

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="seqcal-"))
out.mkdir(parents=True, exist_ok=True)
spec_file = out / "spec.ini"
spec_file.write_text(f"""\
[experiment]
testbed = sine2d
methods = Ap, Lhs
n0 = 10
n = 10
replicates = 2
seed = 3
output = results

[external]
command = {sys.executable} -m seqcal.simserver sine2d
timeout = 20
""")

spec = load_spec(spec_file)
results = run_experiment(spec)
for r in results:
    print(f"replicate {r.replicate} {r.method:4s} status {r.status}  final MADp {r.rows[-1]['mad_p']:.3g}")
print()
print(format_report(write_report(spec.output)))
print(f"\nfiles in {spec.output}")
