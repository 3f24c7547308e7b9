"""The declarative harness end to end: config in, verified artifacts out.

Equivalent command line:

    lagsgd run demos/configs/three_arm.ini --out runs/demo
    lagsgd verify runs/demo
    lagsgd perf demos/configs/scenario.txt
"""

from pathlib import Path

from lagsgd import run_experiment, verify_run

config = Path(__file__).parent / "configs" / "three_arm.ini"
out = Path("runs/demo")

result = run_experiment(config, out_override=out)
print((out / "summary.txt").read_text())
print(f"exit code: {result.exit_code}")

report = verify_run(out)
print(f"verification passed: {report.passed}")
for line in report.summary_lines():
    print(" ", line)
