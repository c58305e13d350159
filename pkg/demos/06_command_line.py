"""The same pipeline through the command line entry point (equivalent to running `gradleak ...`)."""

import json
from pathlib import Path

from gradleak.cli import main

out = Path("demo_out/cli")
out.mkdir(parents=True, exist_ok=True)


def run(*args):
    print("$ gradleak", " ".join(args))
    code = main(list(args))
    print("  exit", code)
    return code


run("synth-data", "--gen", "checker_textures", "--n", "64", "--channels", "1", "--out", str(out / "data"))
run("train-victim", "--data", str(out / "data"), "--seed", "0", "--out", str(out / "victim.gvt"))
run("train-prior", "--data", str(out / "data"), "--epochs", "2", "--out", str(out / "prior.gvt"))
run("capture", "--victim", str(out / "victim.gvt"), "--data", str(out / "data"), "--batch-indices", "3,9",
    "--out", str(out / "capture" / "capture.gvt"))

cfg = json.loads(json.dumps({"iterations": 200, "seeds": [0, 1]}))
(out / "config.json").write_text(json.dumps(cfg))
run("attack", "--capture", str(out / "capture" / "capture.gvt"), "--victim", str(out / "victim.gvt"),
    "--prior", str(out / "prior.gvt"), "--config", str(out / "config.json"), "--out", str(out / "run"))
run("report", "--run", str(out / "run"), "--format", "csv", "--images")

# replaying the manifest reproduces the reconstructions byte for byte
run("attack", "--from-manifest", str(out / "run" / "manifest.json"), "--out", str(out / "replay"))
same = (out / "run/seed_0/recon.gvt").read_bytes() == (out / "replay/seed_0/recon.gvt").read_bytes()
print("replay identical:", same)

# errors map to exit codes: 2 usage, 3 contract, 4 numeric
run("attack", "--capture", str(out / "missing.gvt"), "--victim", str(out / "victim.gvt"), "--out", str(out / "x"))
run("no-such-command")
