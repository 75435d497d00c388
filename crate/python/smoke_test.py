"""Smoke test for the latentpde_py extension.

Builds the extension with cargo (unless LATENTPDE_PY_LIB points at a built
library), imports it from a temporary directory and exercises the main
entry points.
"""

import importlib
import json
import math
import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_library() -> Path:
    lib = os.environ.get("LATENTPDE_PY_LIB")
    if lib:
        return Path(lib)
    subprocess.run(
        ["cargo", "build", "--release", "-p", "latentpde-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
    for name in ("liblatentpde_py.so", "liblatentpde_py.dylib", "latentpde_py.dll"):
        if (target / name).exists():
            return target / name
    sys.exit(f"built library not found in {target}")


def load(lib: Path, workdir: Path):
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy(lib, workdir / f"latentpde_py{suffix}")
    sys.path.insert(0, str(workdir))
    return importlib.import_module("latentpde_py")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        lp = load(build_library(), tmp)
        print("latentpde_py", lp.__version__)

        g = lp.Grid(0.0, 2 * math.pi, 64)
        xs = g.points()
        d = lp.fourier_derivative([math.sin(3 * x) for x in xs], 1, g)
        err = max(abs(a - 3 * math.cos(3 * x)) for a, x in zip(d, xs))
        assert err < 1e-12, err

        kdv = lp.Grid.for_equation("kdv", 128)
        u0 = [-8.0 / math.cosh(2.0 * x) ** 2 for x in kdv.points()]
        traj = lp.solve_trajectory(u0, "kdv", kdv, 1e-5, 0.01, 3)
        assert len(traj) == 3 and all(math.isfinite(v) for v in traj[-1])

        u = [math.sin(x) + 0.1 for x in xs]
        assert lp.rel_rmse([2 * v for v in u], u) == 1.0
        assert lp.tv_norm([0.0, 1.0, 2.0], 1, 3, 1, 1.0) == 2.0

        a = lp.Ansatz("vb")
        assert a.num_params == 84
        vb = lp.Grid.for_equation("vb", 64)
        target = a.evaluate(a.init_theta(5), vb.points())
        _, errors = a.fit(target, vb, steps=300, batch=1)
        print("auto-decoder relRMSE after 300 steps:", errors[0])

        cfg = json.loads(lp.resolve_config('{"equation": "ks"}'))
        assert cfg["dmd"]["rank"] == 64

        small = {
            "equation": "ks",
            "seed": 1,
            "grid": {"num_points": 32},
            "data": {"num_traj": 2, "num_steps": 24, "eval_num_traj": 2},
            "encoder": {"num_levels": 2},
            "dmd": {"rank": 4},
        }
        (tmp / "config.json").write_text(json.dumps(small))
        c = str(tmp / "config.json")
        assert lp.run_cli(["generate", "--config", c, "--out", str(tmp / "train")]) == 0
        assert lp.run_cli(["dmd", "--config", c, "--data", str(tmp / "train"), "--out", str(tmp / "dmd")]) == 0
        ds = lp.load_dataset(str(tmp / "train"))
        assert ds["shape"] == [2, 24, 32], ds["shape"]

        m = lp.DmdModel.fit(ds["u"], 2, 24, lp.Grid(0.0, 64.0, 32), 4)
        print("dmd spectral radius:", m.spectral_radius())
        assert lp.run_cli(["rollout", "--config", c]) == 2
    print("smoke test passed")


if __name__ == "__main__":
    main()
