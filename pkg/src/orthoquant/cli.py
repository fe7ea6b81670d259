"""Command-line front end.

Commands: ``quantize``, ``attn-check``, ``simulate``, ``sweep``, ``selftest``.
Reports are sorted-key JSON plus CSV tables and carry no timestamps, so equal
configs give byte-identical files.  Exit codes: 0 ok, 1 usage/config error,
2 check failure, 3 infeasible hardware configuration.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .accelsim import HardwareConfig, bfu_fpadd, bfu_fpmul, int8_mac_bitfusion, simulate_model
from .attention import SoftmaxStats, TileConfig, attention_core, streaming_update, tiled_attention
from .numerics import PrecisionMode, bf16_add, bf16_mul, bf16_same
from .pipeline import ModelSpec, bitwidth_sweep, init_model, run_quantized, run_reference
from .quant import Method, synth_activations
from .transforms import DctVariant, apply_dct, apply_idct, apply_wht, hadamard_matrix

HW_ENV = "ORTHOQUANT_HW"

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_INFEASIBLE = 0, 1, 2, 3

DEFAULTS: dict[str, dict] = {
    "model": {"S": 2, "P": 256, "C": 512, "heads": 8, "blocks": 4, "mlp_ratio": 4, "rope_base": 100.0},
    "run": {"seeds": "0", "modes": "w4a4,w4a8", "methods": "rtn,wht,versaq", "input": "gaussian",
            "nonlinear": "bf16", "dct_variant": "orthonormal"},
    "tiles": {"t_q": 64, "t_k": 64, "t_v": 2048},
    "simulate": {"frames": "1,2,4,8,16", "modes": "bf16,w4a8,w4a4", "method": "versaq", "hw": ""},
    "sweep": {"bits": "3-8", "fixed_bits": 8, "input": "saturated"},
    "attn": {"lengths": "64,192,1024,1030", "tiles": "64x64x2048,32x16x64,100x48x96", "heads": 2,
             "d_k": 64, "tolerance": 1e-10},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


def parse_int_list(text: str) -> list[int]:
    """``"0,2,5-7"`` -> ``[0, 2, 5, 6, 7]``."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if part[0] != "-" else part[1:].split("-", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise UsageError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise UsageError("empty integer list")
    return out


def _names(text: str) -> list[str]:
    return [t.strip().lower() for t in str(text).split(",") if t.strip()]


def load_config(path: str | None) -> dict[str, dict]:
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path is None:
        return cfg
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    except configparser.Error as e:
        raise UsageError(f"malformed config {path}: {e}") from None
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise UsageError(f"unknown config section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in DEFAULTS[sec]:
                raise UsageError(f"unknown config key {sec}.{key}")
            default = DEFAULTS[sec][key]
            try:
                if isinstance(default, bool):
                    val = cp.getboolean(sec, key)
                elif isinstance(default, int):
                    val = int(raw)
                elif isinstance(default, float):
                    val = float(raw)
                else:
                    val = raw.strip()
            except ValueError:
                raise UsageError(f"bad value for {sec}.{key}: {raw!r}") from None
            cfg[sec][key] = val
    return cfg


def apply_flags(cfg: dict, args) -> dict:
    if getattr(args, "seed", None):
        cfg["run"]["seeds"] = args.seed
    if getattr(args, "mode", None):
        cfg["run"]["modes"] = args.mode
        cfg["simulate"]["modes"] = args.mode
    if getattr(args, "method", None):
        cfg["run"]["methods"] = args.method
        cfg["simulate"]["method"] = args.method
    if getattr(args, "hw", None):
        cfg["simulate"]["hw"] = args.hw
    elif not cfg["simulate"]["hw"] and os.environ.get(HW_ENV):
        cfg["simulate"]["hw"] = os.environ[HW_ENV]
    return cfg


def model_spec(cfg: dict, S: int | None = None) -> ModelSpec:
    m = cfg["model"]
    try:
        return ModelSpec(S if S is not None else m["S"], m["P"], m["C"], m["heads"], m["blocks"],
                         m["mlp_ratio"], m["rope_base"])
    except ValueError as e:
        raise UsageError(f"invalid model geometry: {e}") from None


def _modes(text) -> list[PrecisionMode]:
    try:
        return [PrecisionMode.parse(n) for n in _names(text)]
    except ValueError as e:
        raise UsageError(str(e)) from None


def _methods(text) -> list[Method]:
    try:
        return [Method.parse(n) for n in _names(text)]
    except ValueError as e:
        raise UsageError(str(e)) from None


def _hw(cfg) -> HardwareConfig:
    path = cfg["simulate"]["hw"]
    if not path:
        return HardwareConfig()
    try:
        return HardwareConfig.from_file(path)
    except OSError as e:
        raise UsageError(f"cannot read hardware config {path}: {e.strerror}") from None
    except ValueError as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------------------
# report writing


def _outdir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {path}: {e.strerror}") from None
    if not os.access(p, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return p


def _write(path: Path, text: str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise UsageError(f"cannot write {path}: {e.strerror}") from None


def write_json(path: Path, payload) -> None:
    _write(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] for h in header])
    _write(path, buf.getvalue())


def _envelope(command: str, cfg: dict, body: dict) -> dict:
    return {"command": command, "version": __version__, "config": cfg, **body}


# ---------------------------------------------------------------------------
# commands


def cmd_quantize(cfg: dict, out: Path) -> int:
    spec = model_spec(cfg)
    run = cfg["run"]
    seeds = parse_int_list(run["seeds"])
    modes, methods = _modes(run["modes"]), _methods(run["methods"])
    if any(m is PrecisionMode.BF16 for m in modes):
        raise UsageError("quantize compares integer modes only (w4a4, w4a8)")
    per_run = out / "quantize_runs"
    per_run.mkdir(exist_ok=True)
    rows = []
    for seed in seeds:
        model = init_model(spec, seed)
        x = synth_activations(run["input"], spec.tokens, spec.C, seed + 10_000)
        ref = run_reference(model, x)
        for method in methods:
            for mode in modes:
                res = run_quantized(model, x, mode, method, reference=ref, dct_variant=run["dct_variant"])
                row = {"method": method.value, "mode": mode.value, "seed": seed, **res.metrics}
                rows.append(row)
                write_json(per_run / f"{method.value}_{mode.value}_seed{seed}.json",
                           _envelope("quantize", cfg, {"result": row, "layers": res.layer_metrics}))
    rows.sort(key=lambda r: (r["method"], r["mode"], r["seed"]))
    header = ["method", "mode", "seed", "mse", "cosine", "max_abs"]
    write_csv(out / "quantize.csv", header, rows)
    summary = {}
    for r in rows:
        summary.setdefault(f"{r['method']}/{r['mode']}", []).append(r["cosine"])
    means = {k: float(np.mean(v)) for k, v in sorted(summary.items())}
    write_json(out / "quantize.json", _envelope("quantize", cfg, {"rows": rows, "mean_cosine": means}))
    for k, v in means.items():
        print(f"{k:16s} mean cosine {v:.6f}")
    return EXIT_OK


def _tile_list(text) -> list[TileConfig]:
    out = []
    for part in _names(text):
        try:
            tq, tk, tv = (int(v) for v in part.split("x"))
            out.append(TileConfig(tq, tk, tv))
        except ValueError as e:
            raise UsageError(f"bad tile config {part!r}: {e}") from None
    return out


def cmd_attn_check(cfg: dict, out: Path) -> int:
    a = cfg["attn"]
    seeds = parse_int_list(cfg["run"]["seeds"])
    tol = a["tolerance"]
    results = []
    ok = True
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for L in parse_int_list(a["lengths"]):
            q, k, v = (rng.standard_normal((a["heads"], L, a["d_k"])) for _ in range(3))
            ref = attention_core(q, k, v, a["d_k"] ** -0.5)
            for tiles in _tile_list(a["tiles"]):
                got = tiled_attention(q, k, v, tiles)
                dev = float(np.abs(got - ref).max())
                passed = dev <= tol
                ok &= passed
                results.append({"seed": seed, "length": L, "tiles": f"{tiles.t_q}x{tiles.t_k}x{tiles.t_v}",
                                "max_abs_dev": dev, "pass": passed})
    write_json(out / "attn_check.json", _envelope("attn-check", cfg, {"results": results, "pass": ok}))
    worst = max(r["max_abs_dev"] for r in results)
    print(f"attn-check: {len(results)} cases, worst deviation {worst:.3e}, {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_simulate(cfg: dict, out: Path) -> int:
    s = cfg["simulate"]
    hw = _hw(cfg)
    method = _methods(s["method"])[0]
    t = cfg["tiles"]
    tiles = TileConfig(t["t_q"], t["t_k"], t["t_v"])
    rows, reports = [], []
    infeasible = False
    for mode in _modes(s["modes"]):
        for S in parse_int_list(s["frames"]):
            rep = simulate_model(model_spec(cfg, S), hw, mode, method, tiles)
            infeasible |= not rep.feasible
            rows.append({"mode": mode.value, "S": S, "total_cycles": rep.total_cycles,
                         "weight_load": rep.breakdown["weight_load"], "attention": rep.breakdown["attention"],
                         "other": rep.breakdown["other"], "energy_j": rep.energy_total})
            reports.append({"mode": mode.value, "S": S, "report": rep.to_dict()})
    rows.sort(key=lambda r: (r["mode"], r["S"]))
    write_csv(out / "simulate.csv", ["mode", "S", "total_cycles", "weight_load", "attention", "other", "energy_j"], rows)
    write_json(out / "simulate.json", _envelope("simulate", {**cfg, "hardware": hw.to_mapping()},
                                                {"reports": reports}))
    for r in rows:
        print(f"{r['mode']:5s} S={r['S']:<3d} cycles={r['total_cycles']:>12d} "
              f"attn share={r['attention'] / r['total_cycles']:.3f}")
    if infeasible:
        print("simulate: infeasible hardware configuration (see flags in simulate.json)", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_sweep(cfg: dict, out: Path) -> int:
    spec = model_spec(cfg)
    run, sw = cfg["run"], cfg["sweep"]
    seeds = parse_int_list(run["seeds"])
    bits = parse_int_list(sw["bits"])
    if min(bits) < 3 or max(bits) > 8:
        raise UsageError("sweep bits must lie in [3, 8]")
    methods = _methods(run["methods"])
    tables: dict[str, list] = {"weight": [], "activation": []}
    for seed in seeds:
        model = init_model(spec, seed)
        x = synth_activations(sw["input"], spec.tokens, spec.C, seed + 10_000)
        ref = run_reference(model, x)
        for fixed in tables:
            for method in methods:
                for r in bitwidth_sweep(model, x, fixed, bits, fixed_bits=sw["fixed_bits"], method=method,
                                        reference=ref, nonlinear=run["nonlinear"]):
                    tables[fixed].append({"seed": seed, **r})
    header = ["method", "seed", "bits", "weight_bits", "act_bits", "mse", "cosine", "max_abs"]
    for fixed, rows in tables.items():
        rows.sort(key=lambda r: (r["method"], r["seed"], r["bits"]))
        write_csv(out / f"sweep_fix_{fixed}.csv", header, rows)
    write_json(out / "sweep.json", _envelope("sweep", cfg, {"fix_weight": tables["weight"],
                                                            "fix_activation": tables["activation"]}))
    print(f"sweep: {len(tables['weight'])} + {len(tables['activation'])} rows")
    return EXIT_OK


def selftest_suites(seed: int = 0, bfu_pairs: int = 100_000) -> list[dict]:
    """Fast correctness checks; each entry is {name, pass, detail}."""
    rng = np.random.default_rng(seed)
    res = []

    a, b = np.meshgrid(np.arange(-128, 128), np.arange(-128, 128))
    bad = int(np.count_nonzero(int8_mac_bitfusion(a, b) != a * b))
    res.append({"name": "bitfusion_exhaustive", "pass": bad == 0, "detail": f"{bad} mismatches of 65536"})

    x = rng.integers(0, 1 << 16, bfu_pairs).astype(np.uint16)
    y = rng.integers(0, 1 << 16, bfu_pairs).astype(np.uint16)
    finite = (((x >> 7) & 0xFF) != 255) & (((y >> 7) & 0xFF) != 255)
    x, y = x[finite], y[finite]
    for name, f, ref in (("bfu_fpadd", bfu_fpadd, bf16_add), ("bfu_fpmul", bfu_fpmul, bf16_mul)):
        bad = int(np.count_nonzero(~bf16_same(f(x, y), ref(x, y, ftz=True))))
        res.append({"name": name, "pass": bad == 0, "detail": f"{bad} mismatches of {x.size}"})

    worst = max(float(np.abs(hadamard_matrix(n) @ hadamard_matrix(n).T - np.eye(n)).max())
                for n in (2 ** k for k in range(1, 11)))
    res.append({"name": "hadamard_orthogonality", "pass": worst < 1e-12, "detail": f"max dev {worst:.3e}"})
    xm = rng.standard_normal((16, 256))
    wht_dev = float(np.abs(apply_wht(xm) - xm @ hadamard_matrix(256)).max())
    res.append({"name": "fast_wht", "pass": wht_dev < 1e-10, "detail": f"max dev {wht_dev:.3e}"})
    rt = float(np.abs(apply_idct(apply_dct(xm)) - xm).max())
    res.append({"name": "dct_roundtrip", "pass": rt < 1e-10, "detail": f"max dev {rt:.3e}"})
    irt = float(np.abs(apply_idct(apply_dct(xm, block=32, variant=DctVariant.INTEGER), block=32,
                                  variant=DctVariant.INTEGER) - xm).max() / np.abs(xm).max())
    res.append({"name": "integer_dct_roundtrip", "pass": irt <= 1e-3, "detail": f"rel dev {irt:.3e}"})

    worst = 0.0
    for _ in range(50):
        s = rng.standard_normal((4, int(rng.integers(2, 300)))) * 5
        cuts = np.sort(rng.choice(np.arange(1, s.shape[1]), size=min(5, s.shape[1] - 1), replace=False))
        st = SoftmaxStats.init((4,))
        for blk in np.split(s, cuts, axis=1):
            mx = blk.max(axis=1)
            st = streaming_update(st, mx, np.exp(blk - mx[:, None]).sum(axis=1))
        m = s.max(axis=1)
        sig = np.exp(s - m[:, None]).sum(axis=1)
        worst = max(worst, float(np.abs(st.m - m).max()), float(np.abs(st.sigma / sig - 1).max()))
    res.append({"name": "streaming_softmax", "pass": worst < 1e-12, "detail": f"max dev {worst:.3e}"})
    return res


def cmd_selftest(cfg: dict, out: Path) -> int:
    seed = parse_int_list(cfg["run"]["seeds"])[0]
    res = selftest_suites(seed)
    ok = all(r["pass"] for r in res)
    write_json(out / "selftest.json", _envelope("selftest", cfg, {"suites": res, "pass": ok}))
    for r in res:
        print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['name']:24s} {r['detail']}")
    if not ok:
        print("failed: " + ", ".join(r["name"] for r in res if not r["pass"]), file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "quantize": cmd_quantize,
    "attn-check": cmd_attn_check,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with [sections]")
    common.add_argument("--seed", help="seed list, e.g. 0,1,2 or 0-9")
    common.add_argument("--out", default="reports", help="output directory (default: reports)")
    common.add_argument("--hw", help=f"hardware config file (default: ${HW_ENV} or built-in)")
    common.add_argument("--mode", help="precision mode(s): bf16, w4a8, w4a4 (comma list)")
    common.add_argument("--method", help="method(s): rtn, wht, versaq (comma list)")
    p = _Parser(prog="orthoquant", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
        out = _outdir(args.out)
        return COMMANDS[args.command](cfg, out)
    except (UsageError, ValueError) as e:
        print(f"orthoquant: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
