"""``gptqt`` command line: gen, quantize, eval, bench, compare.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bc_gemm, calib_stats, fuse_pack, gptq_engine, plotting, report, tensor_store
from .gptq_engine import Method, QuantMethod

log = logging.getLogger("gptqt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ALL_METHODS = tuple(m.value for m in Method)
EVAL_COLUMNS = ("layer", "bits", "weight_mse", "out_rel_err")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    weights: list[str] = field(default_factory=list)
    calib: str | None = None
    val: str | None = None
    out: str | None = None
    packed: str | None = None
    report: str | None = None
    method: str = "GPTQT"
    methods: list[str] = field(default_factory=lambda: list(ALL_METHODS))
    bits: int = 3
    inter_bits: int = 5
    range_bits: int = 1
    grid_points: int = 64
    damp: float = calib_stats.DEFAULT_DAMP
    block: int = 128
    seed: int = 0
    format: str = "csv"
    act_order: bool = False
    figures: bool = True
    # gen / synthetic compare
    rows: int = 256
    cols: int = 256
    nsamples: int = 2048
    rho: float = 0.9
    scale: float = 1.0
    trials: int = 1
    sweep: str = "methods"
    # bench
    sizes: list[tuple[int, int]] = field(default_factory=lambda: [(1024, 1024), (2048, 2048), (4096, 4096)])
    reps: int = 5

    def quant_method(self, tag: str | None = None, **over) -> QuantMethod:
        kw = dict(
            tag=tag or self.method,
            bits=self.bits,
            inter_bits=self.inter_bits,
            range_bits=self.range_bits,
            grid_points=self.grid_points,
        )
        kw.update(over)
        return QuantMethod(**kw)

    def validate(self) -> "RunConfig":
        try:
            for tag in [self.method, *self.methods]:
                Method(tag)
        except ValueError as exc:
            raise ConfigError(f"unknown method: {exc}") from None
        tags = {self.method} if self.command == "quantize" else set(self.methods)
        if self.command in ("quantize", "compare"):
            if "GPTQT" in tags and self.bits >= self.inter_bits and self.sweep != "inter-bits":
                raise ConfigError(
                    f"GPTQT needs --bits < --inter-bits (got {self.bits} >= {self.inter_bits})"
                )
            for tag in tags:
                try:
                    self.quant_method(tag).validate()
                except ValueError as exc:
                    raise ConfigError(f"{tag}: {exc}") from None
            if self.damp <= 0:
                raise ConfigError("--damp must be > 0")
            if self.block < 1:
                raise ConfigError("--block must be >= 1")
        if self.format not in ("csv", "markdown"):
            raise ConfigError("--format must be csv or markdown")
        if self.command == "bench" and self.reps < 3:
            raise ConfigError("--reps must be >= 3")
        if not 0 <= self.rho < 1:
            raise ConfigError("--rho must lie in [0, 1)")
        return self

    def header(self) -> dict:
        keys = ("method", "bits", "inter_bits", "range_bits", "grid_points", "damp", "block", "seed")
        return {k: getattr(self, k) for k in keys}


def _require_file(path: str | None, flag: str) -> Path:
    if not path:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{flag}: no such file {path}")
    return p


def _require_parent(path: str | None, flag: str) -> Path:
    if not path:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.parent.is_dir():
        raise ConfigError(f"{flag}: directory {p.parent} does not exist")
    return p


def _emit(cfg: RunConfig, kind: str, columns, rows) -> str:
    text = report.render(cfg.format, kind, cfg.header(), columns, rows)
    if cfg.report:
        _require_parent(cfg.report, "--report").write_text(text)
    else:
        sys.stdout.write(text)
    return text


def _figure_path(cfg: RunConfig, suffix: str = "") -> Path | None:
    if not (cfg.report and cfg.figures):
        return None
    p = Path(cfg.report)
    return p.with_name(p.stem + suffix + ".png")


# --------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> list[Path]:
    if not cfg.out:
        raise ConfigError("--out is required")
    out = Path(cfg.out)
    if not out.is_dir():
        raise ConfigError(f"--out: directory {out} does not exist")
    files = {
        "weights.gqtf": tensor_store.gen_weights(cfg.rows, cfg.cols, cfg.seed, cfg.scale),
        "calib.gqtf": tensor_store.gen_activations(cfg.cols, cfg.nsamples, cfg.seed + 1, cfg.rho),
        "val.gqtf": tensor_store.gen_activations(cfg.cols, cfg.nsamples, cfg.seed + 2, cfg.rho),
    }
    written = []
    for name, t in files.items():
        tensor_store.write_tensor(out / name, t)
        written.append(out / name)
        log.info("wrote %s %s", out / name, t.shape)
    return written


def _hessian(X, damp: float) -> calib_stats.HessianState:
    return calib_stats.from_activations(X, damp)


def _layer_metrics(layer_name, W, W_dq, hess, X_eval, method: QuantMethod, ql, pack_bytes) -> dict:
    W = np.asarray(W, np.float64)
    D = np.asarray(W_dq, np.float64) - W
    return {
        "layer": layer_name,
        "method": method.tag.value,
        "bits": method.bits,
        "inter_bits": method.inter_bits if method.tag is Method.GPTQT else method.bits,
        "range_bits": method.range_bits if method.tag is Method.GPTQT else 0,
        "weight_mse": float(np.mean(D * D)),
        "proxy_loss": gptq_engine.proxy_loss(W, W_dq, hess.H),
        "out_rel_err": gptq_engine.layer_output_error(W, W_dq, X_eval),
        "plan_s": ql.plan_seconds,
        "quant_s": ql.quant_seconds,
        "pack_bytes": pack_bytes,
    }


def _run_method(W, hess, method: QuantMethod, cfg: RunConfig):
    ql = gptq_engine.quantize_layer(W, hess, method, block=cfg.block, act_order=cfg.act_order)
    packed = fuse_pack.pack(ql)
    return ql, packed


def cmd_quantize(cfg: RunConfig) -> dict:
    wpath = _require_file(cfg.weights[0] if cfg.weights else None, "--weights")
    cpath = _require_file(cfg.calib, "--calib")
    out = _require_parent(cfg.out, "--out")
    W = tensor_store.read_tensor(wpath)
    X = tensor_store.read_tensor(cpath)
    X_eval = tensor_store.read_tensor(_require_file(cfg.val, "--val")) if cfg.val else X
    _check_shapes(W, X, X_eval)
    method = cfg.quant_method()
    try:
        hess = _hessian(X, cfg.damp)
        ql, packed = _run_method(W, hess, method, cfg)
    except (ValueError, calib_stats.HessianError) as exc:
        raise RuntimeError(f"layer {wpath.name}: {exc}") from exc
    fuse_pack.serialize(packed, out)
    row = _layer_metrics(
        wpath.stem, W, fuse_pack.dequantize_packed(packed), hess, X_eval, method, ql,
        out.stat().st_size,
    )
    _emit(cfg, "quantize", report.QUANT_COLUMNS, [row])
    return row


def _check_shapes(W, *acts):
    if W.ndim != 2:
        raise ConfigError(f"weights must be 2-D, got shape {W.shape}")
    for X in acts:
        if X.ndim != 2 or X.shape[0] != W.shape[1]:
            raise ConfigError(f"activations {X.shape} do not match weight columns {W.shape[1]}")


def cmd_eval(cfg: RunConfig) -> dict:
    P = fuse_pack.deserialize(_require_file(cfg.packed, "--packed"))
    wpath = _require_file(cfg.weights[0] if cfg.weights else None, "--weights")
    W = tensor_store.read_tensor(wpath)
    X = tensor_store.read_tensor(_require_file(cfg.val, "--val"))
    _check_shapes(W, X)
    if (P.rows, P.cols) != W.shape:
        raise ConfigError(f"packed shape {(P.rows, P.cols)} does not match weights {W.shape}")
    W_dq = fuse_pack.dequantize_packed(P)
    D = W_dq.astype(np.float64) - W
    row = {
        "layer": wpath.stem,
        "bits": P.m,
        "weight_mse": float(np.mean(D * D)),
        "out_rel_err": gptq_engine.layer_output_error(W, W_dq, X),
    }
    _emit(cfg, "eval", EVAL_COLUMNS, [row])
    return row


def cmd_bench(cfg: RunConfig) -> list[dict]:
    rows = bc_gemm.bench(cfg.sizes, cfg.bits, cfg.reps, cfg.seed)
    _emit(cfg, "bench", report.BENCH_COLUMNS, rows)
    fig = _figure_path(cfg)
    if fig:
        plotting.bench_bars(rows, fig)
    return rows


def _compare_layers(cfg: RunConfig):
    """Yield ``(name, W, X_calib, X_eval)`` for files or seeded synthetic layers."""
    if cfg.weights:
        X = tensor_store.read_tensor(_require_file(cfg.calib, "--calib"))
        X_eval = tensor_store.read_tensor(_require_file(cfg.val, "--val")) if cfg.val else X
        for w in cfg.weights:
            W = tensor_store.read_tensor(_require_file(w, "--weights"))
            _check_shapes(W, X, X_eval)
            yield Path(w).stem, W, X, X_eval
        return
    for t in range(cfg.trials):
        s = cfg.seed + t
        yield (
            f"synthetic-{s}",
            tensor_store.gen_weights(cfg.rows, cfg.cols, s, cfg.scale),
            tensor_store.gen_activations(cfg.cols, cfg.nsamples, 10_000 + s, cfg.rho),
            tensor_store.gen_activations(cfg.cols, cfg.nsamples, 20_000 + s, cfg.rho),
        )


def _compare_methods(cfg: RunConfig) -> list[QuantMethod]:
    if cfg.sweep == "methods":
        return [cfg.quant_method(t) for t in cfg.methods]
    if cfg.sweep == "inter-bits":
        return [cfg.quant_method("GPTQT", inter_bits=n) for n in range(3, 7) if n > cfg.bits]
    if cfg.sweep == "range":
        return [cfg.quant_method("GPTQT", range_bits=r) for r in (0, 1, 2)]
    raise ConfigError(f"unknown sweep {cfg.sweep!r}")


def cmd_compare(cfg: RunConfig) -> list[dict]:
    methods = _compare_methods(cfg)
    if not methods:
        raise ConfigError("sweep produced no configurations")
    out = []
    for name, W, X, X_eval in _compare_layers(cfg):
        hess = _hessian(X, cfg.damp)
        for method in methods:
            try:
                ql, packed = _run_method(W, hess, method, cfg)
            except (ValueError, calib_stats.HessianError) as exc:
                raise RuntimeError(f"layer {name}, {method.tag.value}: {exc}") from exc
            nbytes = fuse_pack.packed_nbytes(packed.rows, packed.cols, packed.m)
            out.append(_layer_metrics(name, W, ql.dequantized, hess, X_eval, method, ql, nbytes))
            log.info("%s %s out_rel_err=%.5f", name, method.tag.value, out[-1]["out_rel_err"])
    _emit(cfg, f"compare-{cfg.sweep}", report.QUANT_COLUMNS, out)
    fig = _figure_path(cfg)
    if fig:
        if cfg.sweep == "methods":
            plotting.method_bars(out, fig)
        else:
            key = "inter_bits" if cfg.sweep == "inter-bits" else "range_bits"
            plotting.sweep_lines(out, fig, key)
            plotting.sweep_lines(out, _figure_path(cfg, "-proxy"), key, metric="proxy_loss")
    return out


COMMANDS = {
    "gen": cmd_gen,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "compare": cmd_compare,
}


# --------------------------------------------------------------------------


def _sizes(text: str) -> list[tuple[int, int]]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        r, _, c = tok.partition("x")
        out.append((int(r), int(c or r)))
    return out


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gptqt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, quant=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("csv", "markdown"), default="csv")
        p.add_argument("--report", help="write the report here instead of stdout")
        p.add_argument("--no-figures", dest="figures", action="store_false",
                       help="skip PNG figures next to --report")
        if quant:
            p.add_argument("--method", default="GPTQT", help=" | ".join(ALL_METHODS))
            p.add_argument("--bits", type=int, default=3, help="final bit count m")
            p.add_argument("--inter-bits", type=int, default=5, help="intermediate bit count n")
            p.add_argument("--range", dest="range_bits", type=int, default=1,
                           help="scale re-exploration range in bits (0 disables)")
            p.add_argument("--grid-points", type=int, default=64)
            p.add_argument("--damp", type=float, default=calib_stats.DEFAULT_DAMP)
            p.add_argument("--block", type=int, default=128)
            p.add_argument("--act-order", action="store_true",
                           help="quantize columns by descending Hessian diagonal")

    g = sub.add_parser("gen", help="write synthetic weights, calibration and validation tensors")
    g.add_argument("--out", required=True, help="existing output directory")
    g.add_argument("--rows", type=int, default=256)
    g.add_argument("--cols", type=int, default=256)
    g.add_argument("--nsamples", type=int, default=2048)
    g.add_argument("--rho", type=float, default=0.9)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("quantize", help="quantize one layer and write a GQTQ file")
    q.add_argument("--weights", required=True)
    q.add_argument("--calib", required=True)
    q.add_argument("--val")
    q.add_argument("--out", required=True, help="packed GQTQ output path")
    common(q)

    e = sub.add_parser("eval", help="held-out output error of a packed layer")
    e.add_argument("--packed", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--val", required=True)
    common(e, quant=False)

    b = sub.add_parser("bench", help="time dense, dequantize-then-multiply and LUT matvec")
    b.add_argument("--sizes", type=_sizes, default=[(1024, 1024), (2048, 2048), (4096, 4096)],
                   help="comma list of N or RxC")
    b.add_argument("--bits", type=int, default=3)
    b.add_argument("--reps", type=int, default=5)
    common(b, quant=False)

    c = sub.add_parser("compare", help="methods table or GPTQT parameter sweeps")
    c.add_argument("--weights", nargs="*", default=[])
    c.add_argument("--calib")
    c.add_argument("--val")
    c.add_argument("--methods", type=_csv_list, default=list(ALL_METHODS))
    c.add_argument("--sweep", choices=("methods", "inter-bits", "range"), default="methods")
    c.add_argument("--trials", type=int, default=1, help="synthetic layers when no --weights")
    c.add_argument("--rows", type=int, default=256)
    c.add_argument("--cols", type=int, default=256)
    c.add_argument("--nsamples", type=int, default=2048)
    c.add_argument("--rho", type=float, default=0.9)
    c.add_argument("--scale", type=float, default=1.0)
    common(c)
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    known = set(RunConfig.__dataclass_fields__)
    kw = {k: v for k, v in vars(ns).items() if k in known and v is not None}
    if isinstance(kw.get("weights"), str):
        kw["weights"] = [kw["weights"]]
    return RunConfig(**kw).validate()


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if ns.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_from_args(ns)
        COMMANDS[cfg.command](cfg)
    except (ConfigError, tensor_store.TensorFormatError, fuse_pack.PackFormatError) as exc:
        print(f"gptqt {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"gptqt {ns.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
