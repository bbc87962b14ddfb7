"""Command-line entry point (``cgsysid <subcommand> ...``).

Every subcommand reads and writes the file formats of :mod:`cgsysid.io`.
Bad arguments or malformed inputs end the process with status 2 and a
single ``cgsysid: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys

from . import experiment as E
from . import io
from . import kernels as K
from . import optim
from . import signals as S
from . import synthetic
from . import volterra as V
from .filament import FilamentParams, simulate

log = logging.getLogger("cgsysid")


class CLIError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# model spec files


def parse_model_spec(obj) -> tuple[V.ModelSpec, object]:
    """``{"n": 128, "kernels": {"2": {"repr": ..., "k": 1, "leaf_size": 2}},
    "input_offset": 0.0 | "mean"}`` -> (ModelSpec, offset setting)."""
    if not isinstance(obj, dict):
        raise CLIError("model spec must be a JSON object")
    try:
        n = int(obj["n"])
        kernels = {}
        for key, kd in (obj.get("kernels") or {}).items():
            order = int(key)
            kd = dict(kd, d=order, n=n)
            kernels[order] = K.spec_from_dict(kd)
        spec = V.ModelSpec(n, kernels)
    except KeyError as exc:
        raise CLIError(f"model spec lacks field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid model spec: {exc}") from None
    offset = obj.get("input_offset", 0.0)
    if offset != "mean" and not isinstance(offset, (int, float)):
        raise CLIError("input_offset must be a number or \"mean\"")
    return spec, offset


# ---------------------------------------------------------------------------
# subcommands


def cmd_param_count(args) -> None:
    spec = K.KernelSpec(args.repr, args.d, args.n, args.k, args.leaf)
    print(f"param_count {K.param_count(spec)}")
    if args.repr == "hierarchical":
        p = int(math.log2(args.n))
        print(f"closed_form_bound {K.param_bound_closed_form(p, args.d, args.k)}")


def cmd_gen_signal(args) -> None:
    if args.kind == "excitation":
        sig = S.excitation(args.length, args.seed, args.lo, args.hi, args.cutoff,
                           sample_rate=args.rate)
    elif args.kind == "lowpass":
        sig = S.lowpass_noise(args.length, args.cutoff, args.seed, args.rate)
    else:
        sig = S.white_noise(args.length, args.sigma, args.seed, args.rate)
    io.write_signal(args.out, sig)


def cmd_simulate_filament(args) -> None:
    voltage = io.read_signal(args.signal)
    params = FilamentParams()
    if args.params:
        obj = io.load_json(args.params)
        if not isinstance(obj, dict):
            raise CLIError(f"{args.params}: filament parameters must be a JSON object")
        try:
            params = FilamentParams.from_dict(obj)
        except (TypeError, ValueError) as exc:
            raise CLIError(f"{args.params}: {exc}") from None
    sim = simulate(voltage, params, args.substeps)
    io.write_dataset(args.out, V.Dataset(voltage, sim.luminosity))
    if sim.clamped:
        print(f"temperature clamped at zero {sim.clamped} times", file=sys.stderr)


def cmd_fit(args) -> None:
    data = io.read_dataset(args.data)
    spec, offset = parse_model_spec(io.load_json(args.model_spec))
    heldout = io.read_dataset(args.heldout) if args.heldout else None
    if offset == "mean":
        offset = float(data.input.samples.mean())
    config = optim.TrainConfig(lr=args.lr, epochs=args.epochs, l2=args.l2, seed=args.seed,
                               tol=args.tol, patience=args.patience)
    try:
        model = V.init_model(spec, args.seed, config.init_scale, data.input.sample_rate, offset)
        model, hist = optim.train(model, data, config, heldout)
    except optim.TrainingDiverged as exc:
        raise CLIError(f"training diverged: {exc}; try a smaller --lr") from None
    io.save_model(args.out, model)
    if args.history:
        io.write_rows(args.history, ("epoch", "loss", "vaf_on_heldout"), hist.rows())
    line = f"epochs {len(hist.loss) - 1} best_loss {hist.best_loss:.6g}"
    if heldout is not None:
        line += f" heldout_vaf {V.heldout_vaf(model, heldout):.4f}"
    print(line)


def cmd_eval(args) -> None:
    data = io.read_dataset(args.data)
    model = io.load_model(args.model)
    if len(data) < model.n:
        raise CLIError(f"{args.data}: {len(data)} samples, model memory is {model.n}")
    print(f"{V.heldout_vaf(model, data):.6f}")


def cmd_export_kernel(args) -> None:
    model = io.load_model(args.model)
    if args.order == 1:
        io.write_matrix(args.out, model.h1[None, :])
        return
    if args.order not in model.kernels:
        raise CLIError(f"model has no order-{args.order} kernel (orders: "
                       f"{', '.join(str(d) for d in sorted(model.kernels)) or 'none'})")
    ker = model.kernels[args.order]
    if ker.spec.d != 2:
        raise CLIError("heatmap export needs a 2-D kernel")
    io.write_matrix(args.out, K.to_dense(ker).values)


def cmd_export_operator(args) -> None:
    io.write_matrix(args.out, synthetic.build_operator(args.N).A)


def cmd_synth_sweep(args) -> None:
    for c in args.classes:
        if c not in synthetic.MODEL_CLASSES:
            raise CLIError(f"unknown class {c!r}; choose from {', '.join(synthetic.MODEL_CLASSES)}")
    report = synthetic.sweep(args.sigmas, args.classes, args.target_vaf, N=args.N,
                             repeats=args.repeats, cap=args.cap, seed=args.seed)
    report.to_csv(args.out)


def cmd_budget_curve(args) -> None:
    for c in args.classes:
        if c not in E.FILAMENT_CLASSES:
            raise CLIError(f"unknown class {c!r}; choose from {', '.join(E.FILAMENT_CLASSES)}")
    for mode in args.offsets:
        if mode not in E.OFFSET_MODES:
            raise CLIError(f"unknown offset mode {mode!r}; choose from {', '.join(E.OFFSET_MODES)}")
    config = E.FILAMENT_CONFIG.with_(epochs=args.epochs, lr=args.lr)
    report, cells = E.budget_curve(args.budgets, args.classes, args.seed, args.repeats, args.n,
                                   args.l2_grid, args.offsets, config)
    report.to_csv(args.out)
    if args.cells:
        io.write_rows(args.cells, ("budget", "class", "repeat", "l2", "offset", "validation_vaf",
                                   "heldout_vaf"),
                      [(c.budget, c.model_class, c.repeat, c.l2, c.offset_mode, c.validation_vaf,
                        c.test_vaf) for c in cells])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cgsysid", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("param-count", help="exact parameter count and closed-form bound")
    p.add_argument("--n", type=int, required=True, help="kernel side (memory)")
    p.add_argument("--d", type=int, default=2, help="kernel order")
    p.add_argument("--k", type=int, default=1, help="off-diagonal rank")
    p.add_argument("--leaf", type=int, default=2, help="dense leaf side")
    p.add_argument("--repr", choices=K.REPRS, default="hierarchical")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("gen-signal", help="write an excitation or noise signal")
    p.add_argument("--length", type=int, required=True, help="number of samples")
    p.add_argument("--kind", choices=("excitation", "lowpass", "white"), default="excitation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=1.0, help="white-noise std")
    p.add_argument("--cutoff", type=float, default=0.05, help="low-pass cutoff, cycles/sample")
    p.add_argument("--lo", type=float, default=0.0, help="excitation lower bound")
    p.add_argument("--hi", type=float, default=1.5, help="excitation upper bound")
    p.add_argument("--rate", type=float, default=S.DEFAULT_RATE, help="sample rate, Hz")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_signal)

    p = sub.add_parser("simulate-filament", help="drive the filament model with a voltage signal")
    p.add_argument("--signal", required=True, help="voltage signal CSV")
    p.add_argument("--params", help="JSON with filament parameters (defaults otherwise)")
    p.add_argument("--substeps", type=int, default=8, help="RK4 steps per sample")
    p.add_argument("--out", required=True, help="dataset CSV (input,output)")
    p.set_defaults(func=cmd_simulate_filament)

    p = sub.add_parser("fit", help="train a Volterra model on a dataset")
    p.add_argument("--data", required=True, help="training dataset CSV")
    p.add_argument("--model-spec", required=True, help="JSON model spec")
    p.add_argument("--l2", type=float, default=0.0, help="L2 penalty strength")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=1500)
    p.add_argument("--tol", type=float, default=1e-9, help="relative loss-change tolerance")
    p.add_argument("--patience", type=int, default=100, help="epochs the tolerance must hold")
    p.add_argument("--heldout", help="dataset CSV monitored during training")
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--history", help="training history CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="print held-out VAF (percent) of a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-kernel", help="write a kernel as an n x n CSV heatmap")
    p.add_argument("--model", required=True)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_kernel)

    p = sub.add_parser("export-operator", help="write the discretized log-kernel operator")
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_operator)

    p = sub.add_parser("synth-sweep", help="samples needed per class and noise level")
    p.add_argument("--sigmas", type=_floats, default=list(synthetic.DEFAULT_SIGMAS))
    p.add_argument("--classes", type=_names, default=list(synthetic.MODEL_CLASSES))
    p.add_argument("--target-vaf", type=float, default=95.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--cap", type=int, default=8192, help="largest training set tried")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_sweep)

    p = sub.add_parser("budget-curve", help="held-out VAF per class and training budget")
    p.add_argument("--budgets", type=_ints, required=True, help="valid training samples, e.g. 750,22500")
    p.add_argument("--classes", type=_names, default=list(E.FILAMENT_CLASSES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--n", type=int, default=E.FILAMENT_MEMORY, help="model memory")
    p.add_argument("--l2-grid", type=_floats, default=list(E.L2_GRID))
    p.add_argument("--offsets", type=_names, default=list(E.OFFSET_MODES),
                   help="input offset modes to try: none, mean")
    p.add_argument("--lr", type=float, default=E.FILAMENT_CONFIG.lr)
    p.add_argument("--epochs", type=int, default=E.FILAMENT_CONFIG.epochs)
    p.add_argument("--out", required=True)
    p.add_argument("--cells", help="optional per-cell CSV with the selected hyperparameters")
    p.set_defaults(func=cmd_budget_curve)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, io.FormatError, ValueError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"cgsysid: error: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cgsysid: error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
