"""Parameter tables across model modes."""
from __future__ import annotations

from ..geometry import default_grid, default_intrinsics
from ..net import MODES, build_model, param_count
from ..synthworld import DEFAULT_CLASSES, read_dataset
from .config import RunConfig


def mode_counts(cfg: RunConfig) -> dict[str, dict[str, int]]:
    """param_count of every mode for the architecture described by ``cfg``.

    The class count and grid come from the config's dataset when it is
    readable, otherwise from the built-in defaults.
    """
    num_classes, grid, intr = len(DEFAULT_CLASSES), None, default_intrinsics()
    if cfg.data:
        ds = read_dataset(cfg.data)
        num_classes, grid = ds.num_classes, ds.grid
        if ds.ids:
            intr = ds.intrinsics(ds.ids[0])
    if cfg.grid is not None:
        grid = cfg.grid.build()
    grid = grid or default_grid()
    mcfg = cfg.updated(**{"model.mode": "hybrid", "scheme.scheme": "none"}).build_model_config(num_classes, grid, intr)
    model = build_model(mcfg, seed=0)
    return {m: param_count(model, m) for m in MODES}


def additivity_residual(counts: dict[str, dict[str, int]]) -> int:
    """hybrid - (cbft_only + cfft_only - shared encoder + fusion + main decoder); zero when the
    per-mode counts partition the parameters consistently."""
    h, g, l = counts["hybrid"], counts["cbft_only"], counts["cfft_only"]
    return h["total"] - (g["total"] + l["total"] - h["encoder"] + h["fusion"] + h["decoder"])


def format_counts(counts: dict[str, dict[str, int]]) -> str:
    names = []
    for c in counts.values():
        names += [k for k in c if k != "total" and k not in names]
    names.append("total")
    modes = list(counts)
    w0 = max(len(n) for n in names)
    ws = [max(len(m), 10) for m in modes]
    lines = ["submodule".ljust(w0) + "  " + "  ".join(m.rjust(w) for m, w in zip(modes, ws))]
    lines.append("-" * w0 + "  " + "  ".join("-" * w for w in ws))
    for n in names:
        cells = [str(counts[m][n]) if n in counts[m] else "-" for m in modes]
        lines.append(n.ljust(w0) + "  " + "  ".join(c.rjust(w) for c, w in zip(cells, ws)))
    r = additivity_residual(counts)
    lines.append("")
    lines.append(f"additivity hybrid = cbft_only + cfft_only - encoder + fusion + decoder: "
                 f"{'exact' if r == 0 else f'off by {r}'}")
    return "\n".join(lines) + "\n"
