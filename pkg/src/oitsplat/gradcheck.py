"""Analytic-versus-finite-difference gradient verification on small random scenes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .backward import PARAMETERS, analytic_as_dict, backward_oit, branch_state, finite_diff_oracle
from .camera import Camera
from .rasterizer import render_oit
from .scene import GaussianCloud, inverse_sigmoid


def random_scene(seed: int, n: int = 10, size: int = 8):
    """A float64 scene of ``n`` Gaussians in front of a ``size`` x ``size`` camera.

    Returns ``(cloud, camera, background, target)``.
    """
    rng = np.random.default_rng(seed)
    c = GaussianCloud.zeros(n, dtype=np.float64, sigma=6.0)
    z = rng.uniform(2.0, 4.0, n)
    c.mu[:, 0] = rng.uniform(-0.6, 0.6, n) * z
    c.mu[:, 1] = rng.uniform(-0.6, 0.6, n) * z
    c.mu[:, 2] = z
    c.log_scale[:] = np.log(0.4 * 8.0 / size) + 0.3 * rng.standard_normal((n, 3))
    c.quat[:] = rng.standard_normal((n, 4))
    c.normalize_quats()
    c.opacity_logit[:] = inverse_sigmoid(rng.uniform(0.3, 0.95, n))
    c.sh_color[:] = 0.2 * rng.standard_normal((n, 16, 3))
    c.weight_sh[:] += 0.3 * rng.standard_normal((n, 16))
    f = 7.0 * size / 8.0
    cam = Camera(size, size, f, f, size / 2.0, size / 2.0, np.eye(4))
    bg = rng.uniform(0.0, 1.0, 3)
    target = rng.uniform(0.0, 1.0, (size, size, 3))
    return c, cam, bg, target


@dataclass
class AttributeResult:
    name: str
    checked: int = 0
    skipped: int = 0  # stencil straddled a discrete branch on both sides
    failures: int = 0
    max_rel: float = 0.0
    max_abs_small: float = 0.0
    worst: Optional[tuple] = None  # (scene, flat index)

    @property
    def passed(self) -> bool:
        return self.failures == 0


@dataclass
class GradcheckReport:
    attributes: Dict[str, AttributeResult]
    scenes: int
    rtol: float
    atol: float
    failures: List[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.attributes.values())

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "scenes": self.scenes,
            "rtol": self.rtol,
            "atol": self.atol,
            "attributes": {
                k: {
                    "checked": a.checked,
                    "skipped": a.skipped,
                    "failures": a.failures,
                    "max_rel_error": a.max_rel,
                    "max_abs_error_small": a.max_abs_small,
                    "argmax": list(a.worst) if a.worst else None,
                }
                for k, a in self.attributes.items()
            },
            "failures": self.failures[:50],
        }

    def table(self) -> str:
        lines = [f"{'attribute':<14}{'checked':>8}{'skipped':>8}{'max rel':>12}{'max abs*':>12}  argmax    status"]
        for a in self.attributes.values():
            arg = f"{a.worst[0]}:{a.worst[1]}" if a.worst else "-"
            status = "ok" if a.passed else f"FAIL ({a.failures})"
            lines.append(
                f"{a.name:<14}{a.checked:>8}{a.skipped:>8}{a.max_rel:>12.3e}{a.max_abs_small:>12.3e}  {arg:<9} {status}"
            )
        lines.append("* absolute error over entries with magnitude below 1e-3")
        return "\n".join(lines)


def check_scene(cloud, cam, bg, target, step=1e-5, backend=None):
    """``{(name, flat_index): (analytic, numeric)}`` for one scene."""

    def loss_fn(cl):
        img = render_oit(cl, cam, bg, backend=backend).image
        return 0.5 * float(np.sum((img - target) ** 2))

    out = render_oit(cloud, cam, bg, backend=backend)
    g = backward_oit(cloud, cam, out, out.image - target, backend=backend)
    an = analytic_as_dict(g)
    fd = finite_diff_oracle(cloud, loss_fn, list(an), step, state_fn=lambda cl: branch_state(cl, cam))
    return {k: (an[k], fd[k]) for k in an}


def run_gradcheck(
    scenes: int = 25,
    n_gaussians: int = 10,
    size: int = 8,
    seed: int = 0,
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    small: float = 1e-3,
    backend=None,
) -> GradcheckReport:
    attrs = {name: AttributeResult(name) for name in PARAMETERS}
    report = GradcheckReport(attrs, scenes, rtol, atol)
    for s in range(scenes):
        cloud, cam, bg, target = random_scene(seed + s, n_gaussians, size)
        for (name, idx), (a, n) in check_scene(cloud, cam, bg, target, step, backend).items():
            res = attrs[name]
            if np.isnan(n):
                res.skipped += 1
                continue
            res.checked += 1
            err = abs(a - n)
            mag = max(abs(a), abs(n))
            if mag < small:
                res.max_abs_small = max(res.max_abs_small, err)
                ok = err <= atol
                score = err / atol
            else:
                rel = err / mag
                if rel > res.max_rel:
                    res.max_rel = rel
                    res.worst = (s, idx)
                ok = rel <= rtol
                score = rel / rtol
            if not ok:
                res.failures += 1
                report.failures.append(
                    {"scene": s, "attribute": name, "index": idx, "analytic": a, "numeric": n, "score": score}
                )
    return report
