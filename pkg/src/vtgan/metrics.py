"""Image-quality distances (FID, KID) and classification metrics, plus the evaluation harness."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import DistortionConfig
from .data import CLASSES, DataError, read_labels, read_png
from .distortions import default_spec, distort
from .extractors import FeatureExtractor

CONDITIONS = ("none", "blur", "sharp", "noise", "pinch", "whirl")
EIG_TOL = 1e-8


class UndefinedMetricError(ZeroDivisionError):
    pass


@dataclass
class FeatureCloud:
    matrix: np.ndarray
    extractor_id: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        if m.ndim != 2:
            raise ValueError(f"feature cloud must be n x d, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("feature cloud has non-finite entries")
        self.matrix = m

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


def _check_pair(a: FeatureCloud, b: FeatureCloud) -> None:
    if a.d != b.d:
        raise ValueError(f"feature dimensions differ: {a.d} vs {b.d}")
    if a.extractor_id != b.extractor_id:
        raise ValueError(f"feature clouds come from different extractors: {a.extractor_id!r} vs {b.extractor_id!r}")
    if a.n < 2 or b.n < 2:
        raise ValueError(f"need at least 2 samples per cloud, got {a.n} and {b.n}")


def _psd_eigs(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    floor = -EIG_TOL * max(1.0, float(np.max(np.abs(vals))))
    if np.any(vals < floor):
        raise np.linalg.LinAlgError(f"{what} has a negative eigenvalue {vals.min():.3e}")
    return np.maximum(vals, 0.0), vecs


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((Sa Sb)^(1/2)) computed as Tr((Sb^(1/2) Sa Sb^(1/2))^(1/2)), which is symmetric PSD."""
    vb, qb = _psd_eigs(sigma_b, "covariance")
    root_b = (qb * np.sqrt(vb)) @ qb.T
    vals, _ = _psd_eigs(root_b @ sigma_a @ root_b, "covariance product")
    return float(np.sum(np.sqrt(vals)))


def fid(a: FeatureCloud, b: FeatureCloud) -> float:
    _check_pair(a, b)
    mu_a, mu_b = a.matrix.mean(axis=0), b.matrix.mean(axis=0)
    sa = np.atleast_2d(np.cov(a.matrix, rowvar=False, ddof=1))
    sb = np.atleast_2d(np.cov(b.matrix, rowvar=False, ddof=1))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * trace_sqrt_product(sa, sb))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kid(a: FeatureCloud, b: FeatureCloud) -> float:
    """Unbiased squared MMD with a cubic polynomial kernel, over the full sets.

    With equal set sizes the samples are treated as paired and the cross term
    skips ``i == j`` (the one-sample U-statistic), so ``kid(a, a) == 0``
    exactly. Unequal sizes use the two-sample form with the full cross mean.
    """
    _check_pair(a, b)
    x, y = a.matrix, b.matrix
    m, n = x.shape[0], y.shape[0]
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        sxy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        sxy = kxy.mean()
    return float(sxx + syy - 2.0 * sxy)


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    positive_class: str = "Normal"

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")
        if self.positive_class not in CLASSES:
            raise ValueError(f"positive class must be one of {CLASSES}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, truth: Sequence[str], predicted: Sequence[str], positive_class: str = "Normal"):
        if len(truth) != len(predicted):
            raise ValueError("truth and prediction lengths differ")
        t = np.array([x == positive_class for x in truth])
        p = np.array([x == positive_class for x in predicted])
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p)), positive_class)


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        raise UndefinedMetricError(f"{name} is undefined: zero denominator")
    return num / den


def classification_metrics(counts: ConfusionCounts) -> tuple[float, float, float]:
    """``(accuracy, sensitivity, specificity)`` as fractions."""
    return (
        _ratio(counts.tp + counts.tn, counts.total, "accuracy"),
        _ratio(counts.tp, counts.tp + counts.fn, "sensitivity"),
        _ratio(counts.tn, counts.tn + counts.fp, "specificity"),
    )


# --- evaluation harness -----------------------------------------------------------


@dataclass
class EvalRow:
    condition: str
    n: int
    source: str
    fid: float
    kid: float
    accuracy: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None


@dataclass
class EvalReport:
    extractor_id: str
    rows: list[EvalRow] = field(default_factory=list)

    def row(self, condition: str) -> EvalRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def to_jsonl(self) -> str:
        head = json.dumps({"extractor_id": self.extractor_id, "conditions": [r.condition for r in self.rows]})
        return "\n".join([head] + [json.dumps(asdict(r)) for r in self.rows]) + "\n"

    def table(self) -> str:
        def pct(v):
            return "-" if v is None else f"{100 * v:.1f}"

        header = ("condition", "n", "FID", "KID", "Acc", "Sens", "Spec", "source")
        lines = [header] + [
            (r.condition, str(r.n), _num(r.fid), _num(r.kid), pct(r.accuracy), pct(r.sensitivity),
             pct(r.specificity), r.source)
            for r in self.rows
        ]
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text(self.to_jsonl())
        (out / "report.txt").write_text(self.table())


def _num(v: float) -> str:
    return f"{round(v, 4) + 0.0:.4f}"  # avoid printing -0.0000


def _image_names(directory: Path) -> list[str]:
    return sorted(p.name for p in directory.iterdir() if p.is_file() and p.suffix.lower() == ".png")


def _load_dir(directory: Path, names: Sequence[str]) -> np.ndarray:
    errors, images = [], []
    for name in names:
        try:
            images.append(read_png(directory / name, 1))
        except DataError as exc:
            errors.append(str(exc))
    if errors:
        raise DataError("unreadable images:\n  " + "\n  ".join(errors))
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"images in {directory} differ in size: {sorted(shapes)}")
    return np.stack(images)


def _match(gen_dir: Path, ref_names: Sequence[str]) -> list[str]:
    gen_names = _image_names(gen_dir)
    if len(gen_names) != len(ref_names):
        raise DataError(f"{gen_dir} has {len(gen_names)} images, reference has {len(ref_names)}")
    missing = sorted(set(ref_names) - set(gen_names))
    if missing:
        raise DataError(f"{gen_dir} is missing: {', '.join(missing)}")
    return list(ref_names)


def _label_for(name: str, labels: Mapping[str, str]) -> str:
    stem = Path(name).stem
    if stem in labels:
        return labels[stem]
    for key, lab in labels.items():
        if stem.startswith(key + "_"):
            return lab
    raise DataError(f"no label for {name}")


Classifier = Callable[[np.ndarray, np.ndarray], np.ndarray]


def evaluate_run(
    generated_dir: str | Path,
    reference_dir: str | Path,
    labels: Mapping[str, str] | str | Path | None = None,
    extractor: FeatureExtractor | None = None,
    distortions: DistortionConfig | None = None,
    classifier: Classifier | None = None,
    fundus_dir: str | Path | None = None,
    conditions: Sequence[str] = CONDITIONS,
    seed: int = 0,
) -> EvalReport:
    """FID/KID (and optionally classification metrics) per distortion condition.

    For condition ``c`` the generated images are taken from ``generated_dir/c/``
    when that directory exists; otherwise the distortion is applied to the flat
    generated images. ``classifier(fundus, angio)`` returns Normal-class
    probabilities for a batch and needs ``fundus_dir`` plus ``labels``.
    """
    from .extractors import metric_extractor

    extractor = extractor or metric_extractor()
    distortions = distortions or DistortionConfig()
    gen_root, ref_root = Path(generated_dir), Path(reference_dir)
    for d in (gen_root, ref_root):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    if isinstance(labels, (str, Path)):
        labels = read_labels(labels)
    ref_names = _image_names(ref_root)
    reference = _load_dir(ref_root, ref_names)
    ref_cloud = FeatureCloud(extractor.pooled(reference), extractor.extractor_id)

    fundus = None
    truth = None
    if classifier is not None:
        if fundus_dir is None or labels is None:
            raise ValueError("classification needs fundus_dir and labels")
        fundus = np.stack([read_png(Path(fundus_dir) / n, 3) for n in ref_names])
        truth = [_label_for(n, labels) for n in ref_names]

    report = EvalReport(extractor.extractor_id)
    for cond in conditions:
        sub = gen_root / cond
        if sub.is_dir():
            gen = _load_dir(sub, _match(sub, ref_names))
            source = f"{cond}/"
        else:
            gen = _load_dir(gen_root, _match(gen_root, ref_names))
            if cond != "none":
                spec = default_spec(cond, distortions, seed)
                gen = np.stack([distort(im, spec) for im in gen])
            source = "distorted-output" if cond != "none" else "flat"
        cloud = FeatureCloud(extractor.pooled(gen), extractor.extractor_id)
        row = EvalRow(cond, len(gen), source, fid(cloud, ref_cloud), kid(cloud, ref_cloud))
        if classifier is not None:
            probs = np.asarray(classifier(fundus, gen))
            predicted = ["Normal" if p >= 0.5 else "Abnormal" for p in probs]
            counts = ConfusionCounts.from_labels(truth, predicted)
            try:
                row.accuracy, row.sensitivity, row.specificity = classification_metrics(counts)
            except UndefinedMetricError:
                # a condition set holding one class only; accuracy is still defined
                row.accuracy = (counts.tp + counts.tn) / counts.total
        report.rows.append(row)
    return report
