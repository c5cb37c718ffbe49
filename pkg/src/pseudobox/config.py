"""Pipeline configuration: one JSON document holding every tunable."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .boxfit import CLOSENESS_D0, DEFAULT_SIZE_PRIORS, BoxfitOptions, ClassSize, load_size_priors
from .errors import ConfigurationError
from .evaluation import DEFAULT_BINS, INTERPOLATIONS, IOU_MODES, validate_bins
from .evolution import DEFAULT_IOU_THRESHOLD, DEFAULT_MAX_PHASES, DEFAULT_PSI, DEFAULT_WINDOW, EvolutionState
from .filtering import FilterParams
from .frame_io import DEFAULT_CLASS_NAMES
from .fusion import DEFAULT_MAX_PER_INSTANCE

# JSON key -> attribute, where they differ
_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class PipelineConfig:
    dataset_root: Optional[str] = None
    lam: float = 0.01
    k_neighbors: int = 16
    alpha: float = 1.0
    max_per_instance: int = DEFAULT_MAX_PER_INSTANCE
    align_depth: bool = False
    local_filter: bool = True
    global_filter: bool = True
    keep_unanchored: bool = False
    closeness_d0: float = CLOSENESS_D0
    size_prior_path: Optional[str] = None
    class_table: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_NAMES))
    psi: float = DEFAULT_PSI
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    window: int = DEFAULT_WINDOW
    max_phases: int = DEFAULT_MAX_PHASES
    decay_base: str = "euler"
    merge_mode: str = "algorithm"
    max_epochs: Optional[int] = None
    range_bins: tuple = DEFAULT_BINS
    eval_iou: float = 0.25
    eval_mode: str = "bev"
    interpolation: str = "all"
    workers: int = 1

    def __post_init__(self):
        table = {}
        for k, v in dict(self.class_table).items():
            try:
                cid = int(k)
            except (TypeError, ValueError):
                raise ConfigurationError(f"class table keys must be integer ids, got {k!r}") from None
            if cid < 1 or not isinstance(v, str) or not v:
                raise ConfigurationError(f"invalid class table entry {k!r}: {v!r}")
            table[cid] = v
        if len(set(table.values())) != len(table):
            raise ConfigurationError("class table names must be unique")
        object.__setattr__(self, "class_table", table)
        object.__setattr__(self, "range_bins", validate_bins(self.range_bins))
        try:
            self.filter_params()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        self.evolution_state()
        if int(self.max_per_instance) != self.max_per_instance or self.max_per_instance < 1:
            raise ConfigurationError("max_per_instance must be an integer >= 1")
        if not self.closeness_d0 > 0:
            raise ConfigurationError("closeness_d0 must be > 0")
        if self.max_epochs is not None and (int(self.max_epochs) != self.max_epochs or self.max_epochs < 1):
            raise ConfigurationError("max_epochs must be a positive integer")
        if not 0.0 < self.eval_iou <= 1.0:
            raise ConfigurationError("eval_iou must lie in (0, 1]")
        if self.eval_mode not in IOU_MODES:
            raise ConfigurationError(f"eval_mode must be one of {IOU_MODES}")
        if self.interpolation not in INTERPOLATIONS:
            raise ConfigurationError(f"interpolation must be one of {INTERPOLATIONS}")
        if int(self.workers) != self.workers or self.workers < 1:
            raise ConfigurationError("workers must be an integer >= 1")
        for name in ("align_depth", "local_filter", "global_filter", "keep_unanchored"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigurationError(f"{name} must be true or false")

    # -- views for the modules ----------------------------------------------

    def filter_params(self) -> FilterParams:
        return FilterParams(self.lam, int(self.k_neighbors), self.alpha)

    def boxfit_options(self) -> BoxfitOptions:
        return BoxfitOptions(self.local_filter, self.global_filter, self.keep_unanchored, d0=self.closeness_d0)

    def evolution_state(self) -> EvolutionState:
        return EvolutionState(1, self.psi, self.iou_threshold, int(self.window), int(self.max_phases),
                              self.decay_base, self.merge_mode)

    def size_priors(self) -> dict[int, ClassSize]:
        if self.size_prior_path is None:
            return dict(DEFAULT_SIZE_PRIORS)
        return load_size_priors(self.size_prior_path)

    # -- serialisation -------------------------------------------------------

    def as_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        doc["class_table"] = {str(k): v for k, v in sorted(self.class_table.items())}
        doc["range_bins"] = [list(b) for b in self.range_bins]
        return doc

    def canonical_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        """Digest of the settings plus the size-prior file contents.

        Path fields and the worker count are left out: they do not change
        any output.
        """
        doc = self.as_dict()
        for key in ("dataset_root", "size_prior_path", "workers"):
            doc.pop(key)
        h = hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode())
        if self.size_prior_path is not None:
            h.update(Path(self.size_prior_path).read_bytes())
        return h.hexdigest()

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, value in doc.items():
            name = _ALIASES.get(key, key)
            if name not in known or key == "lam":
                raise ConfigurationError(f"unknown configuration field {key!r}")
            kw[name] = value
        if "range_bins" in kw:
            kw["range_bins"] = tuple(tuple(b) for b in kw["range_bins"])
        for key in ("dataset_root", "size_prior_path"):
            if kw.get(key) is not None and base_dir is not None:
                kw[key] = str(Path(base_dir) / kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def load_config(path) -> PipelineConfig:
    """Read a JSON config; relative paths inside it resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON in {path}: {exc}") from None
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return PipelineConfig.from_dict(doc, base_dir=path.parent)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{exc} ({path})") from None
