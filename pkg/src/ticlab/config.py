"""Flat key-value experiment configuration.

Config files are plain text, one `key = value` per line, `#` comments.
Every key maps onto a field of ExperimentConfig and is typed by that field's
default; CLI flags override file values. Unknown keys are errors so typos
cannot silently change an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .backbone import BackboneConfig
from .dap import DapConfig
from .errors import ConfigError
from .streams import StreamSpec, TaskStream, generate_synthetic


@dataclass(frozen=True)
class ExperimentConfig:
    # stream
    num_classes: int = 20
    num_tasks: int = 10
    n_max: int = 200
    rho: float = 0.05
    ordering: str = "shuffled"
    order_seed: int = 7
    data_seed: int = 11
    test_per_class: int = 50
    input_dim: int = 32
    class_sep: float = 3.0
    noise_std: float = 1.0
    # the shuffled permutation is redrawn per run seed so seed averages cover
    # different arrival orders; disable to pin one permutation for all seeds
    reshuffle_per_seed: bool = True

    # backbone
    token_count: int = 4
    embed_dim: int = 16
    prompt_len: int = 4
    freeze_seed: int = 123

    # training
    mode: str = "dap"
    epochs_phase1: int = 5
    epochs_phase2: int = 5
    batch_size: int = 64
    epsilon: float = 1e-6
    fixed_lambda: float = 0.5
    lambda_semantics: str = "as_equations"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.9
    eps_opt: float = 1e-8
    prompt_init_std: float = 0.02

    # evaluation
    probe_epochs: int = 200

    # experiment driver
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    output_dir: str = "runs"

    # ablation sweep axes
    ablate_modes: tuple[str, ...] = (
        "dap",
        "general_only",
        "boosting_only",
        "stabilizing_only",
        "task_specific_only",
    )
    ablate_orderings: tuple[str, ...] = ("descending", "ascending", "shuffled")
    lambda_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)

    # ------------------------------------------------------------------
    # derived sub-configs
    # ------------------------------------------------------------------

    def stream_spec(self, ordering: str | None = None, order_seed: int | None = None) -> StreamSpec:
        return StreamSpec(
            num_classes=self.num_classes,
            num_tasks=self.num_tasks,
            n_max=self.n_max,
            rho=self.rho,
            ordering=ordering if ordering is not None else self.ordering,
            order_seed=order_seed if order_seed is not None else self.order_seed,
            data_seed=self.data_seed,
            test_per_class=self.test_per_class,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            input_dim=self.input_dim,
            token_count=self.token_count,
            embed_dim=self.embed_dim,
            prompt_len=self.prompt_len,
            num_classes_total=self.num_classes,
            freeze_seed=self.freeze_seed,
        )

    def dap_config(
        self,
        mode: str | None = None,
        seed: int = 0,
        fixed_lambda: float | None = None,
    ) -> DapConfig:
        return DapConfig(
            mode=mode if mode is not None else self.mode,
            epochs_phase1=self.epochs_phase1,
            epochs_phase2=self.epochs_phase2,
            batch_size=self.batch_size,
            epsilon=self.epsilon,
            fixed_lambda=fixed_lambda if fixed_lambda is not None else self.fixed_lambda,
            lambda_semantics=self.lambda_semantics,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps_opt=self.eps_opt,
            prompt_init_std=self.prompt_init_std,
            seed=seed,
        )

    def make_stream(self, ordering: str | None = None, run_seed: int | None = None) -> TaskStream:
        """Materialize the configured stream, reshuffling per seed if enabled."""
        ordering = ordering if ordering is not None else self.ordering
        order_seed = self.order_seed
        if ordering == "shuffled" and self.reshuffle_per_seed and run_seed is not None:
            order_seed = self.order_seed + run_seed
        spec = self.stream_spec(ordering=ordering, order_seed=order_seed)
        return generate_synthetic(
            spec, self.input_dim, class_sep=self.class_sep, noise_std=self.noise_std
        )

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        return replace(self, **_coerce(overrides))


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(raw: dict[str, str]) -> dict:
    """Type each raw string by the matching field's default value."""
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    out = {}
    for key, text in raw.items():
        if key not in by_name:
            raise ConfigError(f"config: unknown key {key!r}")
        default = by_name[key].default
        try:
            if isinstance(default, bool):
                out[key] = _parse_bool(text)
            elif isinstance(default, int):
                out[key] = int(text)
            elif isinstance(default, float):
                out[key] = float(text)
            elif isinstance(default, tuple):
                elem = type(default[0])
                parts = [p.strip() for p in str(text).split(",") if p.strip() != ""]
                if not parts:
                    raise ValueError("empty list")
                out[key] = tuple(elem(p) for p in parts)
            else:
                out[key] = str(text).strip()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: bad value for {key!r}: {text!r} ({exc})") from exc
    return out


def parse_config_text(text: str) -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a config from an optional file plus override strings."""
    raw: dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            raw.update(parse_config_text(f.read()))
    if overrides:
        raw.update(overrides)
    cfg = ExperimentConfig(**_coerce(raw))
    # construct sub-configs eagerly so bad combinations fail at load time
    cfg.stream_spec()
    cfg.backbone_config()
    cfg.dap_config(seed=0)
    if not cfg.seeds:
        raise ConfigError("config: seeds must be nonempty")
    return cfg
