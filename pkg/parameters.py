from __future__ import annotations
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any
import json
import math

from errors import ConfigError


def read_json(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _known_fields(cls: type, data: dict[str, Any]) -> dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(unknown)}", tuple(unknown))
    return dict(data)


@dataclass(frozen=True)
class TimeGrid:
    """
    Discrete analysis periods. A spell time `t` maps to period ceil(t / unit);
    `horizon` is the last period an estimator looks at.
    """

    unit: float = 1.0
    horizon: int = 60

    def __post_init__(self):
        if not (self.unit > 0 and math.isfinite(self.unit)):
            raise ConfigError(f"TimeGrid.unit must be a positive number, got {self.unit}", ("unit",))
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigError(f"TimeGrid.horizon must be an integer >= 1, got {self.horizon}", ("horizon",))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TimeGrid:
        return cls(**_known_fields(cls, data))


@dataclass(frozen=True)
class PiecewiseSpec:
    """
    Segment cutpoints of the piecewise-constant baselines. Segment k covers
    (cuts[k], cuts[k+1]]; the last segment is open-ended up to `horizon`
    (None means unbounded coverage).
    """

    exit_cuts: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)
    treat_cuts: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)
    horizon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "exit_cuts", tuple(float(c) for c in self.exit_cuts))
        object.__setattr__(self, "treat_cuts", tuple(float(c) for c in self.treat_cuts))
        for name in ("exit_cuts", "treat_cuts"):
            cuts = getattr(self, name)
            if not cuts or cuts[0] != 0.0:
                raise ConfigError(f"PiecewiseSpec.{name} must start at 0, got {cuts}", (name,))
            if any(b <= a for a, b in zip(cuts, cuts[1:])):
                raise ConfigError(f"PiecewiseSpec.{name} must be strictly increasing, got {cuts}", (name,))
        if self.horizon is not None and self.horizon <= max(self.exit_cuts[-1], self.treat_cuts[-1]):
            raise ConfigError("PiecewiseSpec.horizon must lie beyond the last cutpoint", ("horizon",))

    @property
    def n_exit_segments(self) -> int:
        return len(self.exit_cuts)

    @property
    def n_treat_segments(self) -> int:
        return len(self.treat_cuts)

    @property
    def upper(self) -> float:
        return math.inf if self.horizon is None else float(self.horizon)

    def to_dict(self) -> dict[str, Any]:
        return {"exit_cuts": list(self.exit_cuts), "treat_cuts": list(self.treat_cuts), "horizon": self.horizon}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PiecewiseSpec:
        data = _known_fields(cls, data)
        return cls(
            exit_cuts=tuple(data.get("exit_cuts", cls.exit_cuts)),
            treat_cuts=tuple(data.get("treat_cuts", cls.treat_cuts)),
            horizon=data.get("horizon"),
        )

    @classmethod
    def new(cls, segment_length: float, n_segments: int, horizon: float | None = None) -> PiecewiseSpec:
        """Equal-width segments shared by the exit and treatment baselines."""
        if segment_length <= 0 or n_segments < 1:
            raise ConfigError("segment_length must be > 0 and n_segments >= 1", ("segment_length", "n_segments"))
        cuts = tuple(segment_length * k for k in range(n_segments))
        return cls(exit_cuts=cuts, treat_cuts=cuts, horizon=horizon)


@dataclass(frozen=True)
class SpellSchema:
    """Maps the logical spell fields onto column names of a delimited file."""

    id: str = "id"
    regime: str = "z"
    treat_time: str = "treat_time"
    exit_time: str = "exit_time"
    censor_time: str = "censor_time"
    covariates: tuple[str, ...] = ()
    delimiter: str = ","

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if len(self.delimiter) != 1:
            raise ConfigError(f"SpellSchema.delimiter must be a single character, got {self.delimiter!r}", ("delimiter",))
        names = [self.id, self.regime, self.treat_time, self.exit_time, self.censor_time, *self.covariates]
        if len(set(names)) != len(names):
            raise ConfigError("SpellSchema maps two logical fields onto the same column", ("covariates",))

    @property
    def columns(self) -> list[str]:
        return [self.id, self.regime, self.treat_time, self.exit_time, self.censor_time, *self.covariates]

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["covariates"] = list(self.covariates)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SpellSchema:
        return cls(**_known_fields(cls, data))

    @classmethod
    def from_json(cls, path: str | Path) -> SpellSchema:
        return cls.from_dict(read_json(path))


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    gtol: float = 1e-6
    ftol: float = 1e-9
    hessian_step: float = 1e-5

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigError("FitOptions.max_iter must be >= 1", ("max_iter",))
        for name in ("gtol", "ftol", "hessian_step"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"FitOptions.{name} must be > 0", (name,))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FitOptions:
        return cls(**_known_fields(cls, data))


@dataclass(frozen=True)
class EstimationConfig:
    """
    Settings shared by the nonparametric and model-based decompositions.

    alpha_contrast selects the direction of the treatment-probability
    contrast: "z0_minus_z1" (default) or "z1_minus_z0".
    empty_cell is "error" or "carry_forward" (an empty cell contributes a
    conditional survival of 1 and is reported).
    """

    s_bar: int = 30
    tau: int = 60
    weight_regime: int = 1
    alpha_contrast: str = "z0_minus_z1"
    empty_cell: str = "error"
    cs_floor: float = 1e-3
    gradient_step: float = 1e-6

    def __post_init__(self):
        bad = []
        if self.s_bar < 1:
            bad.append("s_bar")
        if self.tau < self.s_bar:
            bad.append("tau")
        if self.weight_regime not in (0, 1):
            bad.append("weight_regime")
        if self.alpha_contrast not in ("z0_minus_z1", "z1_minus_z0"):
            bad.append("alpha_contrast")
        if self.empty_cell not in ("error", "carry_forward"):
            bad.append("empty_cell")
        if not 0 <= self.cs_floor < 1:
            bad.append("cs_floor")
        if not self.gradient_step > 0:
            bad.append("gradient_step")
        if bad:
            raise ConfigError(f"invalid EstimationConfig field(s): {', '.join(bad)} (need 1 <= s_bar <= tau)", tuple(bad))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EstimationConfig:
        return cls(**_known_fields(cls, data))


@dataclass(frozen=True)
class DdcConfig:
    """
    Parameterization of the dynamic discrete choice waiting model.

    Offers: w = beta_w_a * a + beta_w_s * 1(treated) + xi, xi ~ N(0, sigma_xi^2).
    Flow utility w0 = w0_share * beta_w_a * a, cost c = beta_c_a * a + beta_c_e * e,
    offers arrive when a Poisson(beta_lambda_a * a + beta_lambda_e * e) draw is >= 1.
    beta_w_s is the signed treatment shift of the offer mean; the default equals
    one offer standard deviation (sigma_w). A negative value lowers offers once treated.

    mu_w ... sigma_lambda are reference moments of the offer, cost and arrival
    distributions; they are reported next to simulated moments and do not
    drive the simulation.
    """

    mu_w: float = 13.762
    sigma_w: float = 5.497
    mu_c: float = 0.893
    sigma_c: float = 0.257
    mu_lambda: float = 0.092
    sigma_lambda: float = 0.031
    rho: float = 0.995
    sigma_xi: float = 3.0
    beta_w_a: float = 4.0
    beta_w_s: float = 5.497
    beta_c_a: float = 0.2
    beta_c_e: float = 0.1
    beta_lambda_a: float = 0.5 / 21
    beta_lambda_e: float = 0.1 / 21
    pi_z0: float = 0.01
    pi_z1: float = 0.03
    w0_share: float = 0.75
    n_agents: int = 5000
    n_periods: int = 5000
    a_range: tuple[int, int] = (1, 6)
    e_range: tuple[int, int] = (1, 3)
    admin_censor: int = 60
    random_censor_share: float = 0.063
    expectation: str = "analytic"
    mc_draws: int = 1000
    tol: float = 1e-10
    max_iter: int = 10_000
    seed: int = 20_240_611

    def __post_init__(self):
        object.__setattr__(self, "a_range", tuple(int(v) for v in self.a_range))
        object.__setattr__(self, "e_range", tuple(int(v) for v in self.e_range))
        bad = []
        if not 0 < self.rho < 1:
            bad.append("rho")
        for name in ("sigma_w", "sigma_c", "sigma_lambda", "sigma_xi"):
            if getattr(self, name) < 0:
                bad.append(name)
        for name in ("pi_z0", "pi_z1"):
            if not 0 <= getattr(self, name) < 1:
                bad.append(name)
        for name in ("a_range", "e_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                bad.append(name)
        if self.beta_lambda_a < 0 or self.beta_lambda_e < 0:
            bad.append("beta_lambda_a/beta_lambda_e")
        if self.n_agents < 1:
            bad.append("n_agents")
        if self.n_periods < 1:
            bad.append("n_periods")
        if not 1 <= self.admin_censor <= self.n_periods:
            bad.append("admin_censor")
        if not 0 <= self.random_censor_share <= 1:
            bad.append("random_censor_share")
        if self.expectation not in ("analytic", "monte_carlo"):
            bad.append("expectation")
        if self.mc_draws < 2:
            bad.append("mc_draws")
        if not self.tol > 0 or self.max_iter < 1:
            bad.append("tol/max_iter")
        if bad:
            raise ConfigError(f"invalid DdcConfig field(s): {', '.join(bad)}", tuple(bad))

    def pi(self, z: int) -> float:
        return self.pi_z1 if z == 1 else self.pi_z0

    def replace(self, **changes: Any) -> DdcConfig:
        data = self.to_dict()
        data.update(changes)
        return DdcConfig.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["a_range"] = list(self.a_range)
        out["e_range"] = list(self.e_range)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DdcConfig:
        return cls(**_known_fields(cls, data))

    @classmethod
    def from_json(cls, path: str | Path) -> DdcConfig:
        return cls.from_dict(read_json(path))


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a CLI subcommand needs, assembled from an optional JSON file
    (sections "grid", "spec", "schema", "estimation", "fit") and flag overrides.
    """

    subcommand: str
    input_path: Path | None = None
    output_path: Path | None = None
    grid: TimeGrid = field(default_factory=TimeGrid)
    spec: PiecewiseSpec = field(default_factory=PiecewiseSpec)
    schema: SpellSchema = field(default_factory=SpellSchema)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    fit: FitOptions = field(default_factory=FitOptions)
    seed: int = 0
    output_format: str = "table"

    def __post_init__(self):
        if self.output_format not in ("table", "json"):
            raise ConfigError(f"unknown output format {self.output_format!r}", ("output_format",))
        if self.input_path is not None and not Path(self.input_path).exists():
            raise ConfigError(f"input path does not exist: {self.input_path}", ("input_path",))

    @classmethod
    def new(cls, subcommand: str, config_path: str | None = None, **overrides: Any) -> RunConfig:
        data = read_json(config_path) if config_path else {}
        unknown = sorted(set(data) - {"grid", "spec", "schema", "estimation", "fit"})
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}", tuple(unknown))

        grid = data.get("grid", {}) | {k[5:]: v for k, v in overrides.items() if k.startswith("grid_") and v is not None}
        est = data.get("estimation", {}) | {k[4:]: v for k, v in overrides.items() if k.startswith("est_") and v is not None}
        spec = PiecewiseSpec.from_dict(data["spec"]) if "spec" in data else PiecewiseSpec()
        length, count = overrides.get("segment_length"), overrides.get("n_segments")
        if length is None and count is not None:
            length = spec.exit_cuts[1] if spec.n_exit_segments > 1 else 10.0
        if length is not None:
            spec = PiecewiseSpec.new(length, count if count is not None else spec.n_exit_segments)

        plain = {k: v for k, v in overrides.items() if k in ("input_path", "output_path", "seed", "output_format") and v is not None}
        if "input_path" in plain:
            plain["input_path"] = Path(plain["input_path"])
        if "output_path" in plain:
            plain["output_path"] = Path(plain["output_path"])
        return cls(
            subcommand=subcommand,
            grid=TimeGrid.from_dict(grid),
            spec=spec,
            schema=SpellSchema.from_dict(data["schema"]) if "schema" in data else SpellSchema(),
            estimation=EstimationConfig.from_dict(est),
            fit=FitOptions.from_dict(data["fit"]) if "fit" in data else FitOptions(),
            **plain,
        )
