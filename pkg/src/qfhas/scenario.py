"""Scenario and grid files.

Both are YAML or JSON documents with a ``schema_version`` field. They are
validated with pydantic and turned into the engine's :class:`SimConfig`;
every validation problem surfaces as a :class:`ScenarioError` carrying the
dotted path of the offending field.
"""
from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from qfhas.client import DEFAULT_LEVELS_KBPS, BitrateLadder, ClientConfig
from qfhas.coordinator import CoordinatorConfig
from qfhas.errors import QfhasError, ScenarioError
from qfhas.netsim import CrossTrafficFlow, LinkModel, MessageChannel, SimConfig, UserSpec
from qfhas.utility import PRESET_ORDER, PRESETS, SsimSample, UtilityCurve, fit_curve

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SampleModel(_Strict):
    bitrate_bps: float = Field(gt=0)
    ssim: float = Field(ge=0, le=1)


class UtilityModel(_Strict):
    """Exactly one of ``preset``, the coefficient triple, or ``samples``."""

    preset: str | None = None
    a: float | None = None
    b: float | None = None
    c: float | None = None
    valid_range: tuple[float, float] | None = None
    samples: list[SampleModel] | None = None
    label: str | None = None

    @model_validator(mode="after")
    def _one_source(self):
        coeffs = [v is not None for v in (self.a, self.b, self.c)]
        given = [self.preset is not None, all(coeffs), self.samples is not None]
        if any(coeffs) and not all(coeffs):
            raise ValueError("coefficients need all of a, b and c")
        if sum(given) != 1:
            raise ValueError("give exactly one of: preset, coefficients (a, b, c), samples")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; known: {', '.join(PRESET_ORDER)}")
        return self

    def build(self) -> UtilityCurve:
        if self.preset is not None:
            return PRESETS[self.preset]
        if self.samples is not None:
            samples = [SsimSample(s.bitrate_bps, s.ssim) for s in self.samples]
            return fit_curve(samples, label=self.label or "fitted")
        kw = {"valid_range": tuple(self.valid_range)} if self.valid_range else {}
        return UtilityCurve(a=self.a, b=self.b, c=self.c, label=self.label or "coefficients", **kw)


def _utility_from_raw(v):
    return {"preset": v} if isinstance(v, str) else v


class UserModel(_Strict):
    controller: str = "quality_fair"
    utility: UtilityModel
    start_time: float = Field(default=0.0, ge=0)
    stop_time: float | None = None

    @model_validator(mode="before")
    @classmethod
    def _shorthand(cls, data):
        if isinstance(data, dict) and "utility" in data:
            data = {**data, "utility": _utility_from_raw(data["utility"])}
        return data

    @model_validator(mode="after")
    def _window(self):
        if self.stop_time is not None and self.stop_time <= self.start_time:
            raise ValueError("stop_time must be after start_time")
        return self


class CrossModel(_Strict):
    start_time: float = Field(default=0.0, ge=0)
    stop_time: float | None = None


class LinkSpecModel(_Strict):
    capacity_bps: float | None = Field(default=None, gt=0)
    # list of [start_time, bits/s] steps, first at t=0
    capacity_trace: list[tuple[float, float]] | None = None
    share_mode: Literal["ideal", "noisy"] = "ideal"
    noise_magnitude: float = Field(default=0.0, ge=0, lt=1)
    noise_interval: float = Field(default=0.5, gt=0)
    # None derives the noise seed from the scenario seed
    noise_seed: int | None = None
    overhead_factor: float = Field(default=1.0, ge=1)
    message_latency: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _capacity(self):
        if (self.capacity_bps is None) == (self.capacity_trace is None):
            raise ValueError("give exactly one of capacity_bps, capacity_trace")
        return self

    def trace(self) -> tuple[tuple[float, float], ...]:
        if self.capacity_bps is not None:
            return ((0.0, self.capacity_bps),)
        return tuple((float(t), float(c)) for t, c in self.capacity_trace)


class CoordinatorModel(_Strict):
    gamma: float = 0.95
    alpha_e: float = 0.75
    k_p: float = 1.0
    k_i: float = 0.25
    tick_phase: float = Field(default=0.0, ge=0)


class ClientModel(_Strict):
    kappa: float = 1e9
    alpha_tcp: float = 0.75
    alpha_q: float = 0.75
    alpha_tau: float = 0.75
    ladder_kbps: list[float] = Field(default_factory=lambda: list(DEFAULT_LEVELS_KBPS), min_length=1)
    buffer_chunks: int = Field(default=10, ge=1)
    quantize: bool = True
    low_buffer_fraction: float = 0.6
    discount_pivot_fraction: float = 0.7
    discount_floor: float = 0.25
    tau_clip_factor: float = 1.25


class ScenarioBase(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    duration: float = Field(gt=0)
    warmup: float = Field(default=60.0, ge=0)
    seed: int = 0
    chunk_duration: float = Field(default=2.0, gt=0)
    link: LinkSpecModel
    cross_traffic: list[CrossModel] = Field(default_factory=list)
    coordinator: CoordinatorModel = CoordinatorModel()
    client: ClientModel = ClientModel()

    @model_validator(mode="after")
    def _window(self):
        if not self.duration > self.warmup:
            raise ValueError("duration must exceed warmup")
        return self


class ScenarioSpec(ScenarioBase):
    users: list[UserModel] = Field(min_length=1)


class GridSpec(_Strict):
    """A base scenario (without users) plus the grid axes."""

    schema_version: Literal[1] = SCHEMA_VERSION
    base: ScenarioBase
    n_users: list[int] = Field(min_length=1)
    c_usr_bps: list[float] = Field(min_length=1)
    realizations: int = Field(default=10, ge=1)
    controllers: list[str] = Field(default_factory=lambda: ["quality_fair", "rate_fair"], min_length=1)
    n_tcp: list[int] = Field(default_factory=lambda: [0])
    preset_pool: list[str] = Field(default_factory=lambda: list(PRESET_ORDER), min_length=1)
    # users start at independent uniform offsets in [0, start_jitter)
    start_jitter: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _axes(self):
        if any(n < 1 for n in self.n_users):
            raise ValueError("n_users entries must be >= 1")
        if any(c <= 0 for c in self.c_usr_bps):
            raise ValueError("c_usr_bps entries must be positive")
        if any(n < 0 for n in self.n_tcp):
            raise ValueError("n_tcp entries must be >= 0")
        unknown = [p for p in self.preset_pool if p not in PRESETS]
        if unknown:
            raise ValueError(f"unknown presets in pool: {unknown}")
        return self


def _path(loc) -> str:
    return ".".join(str(p) for p in loc if not (isinstance(p, str) and p.startswith("function-")))


def _wrap(exc: ValidationError) -> ScenarioError:
    err = exc.errors()[0]
    path = _path(err["loc"])
    msg = err["msg"].removeprefix("Value error, ")
    return ScenarioError(msg, path=path)


def _validate(model, data):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise _wrap(exc) from None


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``5e6`` and ``1.5e6`` as floats (YAML 1.1 wants ``5.0e+6``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def read_document(path: str | Path) -> dict:
    """Parse a YAML or JSON file (JSON is chosen by the ``.json`` suffix)."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {p}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.load(text, Loader=_Loader)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ScenarioError(f"cannot parse {p}: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{p}: top level must be a mapping")
    return data


def parse_scenario(data: dict) -> ScenarioSpec:
    return _validate(ScenarioSpec, data)


def load_scenario(path: str | Path) -> ScenarioSpec:
    return parse_scenario(read_document(path))


def parse_grid(data: dict) -> GridSpec:
    return _validate(GridSpec, data)


def load_grid(path: str | Path) -> GridSpec:
    return parse_grid(read_document(path))


def _inf(v):
    return math.inf if v is None else float(v)


def build_client_config(spec: ScenarioBase) -> ClientConfig:
    c = spec.client
    return ClientConfig(
        kappa=c.kappa, alpha_tcp=c.alpha_tcp, alpha_q=c.alpha_q, alpha_tau=c.alpha_tau,
        ladder=BitrateLadder(tuple(k * 1000.0 for k in c.ladder_kbps)),
        buffer_capacity_chunks=c.buffer_chunks, chunk_duration=spec.chunk_duration,
        low_buffer_fraction=c.low_buffer_fraction,
        discount_pivot_fraction=c.discount_pivot_fraction,
        discount_floor=c.discount_floor, tau_clip_factor=c.tau_clip_factor, quantize=c.quantize,
    )


def _section(path: str, fn):
    """Run a constructor, turning domain errors into a ScenarioError at ``path``."""
    try:
        return fn()
    except ScenarioError:
        raise
    except (QfhasError, ValueError) as exc:
        raise ScenarioError(str(exc), path=path) from None


def build_sim_config(spec: ScenarioSpec) -> SimConfig:
    from qfhas.client import CONTROLLERS

    lk = spec.link
    link = _section("link", lambda: LinkModel(
        lk.trace(), share_mode=lk.share_mode,
        noise_seed=spec.seed if lk.noise_seed is None else lk.noise_seed,
        noise_magnitude=lk.noise_magnitude, noise_interval=lk.noise_interval,
        overhead_factor=lk.overhead_factor,
    ))
    client = _section("client", lambda: build_client_config(spec))
    co = spec.coordinator
    coordinator = _section("coordinator", lambda: CoordinatorConfig(
        gamma=co.gamma, alpha_e=co.alpha_e, k_p=co.k_p, k_i=co.k_i,
        chunk_duration=spec.chunk_duration))
    users = []
    for i, u in enumerate(spec.users):
        if u.controller not in CONTROLLERS:
            raise ScenarioError(f"unknown controller {u.controller!r}",
                                path=f"users.{i}.controller")
        curve = _section(f"users.{i}.utility", u.utility.build)
        users.append(UserSpec(u.controller, curve, u.start_time, _inf(u.stop_time)))
    cross = tuple(CrossTrafficFlow(x.start_time, _inf(x.stop_time)) for x in spec.cross_traffic)
    return SimConfig(
        duration=spec.duration, warmup=spec.warmup, link=link, users=tuple(users),
        client=client, coordinator=coordinator, cross_traffic=cross,
        channel=MessageChannel(lk.message_latency), tick_phase=co.tick_phase, seed=spec.seed,
    )


def with_seed(spec: ScenarioSpec, seed: int | None) -> ScenarioSpec:
    return spec if seed is None else spec.model_copy(update={"seed": int(seed)})


def scenario_from_base(base: ScenarioBase, users: list[dict], **overrides) -> ScenarioSpec:
    data = base.model_dump()
    data.update(overrides)
    data["users"] = users
    return parse_scenario(data)

