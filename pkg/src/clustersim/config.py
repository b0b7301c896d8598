"""Timing and sizing constants.  Every tunable lives here."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from fractions import Fraction


@dataclass(frozen=True)
class SimConfig:
    # transport
    base_delay: int = 2
    interfaces: int = 1
    event_ceiling: int = 10**6
    trace_dispatch: bool = True
    # failure detection
    heartbeat_period: int = 300
    # membership
    rpc_timeout: int = 20
    member_search_timeout: int = 40
    join_phase_timeout: int = 600
    activate_wait: int = 300
    stage_timeout: int = 3000
    regroup_status_period: int = 20
    max_regroup_restarts: int = 16
    restart_delay: int = 600
    auto_restart: bool = True
    # global updates
    lock_retry: int = 100
    # quorum arbitration
    defense_period: int = 3
    challenge_wait: int = 6
    device_delay: int = 2
    arbitration_retry: int = 30
    arbitration_attempts: int = 3
    # database
    checkpoint_every: int = 64
    # time service
    time_sync_period: int = 1000
    skew_bound: int = 50
    slew_rate: Fraction = Fraction(1, 2)

    @property
    def check_period(self) -> int:
        return max(1, self.heartbeat_period // 2)

    @property
    def suspicion_window(self) -> int:
        return 2 * self.heartbeat_period

    def with_overrides(self, **kw: object) -> "SimConfig":
        known = {f.name: f.type for f in fields(self)}
        clean: dict[str, object] = {}
        for key, value in kw.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            current = getattr(self, key)
            if isinstance(value, str):
                if isinstance(current, bool):
                    value = value.lower() in ("1", "true", "yes", "on")
                elif isinstance(current, Fraction):
                    value = Fraction(value)
                else:
                    value = int(value)
            clean[key] = value
        return replace(self, **clean)
