"""Scenario builders for the triad, SpMVM and ChebFD programs."""
from .chebfd import (ChebfdConfig, ChebfdMode, InvalidBlocking, ValueKind, code_balance,
                     make_chebfd_scenario, profile_loads)
from .decomp import (CommProfile, DecompSpec, IndivisibleGrid, Preset, decompose, preset,
                     preset_comm_matrix, preset_names, preset_profile)
from .spmvm import (SpmvmConfig, SpmvmMode, crs_code_balance, make_spmvm_scenario, spmvm_config,
                    split_penalty)
from .triad import TriadConfig, chain, make_triad_scenario, symmetric_distances, triad_system

__all__ = [
    "ChebfdConfig", "ChebfdMode", "InvalidBlocking", "ValueKind", "code_balance",
    "make_chebfd_scenario", "profile_loads", "CommProfile", "DecompSpec", "IndivisibleGrid",
    "Preset", "decompose", "preset", "preset_comm_matrix", "preset_names", "preset_profile",
    "SpmvmConfig", "SpmvmMode", "crs_code_balance", "make_spmvm_scenario", "spmvm_config", "split_penalty",
    "TriadConfig", "chain", "make_triad_scenario", "symmetric_distances", "triad_system",
]
