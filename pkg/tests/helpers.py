"""Shared test fixtures: canonical machine-infinite-bus system, random cases."""

from __future__ import annotations

import random
from dataclasses import replace

from gridmesh.model import Branch, Bus, Generator, GridCase

INF_H = 1e6          # stand-in for an infinite bus: huge inertia, negligible reactance
INF_XD = 1e-6


def smib_case(p_mech: float = 0.8, x_line: float = 0.4, xd_p: float = 0.3,
              h: float = 3.0, d: float = 0.0) -> GridCase:
    """One machine against a stiff source over a lossless line."""
    return GridCase(
        buses=(Bus(id=1, kind="Slack", v_mag=1.0),
               Bus(id=2, kind="PV", v_mag=1.0)),
        branches=(Branch(id=1, from_bus=1, to_bus=2, r=0.0, x=x_line),),
        generators=(Generator(id=1, bus=1, h=INF_H, d=0.0, xd_p=INF_XD),
                    Generator(id=2, bus=2, h=h, d=d, xd_p=xd_p, p_mech=p_mech)),
    )


def perturb_machine(case: GridCase, machine_idx: int, d_delta: float) -> GridCase:
    gens = list(case.generators)
    gens[machine_idx] = replace(gens[machine_idx],
                                delta0=gens[machine_idx].delta0 + d_delta)
    return replace(case, generators=tuple(gens))


def random_connected_case(rng: random.Random, n_buses: int, n_regions: int) -> GridCase:
    """Random connected case: spanning tree plus extra (possibly open) branches."""
    regions = [f"R{i + 1}" for i in range(n_regions)]
    buses = []
    for i in range(1, n_buses + 1):
        kind = "Slack" if i == 1 else rng.choice(["PV", "PQ"])
        buses.append(Bus(
            id=i, kind=kind, v_mag=1.0 + 0.05 * rng.uniform(-1, 1),
            p_load=rng.uniform(0, 0.5) if kind == "PQ" else 0.0,
            q_load=rng.uniform(0, 0.2) if kind == "PQ" else 0.0,
            shunt_g=rng.choice([0.0, rng.uniform(0, 0.05)]),
            shunt_b=rng.choice([0.0, rng.uniform(-0.1, 0.1)]),
            owner_region=rng.choice(regions),
        ))
    branches = []
    bid = 1
    order = list(range(2, n_buses + 1))
    rng.shuffle(order)
    for i in order:
        j = rng.choice(list(range(1, i)))
        branches.append(Branch(
            id=bid, from_bus=j, to_bus=i,
            r=rng.uniform(0.001, 0.05), x=rng.uniform(0.01, 0.3),
            b_charge=rng.choice([0.0, rng.uniform(0, 0.3)]),
            tap=rng.choice([1.0, rng.uniform(0.9, 1.1)]),
            owner_region=rng.choice(regions),
        ))
        bid += 1
    for _ in range(rng.randint(0, n_buses)):
        a, b = rng.sample(range(1, n_buses + 1), 2)
        branches.append(Branch(
            id=bid, from_bus=a, to_bus=b,
            r=rng.uniform(0.001, 0.05), x=rng.uniform(0.01, 0.3),
            status=rng.choice(["Closed", "Closed", "Open"]),
            owner_region=rng.choice(regions),
        ))
        bid += 1
    gens = (Generator(id=1, bus=1, h=5.0, d=0.0, xd_p=0.1),)
    return GridCase(buses=tuple(buses), branches=tuple(branches), generators=gens)
