import time
import numpy as np
import logging
import sys
import os

# Add parent directory to path to import modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import Config
from market import MarketParams
from dp_solver import GridSpec, value_iterate
from mfe_solver import MFESolver
from mc_sim import SimConfig, MarketSimulator

logger = logging.getLogger(__name__)


def time_value_iteration(params, model, grid, z_values):
    """Cold-start value iteration at several beliefs"""
    times = []
    sweeps = []
    for z in z_values:
        start_time = time.time()
        v = value_iterate(z, params, model, grid)
        times.append(time.time() - start_time)
        sweeps.append(v.iterations)
    return times, np.mean(times), int(np.mean(sweeps))


def time_gamma(params, model, grid, z_values):
    """gamma evaluations along a belief path, warm-started like the fixed-point search"""
    solver = MFESolver(params, model, grid)
    times = []
    for z in z_values:
        start_time = time.time()
        solver.gamma(z)
        times.append(time.time() - start_time)
    return times, np.mean(times)


def time_simulation(params, model, n_agents, n_steps):
    """Per-step cost of the simulator, policy refreshes included"""
    config = SimConfig(n_agents=n_agents, n_steps=n_steps, params=params, model=model,
                       grid_delta=Config.GRID_DELTA)
    simulator = MarketSimulator(config)
    start_time = time.time()
    simulator.run()
    total = time.time() - start_time
    return total, total / n_steps


def run_benchmark():
    """Run solver and simulator timings"""
    print("Sharing Market Solver Benchmark")
    print("=" * 50)

    params = MarketParams.cluster_defaults()
    z_values = [0.0, 0.25, 0.5, 0.75, 1.0]
    print(f"Price k: {params.k}, psi: {params.psi.label}")
    print()

    print("1. Value iteration:")
    print("-" * 40)
    for delta in (0.1, 0.05, 0.025):
        grid = GridSpec.for_params(params, delta=delta)
        for model in ('hard', 'bank'):
            times, mean_time, sweeps = time_value_iteration(params, model, grid, z_values)
            print(f"  delta={delta:<6g} {model:<10} {grid.n} points: {mean_time*1000:.1f} ms mean, "
                  f"{sweeps} sweeps, max {max(times)*1000:.1f} ms")

    print()
    print("2. gamma(z) evaluation:")
    print("-" * 40)
    grid = GridSpec.for_params(params, delta=Config.GRID_DELTA)
    for model in ('bank', 'peer-loan'):
        times, mean_time = time_gamma(params, model, grid, z_values)
        print(f"  {model:<10} first {times[0]*1000:.1f} ms, warm mean {np.mean(times[1:])*1000:.1f} ms")

    print()
    print("3. Simulation steps:")
    print("-" * 40)
    for n_agents in (10000, 100000):
        total, per_step = time_simulation(params, 'bank', n_agents, 50)
        print(f"  {n_agents} agents: {per_step*1000:.2f} ms per step ({total:.2f} s for 50 steps)")
        if per_step > 0.05:
            print(f"    ⚠️  Step cost {per_step*1000:.1f} ms > 50 ms")
        else:
            print(f"    ✅ Step cost OK")

    print("\n" + "=" * 50)


if __name__ == '__main__':
    run_benchmark()
