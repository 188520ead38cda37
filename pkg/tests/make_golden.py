"""Regenerate the golden CSV files (run only after an intended output change)."""

import os

from edcapf import harness

from conftest import GOLDEN, SCENARIOS


def golden_outputs():
    fig2 = harness.load_scenario(os.path.join(SCENARIOS, "fig2_per_sweep.yaml"))
    fig4 = harness.load_scenario(os.path.join(SCENARIOS, "fig4_adaptivity.yaml"))
    short = harness.parse_scenario(harness.serialize(fig4).replace("plant: sim", "plant: analytic"))
    return {
        "fig2_model.csv": harness.cmd_model(fig2).to_csv(),
        "fig2_optimize.csv": harness.cmd_optimize(fig2).to_csv(),
        "fig4_closed_loop_sim_2s.csv": harness.cmd_closed_loop(fig4, duration=2e6).records.to_csv(),
        "fig4_closed_loop_analytic_2s.csv": harness.cmd_closed_loop(short, duration=2e6).records.to_csv(),
    }


if __name__ == "__main__":
    for name, text in golden_outputs().items():
        with open(os.path.join(GOLDEN, name), "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        print("wrote", name)
