"""End-to-end workflow runs at desk scale: recovery, view ablation, NFE accounting and timing."""

import numpy as np
import pytest

from sirlab.scoremodel import nfe_per_eval
from sirlab.services import AblationService, Sweep, apply_axis, build_task
from sirlab.shapes import SHAPES
from sirlab.sirloop import (
    SirConfig,
    efficiency_ratio,
    expected_nfe,
    get_preset,
    run_sds,
    run_sir,
)

SEEDS = [0, 1, 2, 3, 4]
SDS_NFE_CAP = 10


# =============================================================================
# Recovery
# =============================================================================


@pytest.mark.slow
def test_flatland_recovery_beats_initialization():
    """Test K=20 with 4 views gains at least 6 dB over the K=0 initialization"""
    shapes = sorted(SHAPES)
    gains = []
    for seed in SEEDS:
        config = SirConfig(
            seed=seed, task=shapes[seed % len(shapes)], resolution=32, iterations=20, n_views=4
        )
        task = build_task(config)
        _, trace = run_sir(config, task.model, task.truth)

        baseline = config.replace(iterations=0)
        _, init_trace = run_sir(baseline, build_task(baseline).model, task.truth)
        assert init_trace.final_psnr == pytest.approx(trace.init_psnr)
        assert trace.final_psnr > init_trace.final_psnr
        gains.append(trace.final_psnr - trace.init_psnr)
    assert np.mean(gains) >= 6.0


@pytest.mark.slow
def test_more_views_lower_error(tmp_path):
    """Test mean final error falls strictly as views per iteration go 2 -> 4 -> 8"""
    sweep = Sweep("n_views", [2, 4, 8], SEEDS, SirConfig(task="cross", resolution=32))
    rows = AblationService.run(sweep, tmp_path)
    errors = [row[3] for row in AblationService.aggregate(rows)]
    assert errors[0] > errors[1] > errors[2]


# =============================================================================
# NFE accounting
# =============================================================================


@pytest.mark.slow
def test_stable_zero123_run_matches_closed_form_nfe():
    """Test K=30, I=15, ladder 20 with CFG: the trace NFE equals the closed-form count"""
    config = get_preset("stable-zero123").replace(n_views=4)
    assert (config.iterations, config.recon_steps, config.ladder_steps) == (30, 15, 20)
    task = build_task(config)
    _, trace = run_sir(config, task.model, task.truth, task.reference)
    assert trace.total_nfe == expected_nfe(config)
    assert [r.nfe for r in trace.records] == sorted(r.nfe for r in trace.records)


# =============================================================================
# SIR against SDS
# =============================================================================


@pytest.mark.slow
def test_sds_needs_five_times_the_nfe_of_sir():
    """Test SDS spends at least 5x SIR's NFE to reach SIR's final PSNR on the cross task"""
    ratios = []
    for seed in SEEDS[:3]:
        config = get_preset("stable-zero123").replace(seed=seed, task="cross")
        task = build_task(config)
        _, sir = run_sir(config, task.model, task.truth, task.reference)

        cap = SDS_NFE_CAP * sir.total_nfe
        sds_config = config.replace(
            sds_updates=cap // nfe_per_eval(config.cfg_scale), resolution_schedule=()
        )
        _, sds = run_sds(sds_config, task.model, task.truth)
        ratio, _ = efficiency_ratio(sir, sds)
        ratios.append(ratio)
    assert np.mean(ratios) >= 5.0


# =============================================================================
# Pixel against latent optimization
# =============================================================================


@pytest.mark.slow
def test_pixel_iterations_faster_than_latent():
    """Test SIR-pixel takes less wall time per outer iteration than SIR-latent on 32^3 voxels"""
    base = SirConfig(representation="voxel", resolution=32, iterations=4, n_views=4)
    medians = {}
    for space in ("pixel", "latent"):
        config, _ = apply_axis(base, "space", space)
        task = build_task(config)
        _, trace = run_sir(config, task.model, task.truth, codec=task.codec)
        medians[space] = float(np.median([r.wall_ms for r in trace.records]))
    assert medians["pixel"] < medians["latent"]
