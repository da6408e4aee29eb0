"""Orchestration-layer tests: scenario parsing, verdicts, artifacts.

The envelope checks run on the unit ball where the solution is exactly
S / (4 pi r), so every verdict here is testable against closed forms;
blow-up and symmetry drivers reuse oracles already pinned in the solver
and closed-form suites.
"""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from extflux.closedform import (
    dirichlet_green_exterior_ball,
    lower_envelope_constant,
    sphere_area,
    upper_envelope_constant,
)
from extflux.geometry import (
    Ball,
    PuncturedShell,
    make_ball,
    make_shell,
    uniform_flux,
)
from extflux.harness import (
    BlowupReport,
    BoundReport,
    BoundRow,
    ConfigError,
    ScenarioConfig,
    emit_report,
    load_scenario,
    run_shell_blowup_study,
    scale_invariance_ratios,
    verify_green_symmetry,
    verify_laplace_envelope,
    verify_weighted_envelope,
)
from extflux.montecarlo import CircuitStats, PathConfig
from extflux.pde_solver import (
    MeshSpec,
    OperatorSpec,
    SolverError,
    gaussian_weight_operator,
    laplacian_operator,
    solve_minimal,
)

FULL_SCENARIO = """
[scenario]
name = channel-run

[geometry]
kind = punctured_shell
inner = 0.5
outer = 0.9
channel_radius = 0.1

[operator]
kind = q_bump
amplitude = 0.25
width = 2.0

[flux]
kind = hemisphere
amplitude = 1.5

[probes]
gammas = 2, 4 10
sphere_factor = 1.4
radii = 3 5
mc_cross_gammas = 4

[mc]
dt = 1e-4
truncation_radius = 24
max_steps = 50000
seed = 99
samples = 2000
batch_size = 512
resolve_distance = 0.04
threads = 2

[solver]
cells_per_decade = 40
n_theta = 40
theta_power = 1.5
core_cells = 20
layer_cells = 8
tol = 5e-4

[output]
directory = artifacts
"""


def write_scenario(tmp_path, text, name="scenario.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestScenarioLoading:
    def test_full_file_round_trips(self, tmp_path):
        cfg = load_scenario(write_scenario(tmp_path, FULL_SCENARIO))
        assert cfg.name == "channel-run"
        assert isinstance(cfg.domain, PuncturedShell)
        assert cfg.domain.bounding_radius == 0.9
        assert cfg.operator.label.startswith("gaussian_weight")
        assert cfg.flux.label == "hemisphere[1.5]"
        assert cfg.gammas == (2.0, 4.0, 10.0)
        assert cfg.sphere_factor == 1.4
        assert cfg.probe_factors == (3.0, 5.0)
        assert cfg.mc_cross_gammas == (4.0,)
        assert cfg.mc == PathConfig(
            dt=1e-4, truncation_radius=24.0, max_steps=50_000, seed=99,
            samples=2000, batch_size=512, resolve_distance=0.04, threads=2,
        )
        assert cfg.mesh == MeshSpec(
            cells_per_decade=40, n_theta=40, theta_power=1.5,
            core_cells=20, layer_cells=8,
        )
        assert cfg.solver_tol == 5e-4
        assert cfg.out_dir == "artifacts"

    def test_minimal_file_uses_defaults(self, tmp_path):
        cfg = load_scenario(
            write_scenario(tmp_path, "[geometry]\nkind = ball\nradius = 1\n")
        )
        assert cfg.name == "scenario"  # file stem
        assert isinstance(cfg.domain, Ball)
        assert cfg.operator.is_laplacian
        assert cfg.flux.label == "uniform[1]"
        assert cfg.gammas == (2.0, 4.0, 10.0)
        assert cfg.mc == PathConfig()
        assert cfg.mesh == MeshSpec()
        assert cfg.out_dir == "out"

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(ConfigError, match="nowhere.cfg"):
            load_scenario(tmp_path / "nowhere.cfg")

    def test_missing_section_named(self, tmp_path):
        with pytest.raises(ConfigError, match=r"missing section \[geometry\]"):
            load_scenario(write_scenario(tmp_path, "[scenario]\nname = x\n"))

    def test_missing_key_named(self, tmp_path):
        text = "[geometry]\nkind = shell\ninner = 0.5\n"
        with pytest.raises(ConfigError, match=r"missing key 'outer' in section \[geometry\]"):
            load_scenario(write_scenario(tmp_path, text))

    def test_malformed_number_named(self, tmp_path):
        text = "[geometry]\nkind = ball\nradius = wide\n"
        with pytest.raises(ConfigError, match="'radius'.*must be a number"):
            load_scenario(write_scenario(tmp_path, text))

    def test_malformed_optional_named(self, tmp_path):
        text = "[geometry]\nkind = ball\nradius = 1\n[probes]\ngammas = 2 four\n"
        with pytest.raises(ConfigError, match="'gammas'.*malformed"):
            load_scenario(write_scenario(tmp_path, text))

    def test_unknown_kinds_rejected(self, tmp_path):
        bad_geo = "[geometry]\nkind = torus\nradius = 1\n"
        with pytest.raises(ConfigError, match="unknown geometry kind 'torus'"):
            load_scenario(write_scenario(tmp_path, bad_geo))
        bad_op = "[geometry]\nkind = ball\nradius = 1\n[operator]\nkind = drifty\n"
        with pytest.raises(ConfigError, match="unknown operator kind 'drifty'"):
            load_scenario(write_scenario(tmp_path, bad_op))
        bad_flux = "[geometry]\nkind = ball\nradius = 1\n[flux]\nkind = spotty\n"
        with pytest.raises(ConfigError, match="unknown flux kind 'spotty'"):
            load_scenario(write_scenario(tmp_path, bad_flux))

    def test_non_ini_text_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not valid INI"):
            load_scenario(write_scenario(tmp_path, "kind = ball without a section\n"))

    def test_config_error_is_value_error(self):
        # the command line maps ValueError subclasses to the usage exit code
        assert issubclass(ConfigError, ValueError)

    def test_post_init_rejections(self):
        base = dict(
            name="x", domain=make_ball(1.0),
            operator=laplacian_operator(), flux=None,
        )
        with pytest.raises(ConfigError, match="exceed 1"):
            ScenarioConfig(**base, gammas=(1.0, 2.0))
        with pytest.raises(ConfigError, match="sphere factor"):
            ScenarioConfig(**base, sphere_factor=3.5, probe_factors=(3.0, 5.0))
        with pytest.raises(ConfigError, match="sphere factor"):
            ScenarioConfig(**base, sphere_factor=0.9)

    @given(
        vals=st.lists(
            st.floats(min_value=1.6, max_value=1e6, allow_nan=False), min_size=1, max_size=6
        ),
        comma=st.booleans(),
    )
    @settings(max_examples=40, deadline=None)
    def test_list_values_parse_with_either_separator(self, tmp_path_factory, vals, comma):
        sep = ", " if comma else " "
        text = (
            "[geometry]\nkind = ball\nradius = 1\n"
            f"[probes]\nradii = {sep.join(repr(v) for v in vals)}\n"
            "sphere_factor = 1.5\ngammas = 2\n"
        )
        tmp = tmp_path_factory.mktemp("list")
        cfg = load_scenario(write_scenario(tmp, text))
        assert cfg.probe_factors == tuple(vals)


class TestBoundRow:
    @given(
        value=st.floats(min_value=-10, max_value=10, allow_nan=False),
        spread=st.floats(min_value=0, max_value=1, allow_nan=False),
        tol=st.floats(min_value=0, max_value=0.5, allow_nan=False),
    )
    @settings(max_examples=60, deadline=None)
    def test_verdict_matches_margins(self, value, spread, tol):
        row = BoundRow(
            radius=2.0, gamma=2.0,
            value_min=value - spread, value_max=value + spread,
            lower=-1.0, upper=1.0, tol=tol,
        )
        assert row.passed == (row.margin_low >= -tol and row.margin_high >= -tol)

    def test_margins_signed_as_slack(self):
        row = BoundRow(
            radius=2.0, gamma=2.0, value_min=0.5, value_max=0.6,
            lower=0.4, upper=0.9, tol=0.0,
        )
        assert row.margin_low == pytest.approx(0.1)
        assert row.margin_high == pytest.approx(0.3)
        assert row.passed


@pytest.fixture(scope="module")
def ball_plain_report():
    cfg = ScenarioConfig(
        name="unit-ball",
        domain=make_ball(1.0),
        operator=laplacian_operator(),
        flux=uniform_flux(),
        gammas=(2.0, 4.0, 10.0),
        mc=PathConfig(samples=2500, threads=2),
        mc_cross_gammas=(2.0,),
    )
    return verify_laplace_envelope(cfg)


class TestPlainEnvelope:
    def test_rows_sandwich_the_exact_solution(self, ball_plain_report):
        rep = ball_plain_report
        assert rep.kind == "plain"
        assert rep.flux_integral == pytest.approx(4 * math.pi, rel=1e-10)
        assert len(rep.rows) == 3
        for row in rep.rows:
            # unit ball with unit flux: u(r) = 1/r exactly
            exact = 1.0 / row.radius
            assert row.value_min == pytest.approx(exact, rel=2e-3)
            assert row.value_max == pytest.approx(exact, rel=2e-3)
            assert row.lower < exact < row.upper
            assert row.tol > 0
            assert row.passed
        assert rep.passed

    def test_envelope_uses_frozen_constants(self, ball_plain_report):
        for row in ball_plain_report.rows:
            profile = ball_plain_report.flux_integral / (sphere_area(3) * row.radius)
            assert row.lower == pytest.approx(
                lower_envelope_constant(row.gamma, 3) * profile, rel=1e-12
            )
            assert row.upper == pytest.approx(
                upper_envelope_constant(row.gamma, 3) * profile, rel=1e-12
            )

    def test_mc_cross_check_populated_where_asked(self, ball_plain_report):
        rows = {row.gamma: row for row in ball_plain_report.rows}
        assert rows[4.0].mc_value is None and rows[10.0].mc_value is None
        row = rows[2.0]
        assert row.mc_value is not None and row.mc_stderr > 0
        # boundary-started occupation reproduces u(2) = 0.5
        assert abs(row.mc_value - 0.5) < 4.0 * row.mc_stderr + 0.01

    def test_representation_diagnostic_tight(self, ball_plain_report):
        diag = ball_plain_report.diagnostics
        assert diag["representation_gap"] < 0.05
        assert diag["surface_area"] == pytest.approx(4 * math.pi, rel=1e-10)
        assert diag["increments"][-1] <= 1e-4

    def test_rejects_weighted_operator(self):
        cfg = ScenarioConfig(
            name="bad", domain=make_ball(1.0),
            operator=gaussian_weight_operator(0.5, 1.0), flux=uniform_flux(),
        )
        with pytest.raises(ValueError, match="unweighted"):
            verify_laplace_envelope(cfg)


@pytest.fixture(scope="module")
def weighted_degenerate_report():
    cfg = ScenarioConfig(
        name="degenerate",
        domain=make_ball(1.0),
        operator=laplacian_operator(),
        flux=uniform_flux(),
        sphere_factor=1.5,
        probe_factors=(3.0, 5.0),
        mc=PathConfig(samples=2500, seed=11, threads=2),
    )
    return verify_weighted_envelope(cfg, n_green_starts=4)


class TestWeightedEnvelope:
    def test_degenerate_weight_brackets_plain_solution(self, weighted_degenerate_report):
        rep = weighted_degenerate_report
        assert rep.kind == "weighted"
        # e^Q = 1 everywhere, so the weighted flux integral is the plain one
        assert rep.flux_integral == pytest.approx(4 * math.pi, rel=1e-10)
        for row in rep.rows:
            exact = 1.0 / row.radius
            assert row.lower < exact < row.upper
            assert row.value_min == pytest.approx(exact, rel=2e-3)
            assert row.passed
        assert rep.passed

    def test_return_potential_matches_closed_form(self, weighted_degenerate_report):
        v_min, v_max = weighted_degenerate_report.diagnostics["v_range"]
        # hitting probability of the unit ball from radius 1.5
        assert v_min == pytest.approx(1.0 / 1.5, rel=2e-3)
        assert v_max == pytest.approx(1.0 / 1.5, rel=2e-3)
        assert v_max - v_min < 1e-3

    def test_green_ranges_cover_closed_form(self, weighted_degenerate_report):
        angles = (np.arange(4) + 0.5) * math.pi / 4
        starts = 1.5 * np.column_stack(
            [np.sin(angles), np.zeros(4), np.cos(angles)]
        )
        ranges = weighted_degenerate_report.diagnostics["green_ranges"]
        for r, (lo, hi) in ranges.items():
            probe = np.array([0.0, 0.0, r])
            exact = np.array([
                dirichlet_green_exterior_ball(z, probe, 1.0, 3) for z in starts
            ])
            assert lo <= exact.min() and hi >= exact.max()
            assert hi <= 3.0 * exact.max()  # slack stays proportionate

    def test_rejects_non_ball_domain(self):
        cfg = ScenarioConfig(
            name="bad", domain=make_shell(0.5, 1.0),
            operator=laplacian_operator(), flux=uniform_flux(),
        )
        with pytest.raises(ValueError, match="ball"):
            verify_weighted_envelope(cfg)


class TestWeightShiftInvariance:
    def test_constant_q_offset_leaves_solution_unchanged(self):
        gw = gaussian_weight_operator(kappa=0.5, width=1.0)
        shifted = OperatorSpec(
            label="shifted",
            q_fn=lambda p: gw.q(p) + 0.7,
            grad_q_fn=gw.grad_q,
            a_fn=gw.a_scalar,
        )
        dom, flux = make_ball(1.0), uniform_flux()
        mesh = MeshSpec(cells_per_decade=32, n_theta=24)
        base = solve_minimal(dom, gw, flux, [2.0], mesh_spec=mesh, tol=1e-3)
        moved = solve_minimal(dom, shifted, flux, [2.0], mesh_spec=mesh, tol=1e-3)
        np.testing.assert_allclose(
            moved.field.at_radius(2.0), base.field.at_radius(2.0), rtol=1e-10
        )


@pytest.fixture(scope="module")
def small_blowup():
    return run_shell_blowup_study(ns=(4, 8))


class TestBlowupStudy:
    def test_interior_grows_while_exterior_stays_bounded(self, small_blowup):
        rep = small_blowup
        assert rep.ns == [4, 8]
        assert rep.largest_trusted_n == 8
        assert all(r >= 1.5 for r in rep.growth_ratios)
        assert rep.growth_ok and rep.exterior_ok and rep.area_ok
        assert rep.passed
        assert rep.diagnostics["notes"] == {}

    def test_envelope_caps_recomputed_independently(self, small_blowup):
        rep = small_blowup
        # n = 4 shell: outer radius 0.75, so the sphere at 1.5 sits at ratio 2
        expected = (
            upper_envelope_constant(2.0, 3)
            * rep.surface_areas[0]
            / (sphere_area(3) * 1.5)
        )
        assert rep.envelope_caps[1.5][0] == pytest.approx(expected, rel=1e-12)

    def test_empty_index_list_raises(self):
        with pytest.raises(SolverError, match="no pinched-shell index"):
            run_shell_blowup_study(ns=())


class TestGreenSymmetry:
    def test_weighted_reciprocity_holds_and_plain_fails(self):
        rep = verify_green_symmetry(
            make_ball(1.0), gaussian_weight_operator(kappa=0.5, width=1.0)
        )
        assert rep.probes.shape == (6, 3)
        assert rep.passed
        assert rep.weighted_asymmetry < rep.tolerance
        assert rep.symmetrized_gap < 1e-12
        # the unweighted matrix must visibly break symmetry, or the
        # weighted check would be vacuous
        assert rep.plain_asymmetry > 1e-6

    def test_too_few_probes_rejected(self):
        probes = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, -3.0]])
        with pytest.raises(ValueError, match="at least 6"):
            verify_green_symmetry(
                make_ball(1.0), laplacian_operator(), probes=probes
            )


class TestScaleInvariance:
    def test_shell_ratios_agree_across_scales(self):
        gammas = (2.0, 4.0)
        small = scale_invariance_ratios(
            lambda s: make_shell(0.5 * s, s), gammas, 0.5
        )
        large = scale_invariance_ratios(
            lambda s: make_shell(0.5 * s, s), gammas, 2.0
        )
        np.testing.assert_allclose(small, large, atol=5e-3)
        for g, ratio in zip(gammas, small):
            assert lower_envelope_constant(g, 3) - 0.02 < ratio
            assert ratio < upper_envelope_constant(g, 3) + 0.02


def make_bound_report(passing=True):
    rows = [
        BoundRow(radius=2.0, gamma=2.0, value_min=0.49, value_max=0.51,
                 lower=0.3, upper=0.7, tol=0.01),
        BoundRow(radius=4.0, gamma=4.0, value_min=0.24, value_max=0.26,
                 lower=0.2, upper=0.25 if not passing else 0.3, tol=0.001,
                 mc_value=0.251, mc_stderr=0.004),
    ]
    return BoundReport(
        scenario="toy", kind="plain", flux_integral=4 * math.pi,
        rows=rows, diagnostics={},
    )


class TestEmitReport:
    def test_empty_results_raise_and_leave_nothing(self, tmp_path):
        out = tmp_path / "empty"
        with pytest.raises(ValueError, match="nothing to report"):
            emit_report([], out)
        assert not out.exists()

    def test_single_bound_report_writes_three_files(self, tmp_path):
        written = emit_report([make_bound_report()], tmp_path / "run")
        names = sorted(p.name for p in written)
        assert names == ["bounds.csv", "envelope.svg", "manifest.json"]
        lines = (tmp_path / "run" / "bounds.csv").read_text().splitlines()
        assert len(lines) == 3  # header plus one row per probe sphere
        assert lines[0].startswith("scenario,kind,gamma")
        assert lines[1].endswith(",pass") and lines[2].endswith(",pass")
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["bound_reports"][0]["passed"] is True
        assert manifest["bound_reports"][0]["tolerances"] == [0.01, 0.001]

    def test_failing_row_lands_in_csv_and_manifest(self, tmp_path):
        emit_report([make_bound_report(passing=False)], tmp_path)
        lines = (tmp_path / "bounds.csv").read_text().splitlines()
        assert lines[2].endswith(",fail")
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["bound_reports"][0]["passed"] is False

    def test_summary_and_extra_manifest_fields(self, tmp_path):
        emit_report(
            [make_bound_report()], tmp_path,
            summary_lines=["criterion 1: PASS", "criterion 2: PASS"],
            manifest_extra={"seed": 7},
        )
        assert (tmp_path / "summary.txt").read_text() == (
            "criterion 1: PASS\ncriterion 2: PASS\n"
        )
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 7

    def test_blowup_and_circuit_artifacts(self, tmp_path, small_blowup):
        stats = CircuitStats(
            samples=100, outer_level=2.0,
            survival_counts=np.array([100, 52, 26, 11]),
            occupation_by_circuit=np.zeros(4),
            contained_occupation=0.0,
            entry_points=np.zeros((0, 3)),
            escapes=89, budget_exhausted=0,
        )
        written = emit_report([small_blowup, stats], tmp_path)
        names = sorted(p.name for p in written)
        assert names == ["blowup.csv", "blowup.svg", "hitting.svg", "manifest.json"]
        lines = (tmp_path / "blowup.csv").read_text().splitlines()
        assert len(lines) == 1 + len(small_blowup.ns)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["blowups"][0]["largest_trusted_n"] == 8
        assert manifest["circuit_runs"][0]["samples"] == 100

    def test_artifacts_are_byte_deterministic(self, tmp_path):
        rep = make_bound_report()
        a = emit_report([rep], tmp_path / "a")
        b = emit_report([rep], tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.name == pb.name
            assert pa.read_bytes() == pb.read_bytes()
