"""
實驗驅動單元測試
"""

import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from src.application.basis import v_gram_matrix
from src.application.experiments import (
    SweepEntry,
    build_scenario,
    domain_sweep,
    initial_velocity_sample,
    refinement_sweep,
    run_scenario,
    simulate,
    trajectory_difference,
    verification_checks,
)
from src.application.galerkin import relative_velocity_nodes
from src.application.verify import VerificationReport, snapshot_terms
from src.domain.errors import SimulationError
from src.infrastructure.config import parse_config
from src.infrastructure.writers import read_schema_csv
from tests.fixtures import coarse_disc

COARSE = {
    "domain.R": "3.0",
    "domain.resolution": "2.0",
    "domain.surface_subdivisions": "2",
    "basis.N": "10",
    "basis.potential_order": "1",
    "time.T": "0.02",
    "time.dt": "0.01",
}


def _coarse_config(**extra):
    values = dict(COARSE)
    values.update(extra)
    return parse_config(values)


def _entry(R, N=10, dt=0.01, speed=1.0):
    times = np.arange(0.0, 0.1 + 1e-12, dt)
    ell = np.outer(times, [speed, 0.0, 0.0])
    return SweepEntry(
        R=R,
        N=N,
        dt=dt,
        times=times,
        ell=ell,
        omega=np.zeros_like(ell),
        energy=np.ones(len(times)),
        min_slack=0.0,
        projection_error=1.0 / N,
        weak_residual=1e-9,
    )


class TestScenario(unittest.TestCase):
    """情境建構單元測試"""

    def test_random_modes_are_seeded(self):
        """測試 random_modes 的係數由種子決定"""
        config = _coarse_config(**{"initial.velocity": "random_modes", "initial.amplitude": "0.5"})
        a = build_scenario(config, seed=3)
        b = build_scenario(config, seed=3)
        c = build_scenario(config, seed=4)
        np.testing.assert_array_equal(a.initial.alpha, b.initial.alpha)
        self.assertFalse(np.array_equal(a.initial.alpha, c.initial.alpha))
        self.assertEqual(a.projection_error, 0.0)

    def test_vortex_sample(self):
        """測試 vortex 初始速度繞 e3 旋轉並衰減"""
        disc = coarse_disc()
        config = _coarse_config(**{"initial.velocity": "vortex", "initial.amplitude": "2.0"})
        sample = initial_velocity_sample(config, disc)
        radial = np.einsum("mc,mc->m", sample.values, disc.volume_points)
        np.testing.assert_allclose(radial, 0.0, atol=1e-12)
        np.testing.assert_array_equal(sample.values[:, 2], 0.0)

    def test_basis_orthonormal_in_initial_density(self):
        """測試情境的基底對初始密度加權的 𝓥 內積正交歸一"""
        config = _coarse_config(
            **{"initial.density": "two_layer", "initial.layer_radius": "2.0"}
        )
        scenario = build_scenario(config)
        gram = v_gram_matrix(
            scenario.basis, scenario.disc, scenario.geo, scenario.initial.density.values
        )
        np.testing.assert_allclose(gram, np.eye(scenario.basis.N), atol=1e-8)


class TestRunScenario(unittest.TestCase):
    """run_scenario 單元測試"""

    def setUp(self):
        """設置臨時輸出目錄"""
        self.out_dir = tempfile.mkdtemp()

    def tearDown(self):
        """清理臨時目錄"""
        shutil.rmtree(self.out_dir, ignore_errors=True)

    def test_zero_data_run(self):
        """測試零資料情境寫出所有檔案且結束狀態為 0"""
        config = _coarse_config(
            **{"propulsion.family": "none", "initial.velocity": "zero", "output.snapshot_every": "1"}
        )
        outcome = run_scenario(config, self.out_dir, verify=True, title="zero_data")

        self.assertEqual(outcome.status, 0)
        self.assertTrue(outcome.report.passed, [c.name for c in outcome.report.failures()])
        for key in ("trajectory", "ledger", "density_final", "density_00001", "html", "json"):
            self.assertTrue(os.path.exists(outcome.files[key]), key)

        rows = read_schema_csv(outcome.files["trajectory"])
        self.assertEqual(len(rows), 3)
        self.assertTrue(all(r["ell_x"] == 0.0 for r in rows))
        names = {c.name for c in outcome.report.checks}
        self.assertIn("weak_residual_cubic", names)
        self.assertIn("pressure_curl_defect", names)

    def test_summary_removes_shift(self):
        """測試摘要中的密度極值與質量已扣除正性平移"""
        config = _coarse_config(
            **{"propulsion.family": "none", "transport.eps_shift": "0.25"}
        )
        outcome = run_scenario(config, self.out_dir)

        checks = {c.name: c for c in outcome.report.checks}
        self.assertEqual(outcome.result.final.density.shift, 0.25)
        self.assertAlmostEqual(checks["density_min"].value, 1.0, places=12)
        self.assertAlmostEqual(checks["density_max"].value, 1.0, places=12)
        self.assertIn("shift 0.25 removed", checks["density_min"].note)
        self.assertAlmostEqual(checks["mass_initial"].value, coarse_disc().fluid_volume, places=10)

    def test_swirl_run_reports_energy(self):
        """測試帶推進的情境通過能量與 SO(3) 檢查"""
        config = _coarse_config(**{"propulsion.amplitude": "0.5"})
        outcome = run_scenario(config, self.out_dir)

        checks = {c.name: c for c in outcome.report.checks}
        self.assertTrue(checks["energy_slack_min"].passed)
        self.assertTrue(checks["so3_defect"].passed)
        self.assertTrue(checks["gyroscopic_neutrality"].passed)
        self.assertEqual(outcome.status, 0 if outcome.result.hard_invariants_held else 1)


class TestVerificationCost(unittest.TestCase):
    """驗證核心的共用求值單元測試"""

    def test_snapshots_and_diagnostics_are_reused(self):
        """測試快照項只求值一次、相對速度每個快照一次，三線性缺陷取自步診斷"""
        config = _coarse_config(
            **{"propulsion.amplitude": "0.5", "time.T": "0.04", "initial.density": "two_layer",
               "initial.layer_radius": "2.0"}
        )
        scenario = build_scenario(config)
        result = simulate(scenario)

        with patch(
            "src.application.experiments.snapshot_terms", wraps=snapshot_terms
        ) as snapshots, patch(
            "src.application.experiments.relative_velocity_nodes", wraps=relative_velocity_nodes
        ) as velocities, patch.object(
            scenario.system, "trilinear_defect", side_effect=AssertionError
        ):
            report = verification_checks(scenario, result, VerificationReport())

        self.assertEqual(snapshots.call_count, 1)
        self.assertEqual(velocities.call_count, len(result.states))
        checks = {c.name: c for c in report.checks}
        self.assertEqual(
            checks["trilinear_identity"].value,
            max(d.trilinear_defect for d in result.diagnostics),
        )
        self.assertEqual(checks["trilinear_identity"].tolerance, 1e-3)
        self.assertEqual(checks["renormalized_square"].tolerance, 1e-4)
        self.assertEqual(checks["weak_residual_cubic"].tolerance, 10.0 * (1e-8 + 0.01**2))
        self.assertIn("conservative_form_gap", checks)


class TestSweeps(unittest.TestCase):
    """掃描實驗單元測試"""

    def setUp(self):
        """設置臨時輸出目錄"""
        self.out_dir = tempfile.mkdtemp()

    def tearDown(self):
        """清理臨時目錄"""
        shutil.rmtree(self.out_dir, ignore_errors=True)

    def test_trajectory_difference(self):
        """測試不同時間格的軌跡差在粗格上比較"""
        coarse = _entry(3.0, dt=0.02, speed=1.0)
        fine = _entry(4.0, dt=0.01, speed=1.5)
        self.assertAlmostEqual(trajectory_difference(coarse, fine), 0.5 * 0.1)
        self.assertAlmostEqual(trajectory_difference(fine, coarse), 0.5 * 0.1)

    @patch("src.application.experiments._sweep_entry")
    def test_domain_sweep(self, mock_entry):
        """測試 R 掃描的差值遞減並寫出結果表"""
        mock_entry.side_effect = lambda config, seed: _entry(
            config.domain.R, speed=1.0 + 1.0 / config.domain.R**2
        )
        report = domain_sweep(_coarse_config(), (3.0, 4.0, 6.0), self.out_dir)

        self.assertEqual(report.radii, [3.0, 4.0, 6.0])
        self.assertEqual(len(report.differences), 2)
        self.assertTrue(report.decreasing)
        rows = read_schema_csv(os.path.join(self.out_dir, "domain_sweep.csv"))
        self.assertEqual(len(rows), 3)
        self.assertTrue(np.isnan(rows[-1]["diff_to_next"]))

    def test_domain_sweep_coarse_run(self):
        """測試實際執行 R ∈ {3, 4, 6} 的粗掃描，軌跡差隨 R 遞減"""
        config = _coarse_config(
            **{"propulsion.amplitude": "0.5", "time.T": "0.1", "time.dt": "0.02"}
        )
        report = domain_sweep(config, (3.0, 4.0, 6.0), self.out_dir)

        self.assertEqual(report.radii, [3.0, 4.0, 6.0])
        self.assertEqual([len(e.times) for e in report.entries], [6, 6, 6])
        self.assertTrue(all(np.isfinite(d) for d in report.differences))
        self.assertGreater(report.differences[0], 0.0)
        self.assertTrue(report.decreasing, report.differences)
        for entry in report.entries:
            self.assertLess(entry.weak_residual, 10.0 * (1e-8 + 0.02**2))

    def test_domain_sweep_rejects_unordered_radii(self):
        """測試 R 必須嚴格遞增"""
        with self.assertRaises(SimulationError):
            domain_sweep(_coarse_config(), (4.0, 3.0))

    @patch("src.application.experiments._sweep_entry")
    def test_failed_entry_is_labelled(self, mock_entry):
        """測試單次失敗時錯誤訊息帶有標籤"""
        mock_entry.side_effect = SimulationError("picard stalled")
        with self.assertRaises(SimulationError) as ctx:
            domain_sweep(_coarse_config(), (3.0, 4.0))
        self.assertIn("sweep entry R=3 failed", str(ctx.exception))

    @patch("src.application.experiments._sweep_entry")
    def test_refinement_sweep(self, mock_entry):
        """測試 N×dt 網格的排列、跨 N 的 NaN 與投影誤差"""
        mock_entry.side_effect = lambda config, seed: _entry(
            config.domain.R, N=config.basis.N, dt=config.time.dt
        )
        report = refinement_sweep(_coarse_config(), (10, 20), (0.02, 0.01), self.out_dir)

        self.assertEqual([(e.N, e.dt) for e in report.entries],
                         [(10, 0.02), (10, 0.01), (20, 0.02), (20, 0.01)])
        self.assertTrue(np.isnan(report.differences[1]))
        self.assertAlmostEqual(report.differences[0], 0.0)
        self.assertEqual(report.projection_errors(), [0.1, 0.05])
        self.assertEqual(len(report.by_basis_size(20)), 2)
        self.assertTrue(os.path.exists(os.path.join(self.out_dir, "refinement_sweep.csv")))

        with self.assertRaises(SimulationError):
            refinement_sweep(_coarse_config(), (10, 20), (0.01, 0.02))


if __name__ == "__main__":
    unittest.main()
