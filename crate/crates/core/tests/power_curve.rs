//! Loss factors as a function of photon number, recovered from per-mode TLS
//! fits. Two mechanisms: a saturable surface loss and a constant bulk loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qloss::solver::{loss_factor_power_curve, Mechanism, ParticipationTable};
use qloss::tls::{fit_tls, PowerSweepPoint, TlsFit};
use qloss::ParticipationUnit;

const SURF: [f64; 3] = [1.2e-3, 4e-5, 2e-5];
const BULK: [f64; 3] = [0.9, 0.8, 0.45];
const G_BULK: f64 = 3e-8;
const G_SAT: f64 = 2.5e-4;
const G_TLS: f64 = 1.4e-3;
const N_C: f64 = 4.0;
const BETA: f64 = 0.6;

fn gamma_surface(n: f64) -> f64 {
    G_SAT + G_TLS / (1.0 + (n / N_C).powf(BETA)).sqrt()
}

fn inverse_q(mode: usize, n: f64) -> f64 {
    SURF[mode] * gamma_surface(n) + BULK[mode] * G_BULK
}

fn table() -> ParticipationTable {
    ParticipationTable::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![
            Mechanism {
                label: "surface".into(),
                unit: ParticipationUnit::Dimensionless,
                values: SURF.to_vec(),
            },
            Mechanism {
                label: "bulk".into(),
                unit: ParticipationUnit::Dimensionless,
                values: BULK.to_vec(),
            },
        ],
    )
    .unwrap()
}

fn grid(count: usize) -> Vec<f64> {
    (0..count).map(|i| 10f64.powf(-1.0 + 7.0 * i as f64 / (count - 1) as f64)).collect()
}

#[test]
fn exact_fits_give_exact_curve() {
    let fits: Vec<(String, TlsFit)> = (0..3)
        .map(|m| {
            let q0 = 1.0 / (SURF[m] * G_SAT + BULK[m] * G_BULK);
            let q1 = 1.0 / (SURF[m] * G_TLS);
            (["a", "b", "c"][m].to_string(), TlsFit::exact(q0, q1, N_C, BETA))
        })
        .collect();
    let curve = loss_factor_power_curve(&fits, &table(), &[], &grid(15)).unwrap();
    for (n, g) in curve.series("surface").unwrap() {
        assert!((g.value / gamma_surface(n) - 1.0).abs() < 1e-9, "n̄ = {n}");
    }
    for (_, g) in curve.series("bulk").unwrap() {
        assert!((g.value / G_BULK - 1.0).abs() < 1e-9);
    }
}

#[test]
fn noisy_sweeps_recover_surface_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let nbar = grid(30);
    let fits: Vec<(String, TlsFit)> = (0..3)
        .map(|m| {
            let sweep: Vec<PowerSweepPoint> = nbar
                .iter()
                .map(|&n| {
                    let q = 1.0 / inverse_q(m, n);
                    let e: f64 = rng.sample(StandardNormal);
                    PowerSweepPoint::new(n, q * (1.0 + 0.005 * e), 0.005 * q).unwrap()
                })
                .collect();
            (["a", "b", "c"][m].to_string(), fit_tls(&sweep).unwrap())
        })
        .collect();
    let curve = loss_factor_power_curve(&fits, &table(), &[], &grid(8)).unwrap();
    let series = curve.series("surface").unwrap();
    let (lo, hi) = (series[0].1.value, series[series.len() - 1].1.value);
    assert!(lo / hi > 4.0, "surface loss should saturate with power");
    for (n, g) in series {
        assert!((g.value / gamma_surface(n) - 1.0).abs() < 0.01, "n̄ = {n}: {:e} vs {:e}", g.value, gamma_surface(n));
        assert!(g.covers(gamma_surface(n), 3.0));
    }
    assert!(curve.points.iter().all(|p| !p.extrapolated));
}
