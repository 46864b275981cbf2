use footprint_uq::analysis::metrics;
use footprint_uq::domain::{GridSpec, Release};
use footprint_uq::lpdm::{simulate_footprint, SimConfig, METERS_PER_DEG_LAT};
use footprint_uq::synthmet::MetField;
use proptest::prelude::*;

fn grid() -> GridSpec {
    GridSpec::new(40, 60, 10.0, 20.0, 0.25, 0.25).unwrap()
}

fn uniform(u: f64, v: f64) -> MetField {
    MetField::uniform(grid(), vec![10.0, 100.0, 1000.0, 3000.0], vec![-400.0, 400.0], u, v).unwrap()
}

fn quiet(t_back_hours: f64) -> SimConfig {
    SimConfig {
        n_particles: 7,
        k_h: 0.0,
        sigma_w: 0.0,
        t_back_hours,
        ..SimConfig::default()
    }
}

fn release(row: usize, col: usize, altitude: f64) -> Release {
    let g = grid();
    Release {
        id: 9,
        lat: g.lat_of(row),
        lon: g.lon_of(col),
        altitude,
        time: 0.0,
    }
}

#[test]
fn stationary_particles_deposit_everything_in_release_cell() {
    let g = grid();
    let r = release(13, 21, 50.0);
    let fp = simulate_footprint(&r, &uniform(0.0, 0.0), &quiet(72.0)).unwrap();
    let k = g.index(13, 21);
    assert!((fp.values[k] - 72.0 * 3600.0).abs() < 1e-6);
    for (i, &v) in fp.values.iter().enumerate() {
        if i != k {
            assert_eq!(v, 0.0);
        }
    }
}

/// Closed-form westward trajectory: after `k` steps the particle sits
/// `k·u·dt` meters west of the release.
fn analytic_deposition(r: &Release, u: f64, cfg: &SimConfig) -> Vec<f64> {
    let g = grid();
    let mut out = vec![0.0; g.len()];
    let row = ((r.lat - g.lat0) / g.d_lat).round() as usize;
    let dlon = u * cfg.dt / (METERS_PER_DEG_LAT * r.lat.to_radians().cos());
    for k in 0..cfg.n_steps() {
        let lon = r.lon - k as f64 * dlon;
        let col = ((lon - g.lon0) / g.d_lon + 0.5).floor();
        if col < 0.0 || col >= g.n_lon as f64 {
            break;
        }
        out[g.index(row, col as usize)] += cfg.dt;
    }
    out
}

#[test]
fn constant_wind_matches_analytic_trajectory() {
    for &(u, col, hours) in &[(10.0, 50, 24.0), (4.0, 40, 48.0), (17.5, 58, 12.0), (25.0, 55, 72.0)] {
        let r = release(20, col, 30.0);
        let cfg = quiet(hours);
        let fp = simulate_footprint(&r, &uniform(u, 0.0), &cfg).unwrap();
        let oracle = analytic_deposition(&r, u, &cfg);
        for (k, (&a, &b)) in fp.values.iter().zip(&oracle).enumerate() {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0), "u {u}: cell {k} simulated {a} analytic {b}");
        }
        let cells = oracle.iter().filter(|&&v| v > 0.0).count();
        assert!(cells > 1, "u {u}: trajectory should cross several cells");
    }
}

#[test]
fn release_cell_crossing_time() {
    // 0.25° of longitude at 15°N is crossed in ~ 26.9 km / 10 m/s ≈ 2690 s
    let r = release(20, 50, 30.0);
    let cfg = SimConfig {
        dt: 60.0,
        ..quiet(24.0)
    };
    let fp = simulate_footprint(&r, &uniform(10.0, 0.0), &cfg).unwrap();
    let g = grid();
    let width_m = g.d_lon * METERS_PER_DEG_LAT * r.lat.to_radians().cos();
    let crossing = width_m / 10.0;
    let west = fp.values[g.index(20, 49)];
    assert!((west - crossing).abs() <= cfg.dt, "{west} vs {crossing}");
}

#[test]
fn diffusion_centers_on_release() {
    let g = grid();
    let r = release(20, 30, 20.0);
    let met = uniform(0.0, 0.0);
    let mut coms = Vec::new();
    for seed in 0..20 {
        let cfg = SimConfig {
            n_particles: 100,
            k_h: 2000.0,
            sigma_w: 0.0,
            t_back_hours: 24.0,
            seed,
            ..SimConfig::default()
        };
        let fp = simulate_footprint(&r, &met, &cfg).unwrap();
        let total = fp.total();
        let (mut sr, mut sc) = (0.0, 0.0);
        for i in 0..g.n_lat {
            for j in 0..g.n_lon {
                let v = fp.values[g.index(i, j)];
                sr += v * i as f64;
                sc += v * j as f64;
            }
        }
        coms.push((sr / total, sc / total));
    }
    let n = coms.len() as f64;
    for (axis, center) in [(0usize, 20.0), (1, 30.0)] {
        let xs: Vec<f64> = coms.iter().map(|c| if axis == 0 { c.0 } else { c.1 }).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - center).abs() <= 3.0 * se, "axis {axis}: {mean} vs {center} (se {se})");
    }
}

#[test]
fn more_particles_halve_sampling_noise() {
    let r = release(20, 40, 50.0);
    let met = uniform(6.0, -2.0);
    let half_nmae = |n: usize| {
        let cfg = |seed| SimConfig {
            n_particles: n,
            t_back_hours: 24.0,
            seed,
            ..SimConfig::default()
        };
        let a = simulate_footprint(&r, &met, &cfg(101)).unwrap();
        let b = simulate_footprint(&r, &met, &cfg(202)).unwrap();
        metrics(&a.values, &b.values, 0.0).unwrap().nmae
    };
    let coarse = half_nmae(100);
    let fine = half_nmae(400);
    assert!(fine < coarse, "{fine} !< {coarse}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn deposition_is_bounded_and_nonnegative(
        u in -20.0f64..20.0,
        v in -20.0f64..20.0,
        k_h in 0.0f64..60_000.0,
        sigma_w in 0.0f64..5.0,
        altitude in 0.0f64..1500.0,
        n_particles in 1usize..40,
        t_back_hours in 0.0f64..48.0,
        dt in 120.0f64..1800.0,
        row in 0usize..40,
        col in 0usize..60,
        seed in any::<u64>(),
    ) {
        let cfg = SimConfig { n_particles, dt, t_back_hours, k_h, sigma_w, seed, ..SimConfig::default() };
        let fp = simulate_footprint(&release(row, col, altitude), &uniform(u, v), &cfg).unwrap();
        prop_assert!(fp.values.iter().all(|x| x.is_finite() && *x >= 0.0));
        let bound = cfg.n_steps() as f64 * dt;
        prop_assert!(fp.total() <= bound * (1.0 + 1e-12), "{} > {}", fp.total(), bound);
    }
}
