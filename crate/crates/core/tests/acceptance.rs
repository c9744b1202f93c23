//! Acceptance criteria 1-10, one `[PASS]`/`[FAIL]` line each.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, LogNormal, Normal};

use rainbow_density::fdiff::DiffSpec;
use rainbow_density::models::TerminalLaw;
use rainbow_density::payoffs::{eval_payoff, PNorm, StrikeSpec};
use rainbow_density::pricers::{price, PricerConfig};
use rainbow_density::recovery::{
    check_sum_decomposition, default_diff_spec, default_limit_spec, price_by_density_1d, recover_density_cdf,
    recover_density_cp, recover_density_main, recover_density_n2_alternative, recover_marginal_survival,
    DensityPoint, GridSpec, RecoveryReport,
};

const SIGMA: f64 = 0.2;

struct Outcome {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: &'static str, title: &'static str, pass: bool, detail: String) -> Outcome {
    let tag = if pass { "[PASS]" } else { "[FAIL]" };
    println!("{tag} {id} {title}: {detail}");
    Outcome { id, title, pass, detail }
}

fn failed(id: &'static str, title: &'static str, e: impl std::fmt::Display) -> Outcome {
    report(id, title, false, format!("error: {e}"))
}

/// Lognormal marginal with unit spot, zero rate and unit maturity.
fn marginal() -> LogNormal {
    LogNormal::new(-0.5 * SIGMA * SIGMA, SIGMA).unwrap()
}

fn product_density(x: &[f64]) -> f64 {
    x.iter().map(|xi| marginal().pdf(*xi)).product()
}

fn black_call(k: f64) -> f64 {
    let n = Normal::standard();
    if k <= 0.0 {
        return 1.0 - k;
    }
    let d1 = (-k.ln() + 0.5 * SIGMA * SIGMA) / SIGMA;
    n.cdf(d1) - k * n.cdf(d1 - SIGMA)
}

fn lognormal(n: usize) -> TerminalLaw {
    TerminalLaw::independent_lognormal(vec![1.0; n], vec![SIGMA; n], 1.0).unwrap()
}

fn oracle_gaps(points: &[DensityPoint]) -> (f64, f64) {
    let gaps: Vec<f64> = points.iter().map(|p| (p.value - product_density(&p.strikes)).abs()).collect();
    let linf = gaps.iter().copied().fold(0.0, f64::max);
    (linf, gaps.iter().sum::<f64>() / gaps.len() as f64)
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

struct TwoAsset {
    main: RecoveryReport,
    main_time: Duration,
    cp: Vec<(PNorm, RecoveryReport)>,
    cdf: RecoveryReport,
}

fn two_asset_grids() -> Result<TwoAsset, String> {
    let law = lognormal(2);
    let grid = GridSpec::uniform(&[0.7, 0.7], &[1.3, 1.3], &[5, 5]).map_err(|e| e.to_string())?;
    let cfg = PricerConfig::quadrature();
    let diff = default_diff_spec(&law);
    let limit = default_limit_spec(&law);
    let (main, main_time) = timed(|| single_threaded(|| recover_density_main(&law, &grid, &cfg, &diff)));
    let main = main.map_err(|e| e.to_string())?;
    let mut cp = Vec::new();
    for p in [PNorm::Finite(1.0), PNorm::Finite(2.0), PNorm::Infinity] {
        let r = recover_density_cp(&law, &grid, p, &cfg, &diff, &limit).map_err(|e| e.to_string())?;
        cp.push((p, r));
    }
    let cdf = recover_density_cdf(&law, &grid, &cfg, &diff).map_err(|e| e.to_string())?;
    Ok(TwoAsset { main, main_time, cp, cdf })
}

fn criterion_1(g: &TwoAsset) -> Outcome {
    let (linf, l1) = oracle_gaps(&g.main.density_grid.points);
    let limit = Duration::from_secs(120);
    report(
        "1",
        "main-route density, 2-d lognormal 5x5",
        linf <= 1e-2 && l1 <= 5e-3 && g.main_time <= limit,
        format!("Linf {linf:.3e} (<= 1e-2), L1 {l1:.3e} (<= 5e-3), single-threaded {:.1?} (<= 120s)", g.main_time),
    )
}

fn criterion_2(g: &TwoAsset) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, r) in &g.cp {
        let (linf, _) = oracle_gaps(&r.density_grid.points);
        pass &= linf <= 2e-2;
        parts.push(format!("p={p} Linf {linf:.3e}"));
    }
    for (i, (pa, a)) in g.cp.iter().enumerate() {
        for (pb, b) in &g.cp[i + 1..] {
            let mut worst_gap: f64 = 0.0;
            let mut ok = true;
            for (x, y) in a.density_grid.points.iter().zip(&b.density_grid.points) {
                let gap = (x.value - y.value).abs();
                worst_gap = worst_gap.max(gap);
                ok &= gap <= x.error + y.error;
            }
            pass &= ok;
            parts.push(format!("|p={pa} - p={pb}| {worst_gap:.2e}{}", if ok { "" } else { " exceeds errors" }));
        }
    }
    report("2", "cp-route p-invariance", pass, parts.join(", "))
}

fn criterion_3(g: &TwoAsset) -> Outcome {
    let (linf, _) = oracle_gaps(&g.cdf.density_grid.points);
    let reference = &g.cdf.density_grid.points;
    let to_reference = |r: &RecoveryReport| {
        r.density_grid
            .points
            .iter()
            .zip(reference)
            .map(|(a, b)| (a.value - b.value).abs())
            .fold(0.0, f64::max)
    };
    let mut worst = to_reference(&g.main);
    for (_, r) in &g.cp {
        worst = worst.max(to_reference(r));
    }
    report(
        "3",
        "CDF reference route",
        linf <= 1e-3 && worst <= 2e-2,
        format!("CDF route Linf {linf:.3e} (<= 1e-3), option routes to CDF grid {worst:.3e} (<= 2e-2)"),
    )
}

/// `h_p` written out directly, independent of the library payoff.
fn h_direct(x: &[f64], k: &[f64], outer: f64, p: Option<f64>) -> f64 {
    let u: Vec<f64> = x.iter().zip(k).map(|(a, b)| (a - b).max(0.0)).collect();
    let norm = match p {
        None => u.iter().copied().fold(0.0, f64::max),
        Some(p) => u.iter().map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p),
    };
    (norm - outer).max(0.0)
}

fn criterion_4() -> Outcome {
    let ps = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut payoff_ok = true;
    let mut library_gap: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=4usize);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let k: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
        let outer = rng.random_range(0.0..0.5);
        let strikes = StrikeSpec::new(k.clone(), outer).unwrap();
        let h_inf = h_direct(&x, &k, outer, None);
        let u_max = x.iter().zip(&k).map(|(a, b)| (a - b).max(0.0)).fold(0.0, f64::max);
        library_gap = library_gap.max((eval_payoff(&x, &strikes, PNorm::Infinity).unwrap() - h_inf).abs());
        for p in ps {
            let h_p = h_direct(&x, &k, outer, Some(p));
            library_gap = library_gap.max((eval_payoff(&x, &strikes, PNorm::Finite(p)).unwrap() - h_p).abs());
            let bound = ((n as f64).powf(1.0 / p) - 1.0) * u_max;
            payoff_ok &= (h_p - h_inf).abs() <= bound + 1e-12;
        }
    }

    let law = lognormal(2);
    let cfg = PricerConfig::quadrature();
    let mut price_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for (k, outer) in [(vec![0.9, 1.1], 0.05), (vec![1.0, 1.0], 0.0), (vec![1.2, 0.8], 0.1)] {
        let at = |o: f64, p: PNorm| price(&law, &StrikeSpec::new(k.clone(), o).unwrap(), p, &cfg).unwrap();
        let v128 = at(outer, PNorm::Finite(128.0));
        let vinf = at(outer, PNorm::Infinity);
        let surrogate = at(0.0, PNorm::Infinity);
        let allowed = v128.error_bound
            + vinf.error_bound
            + (2f64.powf(1.0 / 128.0) - 1.0) * (surrogate.value + surrogate.error_bound);
        let gap = (v128.value - vinf.value).abs();
        price_ok &= gap <= allowed;
        worst_ratio = worst_ratio.max(gap / allowed);
    }
    report(
        "4",
        "p -> infinity payoff and price bounds",
        payoff_ok && price_ok && library_gap <= 1e-12,
        format!(
            "20 triples x 8 exponents within bound: {payoff_ok}; library vs direct payoff {library_gap:.1e}; \
             price gap / allowance at p=128 {worst_ratio:.3}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let cfg = PricerConfig::quadrature();
    let mut worst: f64 = 0.0;
    let mut rungs = 0;

    let square = TerminalLaw::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let ladder: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let diff = default_diff_spec(&square);
    for j in 0..2 {
        match recover_marginal_survival(&square, j, &ladder, &[0.5, 0.5], &cfg, &diff) {
            Ok(rows) => {
                for r in rows {
                    worst = worst.max((r.recovered.value - (1.0 - r.strike)).abs());
                    rungs += 1;
                }
            }
            Err(e) => return failed("5", "marginal-survival ladders", e),
        }
    }

    let law = lognormal(2);
    let dist = marginal();
    let ladder: Vec<f64> = (1..=9).map(|i| dist.inverse_cdf(i as f64 / 10.0)).collect();
    let diff = default_diff_spec(&law);
    for j in 0..2 {
        match recover_marginal_survival(&law, j, &ladder, &[1.0, 1.0], &cfg, &diff) {
            Ok(rows) => {
                for r in rows {
                    worst = worst.max((r.recovered.value - (1.0 - dist.cdf(r.strike))).abs());
                    rungs += 1;
                }
            }
            Err(e) => return failed("5", "marginal-survival ladders", e),
        }
    }
    report(
        "5",
        "marginal-survival ladders",
        worst <= 2e-3 && rungs == 36,
        format!("{rungs} rungs (uniform box and lognormal, 9 per coordinate), worst {worst:.3e} (<= 2e-3)"),
    )
}

fn criterion_6() -> Outcome {
    let cfg = PricerConfig::quadrature();
    let ps = [PNorm::Finite(1.0), PNorm::Finite(2.0), PNorm::Infinity];
    let cases: Vec<(&str, TerminalLaw, Vec<Vec<f64>>, bool)> = vec![
        ("lognormal n=1", lognormal(1), [0.8, 0.9, 1.0, 1.1, 1.2].iter().map(|k| vec![*k]).collect(), false),
        (
            "lognormal n=2",
            lognormal(2),
            vec![vec![0.8, 1.0], vec![0.9, 1.2], vec![1.0, 1.0], vec![1.1, 0.9], vec![1.2, 0.8]],
            false,
        ),
        (
            "uniform n=1",
            TerminalLaw::uniform_box(vec![0.0], vec![1.0]).unwrap(),
            [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|k| vec![*k]).collect(),
            true,
        ),
        (
            "uniform n=2",
            TerminalLaw::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            vec![vec![0.1, 0.3], vec![0.2, 0.8], vec![0.5, 0.5], vec![0.7, 0.4], vec![0.9, 0.1]],
            true,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, law, vectors, exact) in &cases {
        let mut worst_ratio: f64 = 0.0;
        let mut count = 0;
        for p in ps {
            for k in vectors {
                let s = match check_sum_decomposition(law, k, p, &cfg) {
                    Ok(s) => s,
                    Err(e) => return failed("6", "sum-of-limits decomposition", e),
                };
                let errors = s.lhs.error + s.rhs.error;
                let allowed = if *exact { errors } else { s.tail_bound + errors };
                pass &= s.gap <= allowed && (!exact || s.tail_bound == 0.0);
                worst_ratio = worst_ratio.max(if allowed > 0.0 { s.gap / allowed } else { s.gap });
                count += 1;
            }
        }
        parts.push(format!("{name}: {count} cases, worst gap/allowance {worst_ratio:.3}"));
    }
    report("6", "sum-of-limits decomposition", pass, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let title = "two-asset closing identity and alternative density";
    let law = lognormal(2);
    let grid = GridSpec::uniform(&[0.8, 0.8], &[1.2, 1.2], &[3, 3]).unwrap();
    let cfg = PricerConfig::quadrature();
    let diff = default_diff_spec(&law);
    let limit = default_limit_spec(&law);
    let alt = match recover_density_n2_alternative(&law, &grid, &cfg, &diff, &limit) {
        Ok(r) => r,
        Err(e) => return failed("7", title, e),
    };
    let main = match recover_density_main(&law, &grid, &cfg, &diff) {
        Ok(r) => r,
        Err(e) => return failed("7", title, e),
    };
    let dist = marginal();
    let mut as_stated: f64 = 0.0;
    let mut opposite_sign: f64 = 0.0;
    for pt in &alt.density_grid.points {
        let d = pt.identity.expect("identity recorded").directional.value;
        let q = (1.0 - dist.cdf(pt.strikes[0])) * (1.0 - dist.cdf(pt.strikes[1]));
        as_stated = as_stated.max((d - (-q)).abs());
        opposite_sign = opposite_sign.max((d - q).abs());
    }
    let mut agree = true;
    let mut worst: f64 = 0.0;
    for (a, m) in alt.density_grid.points.iter().zip(&main.density_grid.points) {
        let gap = (a.value - m.value).abs();
        worst = worst.max(gap - (a.error + m.error));
        agree &= gap <= a.error + m.error;
    }
    report(
        "7",
        title,
        as_stated <= 3e-3 && agree,
        format!(
            "|D - (-Q)| {as_stated:.3e} (<= 3e-3); |D - (+Q)| {opposite_sign:.3e}; \
             alternative vs main excess over errors {worst:.2e} ({})",
            if agree { "agree" } else { "disagree" }
        ),
    )
}

fn criterion_8() -> Outcome {
    let law = lognormal(1);
    let cfg = PricerConfig::quadrature();
    let curve = |k: f64| -> f64 {
        if k < 0.0 {
            return curve_at_zero(&law, &cfg) - k;
        }
        price(&law, &StrikeSpec::new(vec![k], 0.0).unwrap(), PNorm::ONE, &cfg).unwrap().value
    };
    let spec = DiffSpec::central(vec![1], vec![1e-3]);
    let strike = 1.1;
    let (lo, hi) = (1e-2, 4.0);
    let run = |f: &dyn Fn(f64) -> f64| price_by_density_1d(curve, f, lo, hi, &spec);
    let results = [run(&|_| 1.0), run(&|a| a), run(&|a| (a - strike).max(0.0))];
    let targets = [1.0, 1.0, black_call(strike)];
    let mut gaps = Vec::new();
    for (r, t) in results.iter().zip(targets) {
        match r {
            Ok(e) => gaps.push((e.value - t).abs()),
            Err(e) => return failed("8", "Breeden-Litzenberger pricing in 1-d", e),
        }
    }
    report(
        "8",
        "Breeden-Litzenberger pricing in 1-d",
        gaps.iter().all(|g| *g <= 2e-3),
        format!("mass {:.2e}, mean {:.2e}, call at 1.1 {:.2e} (each <= 2e-3)", gaps[0], gaps[1], gaps[2]),
    )
}

fn curve_at_zero(law: &TerminalLaw, cfg: &PricerConfig) -> f64 {
    price(law, &StrikeSpec::new(vec![0.0], 0.0).unwrap(), PNorm::ONE, cfg).unwrap().value
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn validate_outputs(config: &Path, out: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_rainbow-density"))
        .args(["validate", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("RAINBOW_DENSITY_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.code() != Some(0) {
        return Err(format!("validate exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn criterion_9() -> Outcome {
    let title = "validate is byte-for-byte reproducible";
    let dir = tempfile::TempDir::new().unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["default", "validate_monte_carlo"] {
        let config = workspace_root().join("configs").join(format!("{name}.json"));
        let first = validate_outputs(&config, &dir.path().join(format!("{name}-1")));
        let second = validate_outputs(&config, &dir.path().join(format!("{name}-2")));
        match (first, second) {
            (Ok(a), Ok(b)) => {
                let same = a == b && !a.is_empty();
                pass &= same;
                parts.push(format!("{name}: {} files {}", a.len(), if same { "identical" } else { "differ" }));
            }
            (Err(e), _) | (_, Err(e)) => return failed("9", title, e),
        }
    }
    report("9", title, pass, parts.join("; "))
}

fn criterion_10() -> Outcome {
    let title = "3-d CDF-route smoke test";
    let law = lognormal(3);
    let grid = GridSpec::new(vec![vec![1.0], vec![0.95], vec![1.05]]).unwrap();
    let cfg = PricerConfig::quadrature();
    let (r, elapsed) = timed(|| recover_density_cdf(&law, &grid, &cfg, &default_diff_spec(&law)));
    let r = match r {
        Ok(r) => r,
        Err(e) => return failed("10", title, e),
    };
    let pt = &r.density_grid.points[0];
    let gap = (pt.value - product_density(&pt.strikes)).abs();
    report(
        "10",
        title,
        gap <= 5e-3 && elapsed <= Duration::from_secs(60),
        format!("|recovered - analytic| {gap:.3e} (<= 5e-3) at (1, 0.95, 1.05), {elapsed:.1?} (<= 60s)"),
    )
}

fn main() {
    let mut outcomes = Vec::new();
    match two_asset_grids() {
        Ok(g) => {
            outcomes.push(criterion_1(&g));
            outcomes.push(criterion_2(&g));
            outcomes.push(criterion_3(&g));
        }
        Err(e) => {
            outcomes.push(failed("1", "main-route density, 2-d lognormal 5x5", &e));
            outcomes.push(failed("2", "cp-route p-invariance", &e));
            outcomes.push(failed("3", "CDF reference route", &e));
        }
    }
    outcomes.push(criterion_4());
    outcomes.push(criterion_5());
    outcomes.push(criterion_6());
    outcomes.push(criterion_7());
    outcomes.push(criterion_8());
    outcomes.push(criterion_9());
    outcomes.push(criterion_10());

    let failures: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!("\n{} of {} criteria passed", outcomes.len() - failures.len(), outcomes.len());
    if !failures.is_empty() {
        for f in &failures {
            println!("failed: {} {}: {}", f.id, f.title, f.detail);
        }
        std::process::exit(1);
    }
}
