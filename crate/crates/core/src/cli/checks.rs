//! The named checks run by `validate`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Experiment, Tolerances};
use crate::fdiff::{DiffSpec, LimitSpec};
use crate::payoffs::{eval_payoff, PNorm, StrikeSpec};
use crate::pricers::{price, PricingMethod};
use crate::recovery::{
    check_sum_decomposition, price_by_density_1d, recover_density_cdf, recover_density_cp, recover_density_main,
    recover_density_n2_alternative, recover_marginal_survival, DensityPoint, RecoveryError, RecoveryReport,
};

/// Exponents of the payoff-limit check.
const P_LADDER: [f64; 8] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
/// Ratio of the density-pricing step to the recovery step.
const PRICING_STEP_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub measured: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
}

impl CheckResult {
    fn judged(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        let status = if measured <= tolerance { CheckStatus::Pass } else { CheckStatus::Fail };
        Self { name: name.into(), status, measured: Some(measured), tolerance: Some(tolerance), detail }
    }

    fn skipped(name: &str, reason: impl Into<String>) -> Self {
        Self { name: name.into(), status: CheckStatus::Skipped, measured: None, tolerance: None, detail: reason.into() }
    }

    fn failed(name: &str, error: impl std::fmt::Display) -> Self {
        Self {
            name: name.into(),
            status: CheckStatus::Fail,
            measured: None,
            tolerance: None,
            detail: format!("error: {error}"),
        }
    }
}

type Outcome = Result<(f64, String), String>;

fn judge(name: &str, tolerance: f64, outcome: Outcome) -> CheckResult {
    match outcome {
        Ok((measured, detail)) => CheckResult::judged(name, measured, tolerance, detail),
        Err(e) => CheckResult::failed(name, e),
    }
}

struct Suite<'a> {
    exp: &'a Experiment,
    tol: &'a Tolerances,
    diff: DiffSpec,
    limit: LimitSpec,
    means: Vec<f64>,
}

/// Runs every check in a fixed order.
pub fn run_checks(exp: &Experiment) -> Result<Vec<CheckResult>, super::CliError> {
    let n = exp.dimension();
    let suite = Suite {
        exp,
        tol: &exp.config.validate.tolerances,
        diff: exp.diff_spec(),
        limit: exp.limit_spec()?,
        means: (0..n).map(|j| exp.law.marginal_mean(j)).collect(),
    };
    let mut out = vec![
        judge("payoff-p-limit-bound", suite.tol.rounding, suite.payoff_bound()),
        judge("price-p-limit-bound", suite.tol.rounding, suite.price_bound()),
        suite.survival_ladder(),
        judge("sum-decomposition", suite.tol.rounding, suite.sum_decomposition()),
    ];
    out.extend(suite.density_checks());
    out.push(suite.breeden_litzenberger());
    Ok(out)
}

impl Suite<'_> {
    fn scale(&self) -> f64 {
        self.means.iter().sum::<f64>() / self.means.len() as f64
    }

    /// Why strike derivatives of total order `order` cannot be checked, if so.
    fn derivative_gate(&self, order: usize) -> Option<String> {
        if !self.exp.law.absolutely_continuous() {
            return Some("law is not absolutely continuous".into());
        }
        match self.exp.pricer.resolve(&self.exp.law) {
            Ok(PricingMethod::MonteCarlo) if order >= 2 => Some(format!(
                "Monte Carlo prices cannot support strike derivatives of total order {order}"
            )),
            Err(e) => Some(e.to_string()),
            _ => None,
        }
    }

    fn payoff_bound(&self) -> Outcome {
        let law = &self.exp.law;
        let n = law.dimension() as f64;
        let seed = &self.exp.pricer.seed;
        let sample = law.sample(self.exp.config.validate.payoff_triples, seed);
        let mut rng = seed.rng("validate-strikes");
        let mut worst = f64::NEG_INFINITY;
        for x in sample.rows() {
            let k: Vec<f64> = self.means.iter().map(|m| m * rng.random_range(0.5..1.5)).collect();
            let outer = self.scale() * rng.random_range(0.0..0.3);
            let strikes = StrikeSpec::new(k.clone(), outer).map_err(|e| e.to_string())?;
            let h_inf = eval_payoff(x, &strikes, PNorm::Infinity).map_err(|e| e.to_string())?;
            let u_max = x.iter().zip(&k).map(|(xi, ki)| (xi - ki).max(0.0)).fold(0.0, f64::max);
            for p in P_LADDER {
                let h_p = eval_payoff(x, &strikes, PNorm::Finite(p)).map_err(|e| e.to_string())?;
                let bound = (n.powf(1.0 / p) - 1.0) * u_max;
                worst = worst.max((h_p - h_inf).abs() - bound);
            }
        }
        Ok((worst, format!("largest |h_p - h_inf| - (n^(1/p) - 1) max u over {} triples", sample.len())))
    }

    fn price_bound(&self) -> Outcome {
        let law = &self.exp.law;
        let cfg = &self.exp.pricer;
        let n = law.dimension() as f64;
        let p = 128.0;
        let mut worst = f64::NEG_INFINITY;
        for f in [0.9, 1.0, 1.1] {
            let k: Vec<f64> = self.means.iter().map(|m| m * f).collect();
            let at = |outer: f64, q: PNorm| {
                let s = StrikeSpec::new(k.clone(), outer).map_err(|e| e.to_string())?;
                price(law, &s, q, cfg).map_err(|e| e.to_string())
            };
            let outer = 0.05 * self.scale();
            let vp = at(outer, PNorm::Finite(p))?;
            let vinf = at(outer, PNorm::Infinity)?;
            let surrogate = at(0.0, PNorm::Infinity)?;
            let allowed = vp.error_bound
                + vinf.error_bound
                + (n.powf(1.0 / p) - 1.0) * (surrogate.value + surrogate.error_bound);
            worst = worst.max((vp.value - vinf.value).abs() - allowed);
        }
        Ok((worst, "largest |V^128 - V^inf| minus pricing errors and the norm-gap surrogate".into()))
    }

    fn survival_ladder(&self) -> CheckResult {
        let name = "marginal-survival-ladder";
        if let Some(reason) = self.derivative_gate(1) {
            return CheckResult::skipped(name, reason);
        }
        let law = &self.exp.law;
        let rungs = self.exp.config.validate.ladder_rungs.max(1);
        let outcome = (|| {
            let mut worst: f64 = 0.0;
            for j in 0..law.dimension() {
                let ladder: Vec<f64> = (1..=rungs)
                    .map(|i| law.marginal_quantile(j, i as f64 / (rungs + 1) as f64))
                    .collect();
                let rows = recover_marginal_survival(law, j, &ladder, &self.means, &self.exp.pricer, &self.diff)
                    .map_err(|e| e.to_string())?;
                for r in rows {
                    worst = worst.max((r.recovered.value - r.analytic).abs());
                }
            }
            Ok((worst, format!("largest rung error over {rungs} marginal quantiles per coordinate")))
        })();
        judge(name, self.tol.survival_rung, outcome)
    }

    fn sum_decomposition(&self) -> Outcome {
        let m = self.exp.config.validate.sum_vectors.max(1);
        let mut worst = f64::NEG_INFINITY;
        let mut skipped = Vec::new();
        for p in &self.exp.config.p_values {
            if matches!(p, PNorm::Finite(q) if *q < 1.0) {
                skipped.push(p.to_string());
                continue;
            }
            for i in 0..m {
                let f = if m == 1 { 1.0 } else { 0.8 + 0.4 * i as f64 / (m - 1) as f64 };
                let k: Vec<f64> = self.means.iter().map(|v| v * f).collect();
                let s = check_sum_decomposition(&self.exp.law, &k, *p, &self.exp.pricer).map_err(|e| e.to_string())?;
                worst = worst.max(s.gap - s.tail_bound - s.lhs.error - s.rhs.error);
            }
        }
        let mut detail = "largest gap minus tail bound and pricing errors".to_string();
        if !skipped.is_empty() {
            detail.push_str(&format!("; p < 1 not covered: {}", skipped.join(", ")));
        }
        Ok((worst, detail))
    }

    fn density_checks(&self) -> Vec<CheckResult> {
        const NAMES: [&str; 8] = [
            "density-main-linf",
            "density-main-l1",
            "density-cp-linf",
            "density-cp-p-invariance",
            "density-cdf-linf",
            "density-routes-vs-cdf",
            "joint-survival-identity",
            "density-n2-vs-main",
        ];
        let grid = match self.exp.grid() {
            Ok(g) => g,
            Err(_) => return NAMES.iter().map(|n| CheckResult::skipped(n, "no grid block in the config")).collect(),
        };
        let law = &self.exp.law;
        let n = law.dimension();
        let cfg = &self.exp.pricer;
        let gate = self.derivative_gate(n + 1);
        let run = |r: Result<RecoveryReport, RecoveryError>| r.map_err(|e| e.to_string());

        let main = gate.is_none().then(|| run(recover_density_main(law, &grid, cfg, &self.diff)));
        let cp: Option<Result<Vec<(PNorm, RecoveryReport)>, String>> = gate.is_none().then(|| {
            self.exp
                .config
                .p_values
                .iter()
                .map(|p| run(recover_density_cp(law, &grid, *p, cfg, &self.diff, &self.limit)).map(|r| (*p, r)))
                .collect()
        });
        let cdf_gate = if !law.absolutely_continuous() {
            Some("law is not absolutely continuous".to_string())
        } else if n > 3 {
            Some(format!("the joint CDF is analytic only up to three dimensions, law has {n}"))
        } else {
            None
        };
        let cdf = cdf_gate.is_none().then(|| run(recover_density_cdf(law, &grid, cfg, &self.diff)));
        let n2_gate = if n != 2 { Some(format!("needs exactly two assets, law has {n}")) } else { gate.clone() };
        let n2 = n2_gate
            .is_none()
            .then(|| run(recover_density_n2_alternative(law, &grid, cfg, &self.diff, &self.limit)));

        let gate_reason = gate.clone().unwrap_or_default();
        let mut out = Vec::new();
        let tol = self.tol;

        // main route against the analytic density
        match &main {
            None => {
                out.push(CheckResult::skipped(NAMES[0], &gate_reason));
                out.push(CheckResult::skipped(NAMES[1], &gate_reason));
            }
            Some(Err(e)) => {
                out.push(CheckResult::failed(NAMES[0], e));
                out.push(CheckResult::failed(NAMES[1], e));
            }
            Some(Ok(r)) => match &r.oracle_comparison {
                None => {
                    out.push(CheckResult::skipped(NAMES[0], "law has no analytic density"));
                    out.push(CheckResult::skipped(NAMES[1], "law has no analytic density"));
                }
                Some(o) => {
                    out.push(CheckResult::judged(NAMES[0], o.linf, tol.density_main_linf, "grid L-infinity error".into()));
                    out.push(CheckResult::judged(NAMES[1], o.l1, tol.density_main_l1, "grid-average error".into()));
                }
            },
        }

        // cp route for every exponent, and agreement between exponents
        match &cp {
            None => {
                out.push(CheckResult::skipped(NAMES[2], &gate_reason));
                out.push(CheckResult::skipped(NAMES[3], &gate_reason));
            }
            Some(Err(e)) => {
                out.push(CheckResult::failed(NAMES[2], e));
                out.push(CheckResult::failed(NAMES[3], e));
            }
            Some(Ok(reports)) => {
                let linf: Option<Vec<f64>> =
                    reports.iter().map(|(_, r)| r.oracle_comparison.as_ref().map(|o| o.linf)).collect();
                match linf {
                    Some(v) => {
                        let per_p: Vec<String> =
                            reports.iter().zip(&v).map(|((p, _), e)| format!("p={p}: {e:.3e}")).collect();
                        let worst = v.iter().copied().fold(0.0, f64::max);
                        out.push(CheckResult::judged(NAMES[2], worst, tol.density_cp_linf, per_p.join("; ")));
                    }
                    None => out.push(CheckResult::skipped(NAMES[2], "law has no analytic density")),
                }
                let mut worst = f64::NEG_INFINITY;
                for (i, (_, a)) in reports.iter().enumerate() {
                    for (_, b) in &reports[i + 1..] {
                        worst = worst.max(excess_over_errors(&a.density_grid.points, &b.density_grid.points));
                    }
                }
                if reports.len() < 2 {
                    out.push(CheckResult::skipped(NAMES[3], "needs at least two exponents"));
                } else {
                    out.push(CheckResult::judged(
                        NAMES[3],
                        worst,
                        tol.rounding,
                        "largest pairwise gap minus the sum of error estimates".into(),
                    ));
                }
            }
        }

        // CDF reference route, and the option routes against it
        match &cdf {
            None => {
                let reason = cdf_gate.clone().unwrap_or_default();
                out.push(CheckResult::skipped(NAMES[4], &reason));
                out.push(CheckResult::skipped(NAMES[5], &reason));
            }
            Some(Err(e)) => {
                out.push(CheckResult::failed(NAMES[4], e));
                out.push(CheckResult::failed(NAMES[5], e));
            }
            Some(Ok(reference)) => {
                match &reference.oracle_comparison {
                    Some(o) => out.push(CheckResult::judged(
                        NAMES[4],
                        o.linf,
                        tol.density_cdf_linf,
                        "grid L-infinity error".into(),
                    )),
                    None => out.push(CheckResult::skipped(NAMES[4], "law has no analytic density")),
                }
                let mut grids: Vec<&RecoveryReport> = Vec::new();
                if let Some(Ok(r)) = &main {
                    grids.push(r);
                }
                if let Some(Ok(rs)) = &cp {
                    grids.extend(rs.iter().map(|(_, r)| r));
                }
                if grids.is_empty() {
                    let reason = if gate.is_some() { gate_reason.clone() } else { "option routes failed".into() };
                    out.push(CheckResult::skipped(NAMES[5], reason));
                } else {
                    let worst = grids
                        .iter()
                        .map(|r| max_gap(&r.density_grid.points, &reference.density_grid.points))
                        .fold(0.0, f64::max);
                    out.push(CheckResult::judged(
                        NAMES[5],
                        worst,
                        tol.routes_vs_cdf_linf,
                        "largest gap of the option routes to the CDF route".into(),
                    ));
                }
            }
        }

        // two-asset alternative form
        match &n2 {
            None => {
                let reason = n2_gate.unwrap_or_default();
                out.push(CheckResult::skipped(NAMES[6], &reason));
                out.push(CheckResult::skipped(NAMES[7], &reason));
            }
            Some(Err(e)) => {
                out.push(CheckResult::failed(NAMES[6], e));
                out.push(CheckResult::failed(NAMES[7], e));
            }
            Some(Ok(r)) => {
                let worst = r
                    .density_grid
                    .points
                    .iter()
                    .filter_map(|p| p.identity.map(|c| (c.directional.value - c.joint_survival).abs()))
                    .fold(0.0, f64::max);
                out.push(CheckResult::judged(
                    NAMES[6],
                    worst,
                    tol.joint_survival_identity,
                    "largest |D_(-1,-1,1) V^1(K1, K2, 0+) - Q(X1 >= K1, X2 >= K2)|".into(),
                ));
                match &main {
                    Some(Ok(m)) => out.push(CheckResult::judged(
                        NAMES[7],
                        excess_over_errors(&r.density_grid.points, &m.density_grid.points),
                        tol.rounding,
                        "largest gap to the main route minus the sum of error estimates".into(),
                    )),
                    Some(Err(e)) => out.push(CheckResult::failed(NAMES[7], e)),
                    None => out.push(CheckResult::skipped(NAMES[7], &gate_reason)),
                }
            }
        }
        out
    }

    fn breeden_litzenberger(&self) -> CheckResult {
        let name = "breeden-litzenberger-1d";
        if let Some(reason) = self.derivative_gate(2) {
            return CheckResult::skipped(name, reason);
        }
        judge(name, self.tol.breeden_litzenberger, self.breeden_litzenberger_gaps())
    }

    /// Prices `1`, `x` and a call on the first coordinate through the density
    /// recovered from that coordinate's call curve. The other strikes sit at
    /// the top of the cubature box, which adds a constant to the curve.
    fn breeden_litzenberger_gaps(&self) -> Outcome {
        let law = &self.exp.law;
        let cfg = &self.exp.pricer;
        let (lo, hi) = law.truncation_box(cfg.truncation_quantile);
        let step = PRICING_STEP_RATIO * self.diff.base_step[0];
        let spec = DiffSpec::central(vec![1], vec![step]);
        let mut cache: HashMap<u64, f64> = HashMap::new();
        let mut failure: Option<String> = None;
        let mut raw = |k: f64| -> f64 {
            if let Some(v) = cache.get(&k.to_bits()) {
                return *v;
            }
            let mut strikes = hi.clone();
            strikes[0] = k;
            let v = StrikeSpec::new(strikes, 0.0)
                .map_err(|e| e.to_string())
                .and_then(|s| price(law, &s, PNorm::ONE, cfg).map_err(|e| e.to_string()));
            let v = match v {
                Ok(v) => v.value,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            };
            cache.insert(k.to_bits(), v);
            v
        };
        let at_zero = raw(0.0);
        // nonnegative assets make the curve affine below zero
        let mut curve = |k: f64| if k < 0.0 { at_zero - cfg.discount * k } else { raw(k) };
        let strike = self.means[0];
        let call_value = curve(strike);
        let mut integrate = |f: &dyn Fn(f64) -> f64| price_by_density_1d(&mut curve, f, lo[0], hi[0], &spec);
        let results = [
            integrate(&|_| 1.0),
            integrate(&|a| a),
            integrate(&|a| (a - strike).max(0.0)),
        ];
        if let Some(e) = failure {
            return Err(e);
        }
        let targets = [cfg.discount, cfg.discount * strike, call_value];
        let mut gaps = Vec::new();
        for (r, t) in results.iter().zip(targets) {
            let r = r.as_ref().map_err(|e| e.to_string())?;
            gaps.push((r.value - t).abs());
        }
        let worst = gaps.iter().copied().fold(0.0, f64::max);
        Ok((
            worst,
            format!("mass {:.2e}, mean {:.2e}, call at the mean {:.2e}", gaps[0], gaps[1], gaps[2]),
        ))
    }
}

/// Largest `|a - b| - (err_a + err_b)` over matching points.
fn excess_over_errors(a: &[DensityPoint], b: &[DensityPoint]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.value - y.value).abs() - (x.error + y.error))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn max_gap(a: &[DensityPoint], b: &[DensityPoint]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.value - y.value).abs()).fold(0.0, f64::max)
}
