//! Latency and recall models, their fitting procedures and the alternate cost models.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-partition search time `ln n * (a * ef + b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyParams<F> {
    pub a: F,
    pub b: F,
}

impl<F: Scalar> LatencyParams<F> {
    pub fn new(a: F, b: F) -> Result<Self> {
        if !(a > F::zero()) || !b.is_finite() {
            return Err(Error::params("latency slope a must be positive and b finite"));
        }
        Ok(LatencyParams { a, b })
    }
}

/// Piecewise linear then sigmoid recall curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallParams<F> {
    pub beta: F,
    pub gamma: F,
}

impl<F: Scalar> RecallParams<F> {
    pub fn new(beta: F, gamma: F) -> Result<Self> {
        if !(beta > F::zero()) || !(gamma > F::zero() && gamma < F::one()) {
            return Err(Error::params("need beta > 0 and 0 < gamma < 1"));
        }
        Ok(RecallParams { beta, gamma })
    }

    /// Queue width where the curve switches from linear to sigmoid.
    pub fn transition(&self, sel: F, k: usize) -> F {
        self.gamma * F::from_usize_lossy(k) / sel
    }

    pub fn linear_branch(&self, ef: F, sel: F, k: usize) -> F {
        ef * sel / F::from_usize_lossy(k)
    }

    pub fn sigmoid_branch(&self, ef: F, sel: F, k: usize) -> F {
        let half = F::from_f64_lossy(0.5);
        let z = -self.beta * (sel / F::from_usize_lossy(k)) * (ef - self.transition(sel, k));
        F::one() / (F::one() + z.exp()) + (self.gamma - half)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostModel<F> {
    HnswPostFilter(LatencyParams<F>),
    Acorn { dim: F, gamma: F },
    Hybrid { latency: LatencyParams<F>, c_pred: F, c_bf: F },
}

impl<F: Scalar> CostModel<F> {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CostModel::HnswPostFilter(l) => l.a > F::zero() && l.b.is_finite(),
            CostModel::Acorn { dim, gamma } => dim > F::zero() && gamma > F::zero(),
            CostModel::Hybrid { latency, c_pred, c_bf } => {
                latency.a > F::zero() && latency.b.is_finite() && c_pred > F::zero() && c_bf > F::zero()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::params("cost model parameters must be positive"))
        }
    }

    /// Modeled cost of searching one partition of `n` documents at selectivity `sel`.
    pub fn partition_cost(&self, n: usize, ef: usize, sel: F, k: usize) -> Result<F> {
        if n == 0 {
            return Err(Error::domain("partition size must be >= 1"));
        }
        if !(sel > F::zero() && sel <= F::one()) {
            return Err(Error::domain("selectivity must lie in (0, 1]"));
        }
        Ok(self.cost_unchecked(n, ef, sel, k))
    }

    #[inline]
    pub(crate) fn cost_unchecked(&self, n: usize, ef: usize, sel: F, k: usize) -> F {
        let nf = F::from_usize_lossy(n);
        match *self {
            CostModel::HnswPostFilter(l) => nf.ln() * (l.a * F::from_usize_lossy(ef) + l.b),
            CostModel::Acorn { dim, gamma } => (dim + gamma) * (sel * nf).ln() + (F::one() / sel).ln(),
            CostModel::Hybrid { latency, c_pred, c_bf } => {
                if sel < self.hybrid_threshold(n, k).unwrap_or(F::zero()) {
                    c_pred * nf + c_bf * sel * nf
                } else {
                    nf.ln() * (latency.a * F::from_usize_lossy(k) / sel + latency.b)
                }
            }
        }
    }

    /// Selectivity at which pre-filtering and post-filtering cost the same.
    pub fn hybrid_threshold(&self, n: usize, k: usize) -> Option<F> {
        let CostModel::Hybrid { latency, c_pred, c_bf } = *self else {
            return None;
        };
        let nf = F::from_usize_lossy(n);
        let ln = nf.ln();
        let qa = c_bf * nf;
        let qb = c_pred * nf - latency.b * ln;
        let qc = -(latency.a * F::from_usize_lossy(k) * ln);
        let two = F::from_f64_lossy(2.0);
        let four = F::from_f64_lossy(4.0);
        let disc = (qb * qb - four * qa * qc).max(F::zero());
        Some((-qb + disc.sqrt()) / (two * qa))
    }
}

/// Modeled recall, clamped to `[0, 1]`.
pub fn recall_estimate<F: Scalar>(rp: &RecallParams<F>, ef: F, sel: F, k: usize) -> F {
    if !(ef > F::zero()) || !(sel > F::zero()) {
        return F::zero();
    }
    let r = if ef <= rp.transition(sel, k) {
        rp.linear_branch(ef, sel, k)
    } else {
        rp.sigmoid_branch(ef, sel, k)
    };
    r.max(F::zero()).min(F::one())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EfSolution {
    pub ef: usize,
    /// Target not reachable at or below the cap; `ef` is the cap.
    pub capped: bool,
}

/// Smallest integer queue width in `[k, cap]` whose modeled recall reaches `target`.
pub fn solve_ef_s<F: Scalar>(rp: &RecallParams<F>, target: F, sel: F, k: usize, cap: usize) -> Result<EfSolution> {
    if !(target > F::zero() && target < F::one()) {
        return Err(Error::params("recall target must lie in (0, 1)"));
    }
    if !(sel > F::zero() && sel <= F::one()) {
        return Err(Error::domain("selectivity must lie in (0, 1]"));
    }
    if k == 0 {
        return Err(Error::params("k must be >= 1"));
    }
    let lo = k;
    let hi = cap.max(k);
    let meets = |e: usize| recall_estimate(rp, F::from_usize_lossy(e), sel, k) >= target;
    if meets(lo) {
        return Ok(EfSolution { ef: lo, capped: false });
    }
    if !meets(hi) {
        return Ok(EfSolution { ef: hi, capped: true });
    }
    if target <= rp.gamma {
        let guess = (target * F::from_usize_lossy(k) / sel).ceil().to_usize().unwrap_or(hi).clamp(lo, hi);
        let mut e = guess;
        while e > lo && meets(e - 1) {
            e -= 1;
        }
        while !meets(e) {
            e += 1;
        }
        return Ok(EfSolution { ef: e, capped: false });
    }
    let (mut bad, mut good) = (lo, hi);
    while good - bad > 1 {
        let mid = bad + (good - bad) / 2;
        if meets(mid) {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(EfSolution { ef: good, capped: false })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencySample<F> {
    pub partition_size: usize,
    pub ef_s: F,
    pub seconds: F,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyFit<F> {
    pub params: LatencyParams<F>,
    pub r_squared: F,
}

/// Least-squares line through `(ef, seconds / ln size)`.
pub fn fit_latency<F: Scalar>(samples: &[LatencySample<F>]) -> Result<LatencyFit<F>> {
    let pts: Vec<(F, F)> = samples
        .iter()
        .map(|s| {
            if s.partition_size < 2 {
                return Err(Error::domain("partition size must be >= 2 to normalize by ln n"));
            }
            Ok((s.ef_s, s.seconds / F::from_usize_lossy(s.partition_size).ln()))
        })
        .collect::<Result<_>>()?;
    let n = F::from_usize_lossy(pts.len());
    if pts.len() < 2 {
        return Err(Error::domain("need at least two samples"));
    }
    let mx = pts.iter().map(|p| p.0).sum::<F>() / n;
    let my = pts.iter().map(|p| p.1).sum::<F>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<F>();
    if !(sxx > F::zero()) {
        return Err(Error::domain("need at least two distinct ef_s values"));
    }
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<F>();
    let a = sxy / sxx;
    let b = my - a * mx;
    let scale = my.abs().max(F::min_positive_value());
    if !(a * mx.abs() > scale * F::from_f64_lossy(1e-9)) {
        return Err(Error::domain("fitted slope is not positive; time does not grow with ef_s"));
    }
    let ss_tot = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum::<F>();
    let ss_res = pts.iter().map(|p| (p.1 - (a * p.0 + b)).powi(2)).sum::<F>();
    let r_squared = if ss_tot > F::zero() { F::one() - ss_res / ss_tot } else { F::one() };
    Ok(LatencyFit { params: LatencyParams { a, b }, r_squared })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallSample<F> {
    pub ef_s: F,
    pub selectivity: F,
    pub k: usize,
    pub recall: F,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallFit<F> {
    pub params: RecallParams<F>,
    pub rmse: F,
}

pub fn recall_rmse<F: Scalar>(rp: &RecallParams<F>, samples: &[RecallSample<F>]) -> F {
    if samples.is_empty() {
        return F::zero();
    }
    let sse = samples
        .iter()
        .map(|s| (recall_estimate(rp, s.ef_s, s.selectivity, s.k) - s.recall).powi(2))
        .sum::<F>();
    (sse / F::from_usize_lossy(samples.len())).sqrt()
}

/// Some setting shows a plateau: recall of at least 0.5 that gains under 0.02 while ef_s at least doubles.
fn saturated<F: Scalar>(samples: &[RecallSample<F>]) -> bool {
    let f = F::from_f64_lossy;
    samples.iter().any(|hi| {
        hi.recall >= f(0.5)
            && samples.iter().any(|lo| {
                lo.k == hi.k
                    && lo.selectivity == hi.selectivity
                    && hi.ef_s >= f(2.0) * lo.ef_s
                    && lo.recall >= f(0.5)
                    && hi.recall - lo.recall < f(0.02)
            })
    })
}

/// 50x50 grid over `beta in (0, 5]`, `gamma in (0, 1)`, then 20 coordinate-descent steps.
pub fn fit_recall<F: Scalar>(samples: &[RecallSample<F>]) -> Result<RecallFit<F>> {
    if samples.is_empty() {
        return Err(Error::domain("no recall samples"));
    }
    if !saturated(samples) {
        return Err(Error::domain("no saturation observed; extend the ef_s range"));
    }
    let f = F::from_f64_lossy;
    let loss = |beta: F, gamma: F| recall_rmse(&RecallParams { beta, gamma }, samples);
    let (mut beta, mut gamma, mut best) = (f(0.1), f(0.5), F::infinity());
    for i in 1..=50 {
        let b = f(5.0 * i as f64 / 50.0);
        for j in 1..=50 {
            let g = f(j as f64 / 51.0);
            let l = loss(b, g);
            if l < best {
                (beta, gamma, best) = (b, g, l);
            }
        }
    }
    let (mut hb, mut hg) = (f(0.1), f(1.0 / 51.0));
    let (gmin, gmax, bmin) = (f(1e-6), f(1.0 - 1e-6), f(1e-6));
    for _ in 0..20 {
        let mut moved = false;
        for (db, dg) in [(hb, F::zero()), (-hb, F::zero()), (F::zero(), hg), (F::zero(), -hg)] {
            let nb = (beta + db).max(bmin);
            let ng = (gamma + dg).max(gmin).min(gmax);
            let l = loss(nb, ng);
            if l < best {
                (beta, gamma, best) = (nb, ng, l);
                moved = true;
            }
        }
        if !moved {
            hb = hb * f(0.5);
            hg = hg * f(0.5);
        }
    }
    Ok(RecallFit { params: RecallParams { beta, gamma }, rmse: best })
}

/// Fitted parameters persisted as `key=value` lines.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelParams<F> {
    pub latency: Option<LatencyParams<F>>,
    pub recall: Option<RecallParams<F>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(l) = self.latency {
            let _ = writeln!(out, "a={:e}\nb={:e}", l.a.to_f64_lossy(), l.b.to_f64_lossy());
        }
        if let Some(r) = self.recall {
            let _ = writeln!(out, "beta={}\ngamma={}", r.beta.to_f64_lossy(), r.gamma.to_f64_lossy());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vals: [Option<F>; 4] = [None; 4];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(ln + 1, "expected key=value"))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::parse(ln + 1, format!("bad number {v}")))?;
            let slot = match k.trim() {
                "a" => 0,
                "b" => 1,
                "beta" => 2,
                "gamma" => 3,
                other => return Err(Error::parse(ln + 1, format!("unknown key {other}"))),
            };
            vals[slot] = Some(F::from_f64_lossy(v));
        }
        let latency = match (vals[0], vals[1]) {
            (Some(a), Some(b)) => Some(LatencyParams::new(a, b)?),
            (None, None) => None,
            _ => return Err(Error::parse(0, "a and b must appear together")),
        };
        let recall = match (vals[2], vals[3]) {
            (Some(beta), Some(gamma)) => Some(RecallParams::new(beta, gamma)?),
            (None, None) => None,
            _ => return Err(Error::parse(0, "beta and gamma must appear together")),
        };
        Ok(ModelParams { latency, recall })
    }
}
