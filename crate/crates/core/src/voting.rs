//! Vote-precision mixture model, per-τ-bin place probability tables and
//! the running place posterior.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::descriptors::VoteMatch;

/// Floor applied before taking logs of table entries.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum VotingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no τ bin has the required {min} samples")]
    InsufficientSamples { min: usize },
    #[error("τ bin {0} has no fitted parameters")]
    UnfittedBin(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("precision model line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn check_params(sigma: f64, lambda: f64, d_max: f64) -> Result<(), VotingError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(VotingError::InvalidParameter(format!("sigma = {sigma}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(VotingError::InvalidParameter(format!("lambda = {lambda}")));
    }
    if !(d_max > 0.0) || !d_max.is_finite() {
        return Err(VotingError::InvalidParameter(format!("d_max = {d_max}")));
    }
    Ok(())
}

/// Half-normal plus uniform density at distance `d`.
pub fn mixture_pdf(d: f64, sigma: f64, lambda: f64, d_max: f64) -> Result<f64, VotingError> {
    check_params(sigma, lambda, d_max)?;
    if !(d >= 0.0) {
        return Err(VotingError::InvalidParameter(format!("d = {d}")));
    }
    Ok(pdf_unchecked(d, sigma, lambda, d_max))
}

#[inline]
fn pdf_unchecked(d: f64, sigma: f64, lambda: f64, d_max: f64) -> f64 {
    let half_normal = (2.0f64).sqrt() / (sigma * std::f64::consts::PI.sqrt()) * (-(d * d) / (2.0 * sigma * sigma)).exp();
    lambda * half_normal + (1.0 - lambda) / d_max
}

/// Integral of [`mixture_pdf`] over `[0, d]`, with the uniform part
/// saturating at `d_max`.
pub fn mixture_cdf(d: f64, sigma: f64, lambda: f64, d_max: f64) -> Result<f64, VotingError> {
    check_params(sigma, lambda, d_max)?;
    if !(d >= 0.0) {
        return Err(VotingError::InvalidParameter(format!("d = {d}")));
    }
    Ok(lambda * half_normal_cdf(d, sigma) + (1.0 - lambda) * (d.min(d_max) / d_max))
}

#[inline]
fn half_normal_cdf(d: f64, sigma: f64) -> f64 {
    libm::erf(d / (sigma * std::f64::consts::SQRT_2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VotingParams {
    pub batch_size: usize,
    /// Posterior threshold ξ_v that triggers verification.
    pub xi: f64,
    pub k_candidates: usize,
    pub tau_edges: Vec<f64>,
    pub min_bin_samples: usize,
}

impl Default for VotingParams {
    fn default() -> Self {
        Self {
            batch_size: 16,
            xi: 0.15,
            k_candidates: 5,
            tau_edges: default_tau_edges(),
            min_bin_samples: 30,
        }
    }
}

/// Default τ bin edges: `[0, 0.5]` then five equal bins up to 1.
pub fn default_tau_edges() -> Vec<f64> {
    vec![0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinFit {
    pub sigma: f64,
    pub lambda: f64,
    pub n_samples: usize,
    /// Sum of squared CDF residuals at the optimum.
    pub residual: f64,
    /// False when the bin borrowed its parameters from a neighbour.
    pub fitted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionModel {
    pub tau_edges: Vec<f64>,
    pub d_max: f64,
    pub bins: Vec<BinFit>,
}

impl PrecisionModel {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    /// Bin index for `tau`: the first bin whose upper edge is ≥ `tau`.
    pub fn bin_of(&self, tau: f64) -> usize {
        bin_index(&self.tau_edges, tau)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# tau_bins {} {}", self.bins.len(), self.d_max);
        for (b, fit) in self.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                self.tau_edges[b],
                self.tau_edges[b + 1],
                fit.sigma,
                fit.lambda,
                fit.n_samples
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, VotingError> {
        let mut header: Option<(usize, f64)> = None;
        let mut edges = Vec::new();
        let mut bins = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let t = line.trim();
            let perr = |msg: &str| VotingError::Parse {
                line: lineno,
                msg: msg.to_string(),
            };
            if t.is_empty() {
                continue;
            }
            if let Some(c) = t.strip_prefix('#') {
                let f: Vec<&str> = c.split_whitespace().collect();
                if f.len() == 3 && f[0] == "tau_bins" {
                    let n = f[1].parse().map_err(|_| perr("bad bin count"))?;
                    let d = f[2].parse().map_err(|_| perr("bad d_max"))?;
                    header = Some((n, d));
                }
                continue;
            }
            if header.is_none() {
                return Err(perr("missing '# tau_bins n d_max' header"));
            }
            let f: Vec<f64> = t
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| perr("non-numeric field"))?;
            if f.len() != 5 {
                return Err(perr("expected 'tau_lo tau_hi sigma lambda n_samples'"));
            }
            if edges.is_empty() {
                edges.push(f[0]);
            } else if *edges.last().unwrap() != f[0] {
                return Err(perr("bins are not contiguous"));
            }
            edges.push(f[1]);
            check_params(f[2], f[3], header.unwrap().1).map_err(|e| perr(&e.to_string()))?;
            bins.push(BinFit {
                sigma: f[2],
                lambda: f[3],
                n_samples: f[4] as usize,
                residual: 0.0,
                fitted: true,
            });
        }
        let (n, d_max) = header.ok_or(VotingError::Parse {
            line: 0,
            msg: "missing header".into(),
        })?;
        if bins.len() != n {
            return Err(VotingError::Parse {
                line: 0,
                msg: format!("header declares {n} bins, found {}", bins.len()),
            });
        }
        Ok(Self {
            tau_edges: edges,
            d_max,
            bins,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), VotingError> {
        fs::write(path, self.to_text()).map_err(|source| VotingError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VotingError> {
        let text = fs::read_to_string(path).map_err(|source| VotingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

fn bin_index(edges: &[f64], tau: f64) -> usize {
    let nb = edges.len() - 1;
    (1..=nb).find(|&k| tau <= edges[k]).map_or(nb - 1, |k| k - 1)
}

/// Least-squares fit of the mixture CDF to the empirical CDF of
/// `distances`. For fixed σ the model is linear in λ, so λ is solved in
/// closed form (clamped to `[0, 1]`) and only σ is searched: a log grid
/// over `[0.1, d_max]` followed by golden-section refinement.
pub fn fit_mixture(distances: &[f64], d_max: f64) -> Result<(f64, f64, f64), VotingError> {
    if distances.is_empty() {
        return Err(VotingError::InsufficientSamples { min: 1 });
    }
    if !(d_max > 0.1) {
        return Err(VotingError::InvalidParameter(format!("d_max = {d_max}")));
    }
    let mut sorted: Vec<f64> = distances.iter().map(|d| d.clamp(0.0, d_max)).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let ecdf = |x: f64| sorted.partition_point(|&v| v <= x) as f64 / n;
    let mut xs: Vec<f64> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if i + 1 == sorted.len() || sorted[i + 1] != v {
            xs.push(v);
        }
    }
    xs.extend((1..=256).map(|k| d_max * k as f64 / 256.0));
    let pts: Vec<(f64, f64, f64)> = xs.iter().map(|&x| (x, ecdf(x), x / d_max)).collect();

    let solve = |sigma: f64| -> (f64, f64) {
        let (mut num, mut den) = (0.0, 0.0);
        for &(x, f, u) in &pts {
            let a = half_normal_cdf(x, sigma) - u;
            num += a * (f - u);
            den += a * a;
        }
        let lambda = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
        let mut sse = 0.0;
        for &(x, f, u) in &pts {
            let m = lambda * half_normal_cdf(x, sigma) + (1.0 - lambda) * u;
            sse += (m - f) * (m - f);
        }
        (lambda, sse)
    };

    let (lo, hi) = (0.1f64.ln(), d_max.ln());
    let steps = 120;
    let grid: Vec<f64> = (0..=steps).map(|k| lo + (hi - lo) * k as f64 / steps as f64).collect();
    let errs: Vec<f64> = grid.iter().map(|&ls| solve(ls.exp()).1).collect();
    let best = (0..grid.len()).min_by(|&a, &b| errs[a].total_cmp(&errs[b])).unwrap();
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(steps)];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (solve(c.exp()).1, solve(d.exp()).1);
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = solve(c.exp()).1;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = solve(d.exp()).1;
        }
    }
    let mut sigma = ((a + b) / 2.0).exp();
    let (mut lambda, mut sse) = solve(sigma);
    if errs[best] < sse {
        sigma = grid[best].exp();
        (lambda, sse) = solve(sigma);
    }
    Ok((sigma.clamp(0.1, d_max), lambda, sse))
}

/// Fits one mixture per τ bin from `(τ, distance to ground truth)` votes.
/// Bins with fewer than `min_samples` votes copy the nearest fitted bin.
pub fn fit_precision_model(
    votes: &[(f64, f64)],
    tau_edges: &[f64],
    d_max: f64,
    min_samples: usize,
) -> Result<PrecisionModel, VotingError> {
    if tau_edges.len() < 2 || tau_edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(VotingError::InvalidParameter("τ bin edges must increase".into()));
    }
    let nb = tau_edges.len() - 1;
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); nb];
    for &(tau, d) in votes {
        per_bin[bin_index(tau_edges, tau)].push(d);
    }
    let mut fits: Vec<Option<BinFit>> = Vec::with_capacity(nb);
    for samples in &per_bin {
        if samples.len() >= min_samples.max(1) {
            let (sigma, lambda, residual) = fit_mixture(samples, d_max)?;
            fits.push(Some(BinFit {
                sigma,
                lambda,
                n_samples: samples.len(),
                residual,
                fitted: true,
            }));
        } else {
            fits.push(None);
        }
    }
    if fits.iter().all(Option::is_none) {
        return Err(VotingError::InsufficientSamples { min: min_samples });
    }
    let mut bins = Vec::with_capacity(nb);
    for b in 0..nb {
        match &fits[b] {
            Some(f) => bins.push(f.clone()),
            None => {
                // nearest fitted bin, lower τ first on ties
                let src = (1..nb)
                    .flat_map(|k| [b.checked_sub(k), (b + k < nb).then_some(b + k)])
                    .flatten()
                    .find(|&k| fits[k].is_some())
                    .expect("at least one bin is fitted");
                let f = fits[src].as_ref().unwrap();
                bins.push(BinFit {
                    n_samples: per_bin[b].len(),
                    fitted: false,
                    ..f.clone()
                });
            }
        }
    }
    Ok(PrecisionModel {
        tau_edges: tau_edges.to_vec(),
        d_max,
        bins,
    })
}

/// Per-τ-bin N×N row-stochastic tables, stored with their logs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTable {
    pub num_places: usize,
    pub tau_edges: Vec<f64>,
    /// `tables[b][v * n + i]` = P(place i | vote for place v in bin b).
    pub tables: Vec<Vec<f64>>,
    pub log_tables: Vec<Vec<f64>>,
}

impl ProbabilityTable {
    pub fn row(&self, bin: usize, v: usize) -> &[f64] {
        &self.tables[bin][v * self.num_places..(v + 1) * self.num_places]
    }

    pub fn log_row(&self, bin: usize, v: usize) -> &[f64] {
        &self.log_tables[bin][v * self.num_places..(v + 1) * self.num_places]
    }
}

/// Builds `T_b[v][i] ∝ pdf(d(v, i)) · mean_count / count_i`, row-normalized.
/// `center_distances` is row-major N×N.
pub fn build_probability_table(
    model: &PrecisionModel,
    center_distances: &[f64],
    keypoint_counts: &[usize],
) -> Result<ProbabilityTable, VotingError> {
    let n = keypoint_counts.len();
    if center_distances.len() != n * n {
        return Err(VotingError::DimensionMismatch {
            expected: n * n,
            found: center_distances.len(),
        });
    }
    if n == 0 {
        return Err(VotingError::InvalidParameter("database has no places".into()));
    }
    let mean = keypoint_counts.iter().sum::<usize>() as f64 / n as f64;
    let density: Vec<f64> = keypoint_counts
        .iter()
        .map(|&c| if mean > 0.0 { mean / c.max(1) as f64 } else { 1.0 })
        .collect();
    let mut tables = Vec::with_capacity(model.bins.len());
    let mut log_tables = Vec::with_capacity(model.bins.len());
    for (b, fit) in model.bins.iter().enumerate() {
        check_params(fit.sigma, fit.lambda, model.d_max).map_err(|_| VotingError::UnfittedBin(b))?;
        let peak = pdf_unchecked(0.0, fit.sigma, fit.lambda, model.d_max);
        let mut t = vec![0.0; n * n];
        for v in 0..n {
            let row = &mut t[v * n..(v + 1) * n];
            let mut sum = 0.0;
            for (i, e) in row.iter_mut().enumerate() {
                // relative to the peak so a pure uniform yields exact ones
                let rel = pdf_unchecked(center_distances[v * n + i], fit.sigma, fit.lambda, model.d_max) / peak;
                *e = rel * density[i];
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        log_tables.push(t.iter().map(|&x| x.max(LOG_FLOOR).ln()).collect());
        tables.push(t);
    }
    Ok(ProbabilityTable {
        num_places: n,
        tau_edges: model.tau_edges.clone(),
        tables,
        log_tables,
    })
}

/// Unnormalized log posterior over places.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacePosterior {
    pub log_weights: Vec<f64>,
    pub votes_consumed: usize,
}

impl PlacePosterior {
    pub fn uniform(n: usize) -> Self {
        Self {
            log_weights: vec![0.0; n],
            votes_consumed: 0,
        }
    }

    /// Normalized probabilities (log-sum-exp).
    pub fn probabilities(&self) -> Vec<f64> {
        let m = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.log_weights.iter().map(|w| (w - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect()
    }

    /// Places sorted by descending posterior, ties by lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.log_weights.len()).collect();
        idx.sort_by(|&a, &b| self.log_weights[b].total_cmp(&self.log_weights[a]).then(a.cmp(&b)));
        idx
    }
}

/// Adds the log table rows selected by each vote.
pub fn update_posterior(post: &mut PlacePosterior, votes: &[VoteMatch], table: &ProbabilityTable) -> Result<(), VotingError> {
    if post.log_weights.len() != table.num_places {
        return Err(VotingError::DimensionMismatch {
            expected: table.num_places,
            found: post.log_weights.len(),
        });
    }
    for vote in votes {
        if vote.place >= table.num_places {
            return Err(VotingError::DimensionMismatch {
                expected: table.num_places,
                found: vote.place + 1,
            });
        }
        let bin = bin_index(&table.tau_edges, vote.tau);
        for (w, l) in post.log_weights.iter_mut().zip(table.log_row(bin, vote.place)) {
            *w += l;
        }
        post.votes_consumed += 1;
    }
    // keep the weights near zero; the normalized posterior is unchanged
    let m = post.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_finite() {
        for w in &mut post.log_weights {
            *w -= m;
        }
    }
    Ok(())
}
