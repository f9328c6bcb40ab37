//! Unsupervised per-beam intensity calibration and intensity rescaling.
//!
//! The fit alternates two averaging steps over voxels seen by more than
//! one beam: a voxel's true-intensity estimate is the mean of its members'
//! mapped values, and each table entry `g_l(a)` becomes the mean estimate
//! of the voxels where beam `l` measured `a`. Both steps minimise the same
//! within-voxel squared spread, so the objective never increases.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::cloud::{voxel_key, Scan, NUM_BEAMS};

/// Raw values at or above this are retro-reflective and map to 1.0.
pub const RETRO_REFLECTIVE_RAW: u8 = 100;
pub const DEFAULT_MAX_CALIB_RANGE: f64 = 30.0;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("no voxel is observed by two or more beams")]
    NoCrossBeamOverlap,
    #[error("beam id {beam} outside calibration table of {num_beams} beams")]
    BeamIdOutOfRange { beam: u8, num_beams: usize },
    #[error("invalid calibration parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("calibration file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Per-beam lookup `g_l`: measured value (0-255) to expected true intensity
/// on the same 0-255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    pub num_beams: usize,
    pub max_calib_range: f64,
    pub mapping: Vec<[f64; 256]>,
}

impl CalibrationTable {
    pub fn identity(num_beams: usize, max_calib_range: f64) -> Self {
        let mut row = [0.0; 256];
        for (a, v) in row.iter_mut().enumerate() {
            *v = a as f64;
        }
        Self {
            num_beams,
            max_calib_range,
            mapping: vec![row; num_beams],
        }
    }

    #[inline]
    pub fn lookup(&self, beam: u8, raw: u8) -> f64 {
        self.mapping[beam as usize][raw as usize]
    }

    /// Rescaled `[0, 1]` intensity for one measurement.
    pub fn rescale(&self, beam: u8, raw: u8, range: f64) -> Result<(f64, bool), CalibError> {
        if beam as usize >= self.num_beams {
            return Err(CalibError::BeamIdOutOfRange {
                beam,
                num_beams: self.num_beams,
            });
        }
        if range > self.max_calib_range {
            return Ok(((raw.min(RETRO_REFLECTIVE_RAW) as f64) / 100.0, true));
        }
        if raw >= RETRO_REFLECTIVE_RAW {
            return Ok((1.0, false));
        }
        let g = self.lookup(beam, raw).clamp(0.0, 100.0);
        Ok((g / 100.0, false))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.num_beams * 256 * 16);
        let _ = writeln!(out, "# beams {} range_max {}", self.num_beams, self.max_calib_range);
        for (beam, row) in self.mapping.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{beam} {a} {v}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CalibError> {
        let mut header: Option<(usize, f64)> = None;
        let mut table: Option<CalibrationTable> = None;
        let mut seen: Vec<[bool; 256]> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let perr = |msg: String| CalibError::Parse { line: lineno, msg };
            if let Some(c) = t.strip_prefix('#') {
                let f: Vec<&str> = c.split_whitespace().collect();
                if f.len() == 4 && f[0] == "beams" && f[2] == "range_max" {
                    let beams: usize = f[1].parse().map_err(|_| perr("bad beam count".into()))?;
                    let range: f64 = f[3].parse().map_err(|_| perr("bad range".into()))?;
                    header = Some((beams, range));
                    let mut tbl = CalibrationTable::identity(beams, range);
                    for row in &mut tbl.mapping {
                        row.fill(f64::NAN);
                    }
                    table = Some(tbl);
                    seen = vec![[false; 256]; beams];
                }
                continue;
            }
            let tbl = table
                .as_mut()
                .ok_or_else(|| perr("entry before '# beams N range_max R' header".into()))?;
            let f: Vec<&str> = t.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(format!("expected 3 fields, found {}", f.len())));
            }
            let beam: usize = f[0].parse().map_err(|_| perr(format!("bad beam '{}'", f[0])))?;
            let a: usize = f[1].parse().map_err(|_| perr(format!("bad measured value '{}'", f[1])))?;
            let v: f64 = f[2].parse().map_err(|_| perr(format!("bad expected value '{}'", f[2])))?;
            if beam >= tbl.num_beams || a > 255 {
                return Err(perr(format!("entry ({beam}, {a}) out of range")));
            }
            tbl.mapping[beam][a] = v;
            seen[beam][a] = true;
        }
        let (beams, _) = header.ok_or(CalibError::Parse {
            line: 0,
            msg: "missing header".into(),
        })?;
        if seen.iter().any(|row| row.iter().any(|s| !s)) {
            return Err(CalibError::Parse {
                line: 0,
                msg: format!("table for {beams} beams is incomplete"),
            });
        }
        Ok(table.unwrap())
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        fs::write(path, self.to_text()).map_err(|source| CalibError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let text = fs::read_to_string(path).map_err(|source| CalibError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationParams {
    pub num_beams: usize,
    pub voxel_size: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub max_calib_range: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            num_beams: NUM_BEAMS,
            voxel_size: 0.25,
            max_iter: 50,
            tol: 1e-6,
            max_calib_range: DEFAULT_MAX_CALIB_RANGE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationFit {
    pub table: CalibrationTable,
    /// `observed[l][a]`: beam `l` measured `a` inside a shared voxel.
    pub observed: Vec<[bool; 256]>,
    pub iterations: usize,
    /// False when `max_iter` ran out first (the last iterate is returned).
    pub converged: bool,
    /// Within-voxel squared spread after each iteration.
    pub objective: Vec<f64>,
    pub shared_voxels: usize,
}

/// Fits per-beam tables from scans already registered in one frame.
pub fn fit_calibration(scans: &[Scan], params: &CalibrationParams) -> Result<CalibrationFit, CalibError> {
    if !(params.voxel_size > 0.0) {
        return Err(CalibError::InvalidParameter("voxel_size must be positive".into()));
    }
    let nb = params.num_beams;
    let mut voxel_ids: FxHashMap<(i64, i64, i64), u32> = FxHashMap::default();
    let mut obs: Vec<(u32, u16)> = Vec::new();
    for scan in scans {
        for p in &scan.points {
            if p.range > params.max_calib_range {
                continue;
            }
            if p.beam_id as usize >= nb {
                return Err(CalibError::BeamIdOutOfRange {
                    beam: p.beam_id,
                    num_beams: nb,
                });
            }
            let key = voxel_key(&p.position, params.voxel_size);
            let next = voxel_ids.len() as u32;
            let v = *voxel_ids.entry(key).or_insert(next);
            obs.push((v, p.beam_id as u16 * 256 + p.raw_intensity as u16));
        }
    }
    drop(voxel_ids);
    obs.sort_unstable();

    // run-length encode into (voxel, node, count), then keep multi-beam voxels
    let mut entries: Vec<(u16, u32)> = Vec::new();
    let mut voxel_ptr: Vec<usize> = vec![0];
    let mut i = 0;
    while i < obs.len() {
        let v = obs[i].0;
        let start = entries.len();
        while i < obs.len() && obs[i].0 == v {
            let node = obs[i].1;
            let mut count = 0u32;
            while i < obs.len() && obs[i] == (v, node) {
                count += 1;
                i += 1;
            }
            entries.push((node, count));
        }
        let first_beam = entries[start].0 / 256;
        if entries[start..].iter().any(|(n, _)| n / 256 != first_beam) {
            voxel_ptr.push(entries.len());
        } else {
            entries.truncate(start);
        }
    }
    drop(obs);
    let shared_voxels = voxel_ptr.len() - 1;
    if shared_voxels == 0 {
        return Err(CalibError::NoCrossBeamOverlap);
    }

    let num_nodes = nb * 256;
    let mut weight = vec![0.0f64; num_nodes];
    for &(node, c) in &entries {
        weight[node as usize] += c as f64;
    }
    let mut g: Vec<f64> = (0..num_nodes).map(|n| (n % 256) as f64).collect();
    let mut mu = vec![0.0f64; shared_voxels];
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut acc = vec![0.0f64; num_nodes];

    for _ in 0..params.max_iter {
        iterations += 1;
        update_voxel_means(&entries, &voxel_ptr, &g, &mut mu);
        acc.fill(0.0);
        for v in 0..shared_voxels {
            for &(node, c) in &entries[voxel_ptr[v]..voxel_ptr[v + 1]] {
                acc[node as usize] += c as f64 * mu[v];
            }
        }
        let before = on_raw_scale(&g, &weight);
        for n in 0..num_nodes {
            if weight[n] > 0.0 {
                g[n] = acc[n] / weight[n];
            }
        }
        // change is measured after mapping back to the raw scale: the
        // averaging steps also shrink the whole table towards a constant,
        // and that common drift carries no information
        let after = on_raw_scale(&g, &weight);
        let max_change = before
            .iter()
            .zip(&after)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        update_voxel_means(&entries, &voxel_ptr, &g, &mut mu);
        objective.push(within_voxel_spread(&entries, &voxel_ptr, &g, &mu));
        if max_change < params.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("intensity calibration did not converge in {} iterations", params.max_iter);
    }

    let g = on_raw_scale(&g, &weight);
    let mut table = CalibrationTable::identity(nb, params.max_calib_range);
    let mut observed = vec![[false; 256]; nb];
    for beam in 0..nb {
        let base = beam * 256;
        let pts: Vec<(usize, f64, f64)> = (0..256)
            .filter(|&a| weight[base + a] > 0.0)
            .map(|a| (a, g[base + a], weight[base + a]))
            .collect();
        for &(a, _, _) in &pts {
            observed[beam][a] = true;
        }
        if pts.is_empty() {
            continue;
        }
        let fitted = isotonic_regression(&pts.iter().map(|p| (p.1, p.2)).collect::<Vec<_>>());
        let knots: Vec<(usize, f64)> = pts.iter().zip(fitted).map(|(p, v)| (p.0, v)).collect();
        table.mapping[beam] = interpolate_table(&knots);
    }
    Ok(CalibrationFit {
        table,
        observed,
        iterations,
        converged,
        objective,
        shared_voxels,
    })
}

/// Common affine map of `g` that best reproduces the raw values in least
/// squares (weighted by observation counts). It fixes the overall gauge
/// without affecting cross-beam agreement.
fn on_raw_scale(g: &[f64], weight: &[f64]) -> Vec<f64> {
    let (mut sw, mut sg, mut sa) = (0.0, 0.0, 0.0);
    for (n, (&gv, &w)) in g.iter().zip(weight).enumerate() {
        if w > 0.0 {
            sw += w;
            sg += w * gv;
            sa += w * (n % 256) as f64;
        }
    }
    let (mg, ma) = (sg / sw, sa / sw);
    let (mut cov, mut var) = (0.0, 0.0);
    for (n, (&gv, &w)) in g.iter().zip(weight).enumerate() {
        if w > 0.0 {
            cov += w * (gv - mg) * ((n % 256) as f64 - ma);
            var += w * (gv - mg) * (gv - mg);
        }
    }
    let alpha = if var > 0.0 && cov > 0.0 { cov / var } else { 1.0 };
    let beta = ma - alpha * mg;
    g.iter()
        .zip(weight)
        .map(|(&gv, &w)| if w > 0.0 { alpha * gv + beta } else { gv })
        .collect()
}

fn update_voxel_means(entries: &[(u16, u32)], voxel_ptr: &[usize], g: &[f64], mu: &mut [f64]) {
    for (v, m) in mu.iter_mut().enumerate() {
        let (mut s, mut w) = (0.0, 0.0);
        for &(node, c) in &entries[voxel_ptr[v]..voxel_ptr[v + 1]] {
            s += c as f64 * g[node as usize];
            w += c as f64;
        }
        *m = s / w;
    }
}

fn within_voxel_spread(entries: &[(u16, u32)], voxel_ptr: &[usize], g: &[f64], mu: &[f64]) -> f64 {
    let mut total = 0.0;
    for (v, m) in mu.iter().enumerate() {
        for &(node, c) in &entries[voxel_ptr[v]..voxel_ptr[v + 1]] {
            let d = g[node as usize] - m;
            total += c as f64 * d * d;
        }
    }
    total
}

/// Weighted pool-adjacent-violators: the non-decreasing sequence closest
/// to `values` in weighted least squares.
pub fn isotonic_regression(values: &[(f64, f64)]) -> Vec<f64> {
    // blocks of (mean, weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for &(v, w) in values {
        blocks.push((v, w, 1));
        while blocks.len() >= 2 {
            let n = blocks.len();
            if blocks[n - 2].0 <= blocks[n - 1].0 {
                break;
            }
            let (m2, w2, l2) = blocks.pop().unwrap();
            let (m1, w1, l1) = blocks.pop().unwrap();
            let w = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / w, w, l1 + l2));
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (m, _, l) in blocks {
        out.extend(std::iter::repeat(m).take(l));
    }
    out
}

/// Fills a 256-entry table from sorted knots: linear between knots, flat
/// beyond the first and last.
fn interpolate_table(knots: &[(usize, f64)]) -> [f64; 256] {
    let mut row = [0.0; 256];
    let mut k = 0;
    for (a, slot) in row.iter_mut().enumerate() {
        while k + 1 < knots.len() && knots[k + 1].0 <= a {
            k += 1;
        }
        let v = if a <= knots[0].0 {
            knots[0].1
        } else if k + 1 >= knots.len() {
            knots[knots.len() - 1].1
        } else if knots[k].0 == a {
            knots[k].1
        } else {
            let (a0, v0) = knots[k];
            let (a1, v1) = knots[k + 1];
            v0 + (v1 - v0) * (a - a0) as f64 / (a1 - a0) as f64
        };
        *slot = v.clamp(0.0, 255.0);
    }
    row
}

/// Sets `calibrated_intensity` on every point.
pub fn apply_calibration(scan: &Scan, table: &CalibrationTable) -> Result<Scan, CalibError> {
    let mut out = scan.clone();
    for p in &mut out.points {
        let (v, unc) = table.rescale(p.beam_id, p.raw_intensity, p.range)?;
        p.calibrated_intensity = Some(v);
        p.uncalibrated = unc;
    }
    Ok(out)
}

/// Mean over shared voxels of the variance, across beams, of each beam's
/// mean mapped intensity. Used to measure cross-beam disagreement before
/// and after calibration.
pub fn cross_beam_variance<F>(scans: &[Scan], voxel_size: f64, max_range: f64, map: F) -> Option<f64>
where
    F: Fn(u8, u8) -> f64,
{
    let mut per_voxel: FxHashMap<(i64, i64, i64), FxHashMap<u8, (f64, u32)>> = FxHashMap::default();
    for scan in scans {
        for p in scan.points.iter().filter(|p| p.range <= max_range) {
            let e = per_voxel
                .entry(voxel_key(&p.position, voxel_size))
                .or_default()
                .entry(p.beam_id)
                .or_insert((0.0, 0));
            e.0 += map(p.beam_id, p.raw_intensity);
            e.1 += 1;
        }
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for beams in per_voxel.values() {
        if beams.len() < 2 {
            continue;
        }
        let means: Vec<f64> = beams.values().map(|(s, c)| s / *c as f64).collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        total += means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64;
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use crate::geometry::Vec3;

    fn pt(x: f64, y: f64, raw: u8, beam: u8) -> Point {
        Point::new(Vec3::new(x, y, 0.0), raw, beam, 0.0)
    }

    #[test]
    fn rescale_rules() {
        let t = CalibrationTable::identity(16, 30.0);
        assert_eq!(t.rescale(0, 100, 5.0).unwrap(), (1.0, false));
        assert_eq!(t.rescale(0, 255, 5.0).unwrap(), (1.0, false));
        assert_eq!(t.rescale(0, 50, 5.0).unwrap(), (0.5, false));
        assert_eq!(t.rescale(0, 50, 35.0).unwrap(), (0.5, true));
        assert_eq!(t.rescale(0, 180, 35.0).unwrap(), (1.0, true));
        assert!(matches!(t.rescale(16, 50, 5.0), Err(CalibError::BeamIdOutOfRange { .. })));
    }

    #[test]
    fn isotonic_pools_violators() {
        let out = isotonic_regression(&[(1.0, 1.0), (3.0, 1.0), (2.0, 1.0), (4.0, 2.0)]);
        assert_eq!(out, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn interpolation_is_linear_and_flat_at_ends() {
        let row = interpolate_table(&[(10, 20.0), (20, 40.0)]);
        assert_eq!(row[0], 20.0);
        assert_eq!(row[15], 30.0);
        assert_eq!(row[255], 40.0);
    }

    #[test]
    fn single_beam_has_no_overlap() {
        let scan = Scan::new("s", Vec3::zeros(), vec![pt(1.0, 1.0, 10, 0), pt(1.01, 1.0, 12, 0)]);
        assert!(matches!(
            fit_calibration(&[scan], &CalibrationParams::default()),
            Err(CalibError::NoCrossBeamOverlap)
        ));
    }

    #[test]
    fn consistent_beams_keep_identity() {
        let mut pts = Vec::new();
        for i in 0..50 {
            let raw = (i * 2) as u8;
            for beam in 0..4u8 {
                pts.push(pt(i as f64 + 0.5, 0.5, raw, beam));
            }
        }
        let scan = Scan::new("s", Vec3::new(25.0, 0.0, 0.0), pts);
        let fit = fit_calibration(&[scan], &CalibrationParams::default()).unwrap();
        assert!(fit.converged);
        for beam in 0..4 {
            for a in 0..256 {
                if fit.observed[beam][a] {
                    assert!((fit.table.mapping[beam][a] - a as f64).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut t = CalibrationTable::identity(2, 30.0);
        t.mapping[1][7] = 1.0 / 3.0;
        t.mapping[0][200] = 254.99999999999997;
        let back = CalibrationTable::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
        for (a, b) in back.mapping.iter().zip(&t.mapping) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn apply_sets_intensities() {
        let scan = Scan::new("s", Vec3::zeros(), vec![pt(1.0, 0.0, 50, 0), pt(40.0, 0.0, 50, 1)]);
        let t = CalibrationTable::identity(16, 30.0);
        let out = apply_calibration(&scan, &t).unwrap();
        assert_eq!(out.points[0].calibrated_intensity, Some(0.5));
        assert!(!out.points[0].uncalibrated);
        assert!(out.points[1].uncalibrated);
    }
}
