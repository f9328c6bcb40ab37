//! Pipeline parameters and their `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::calib::CalibrationParams;
use crate::keypoints::IssParams;
use crate::registration::RegistrationParams;
use crate::voting::VotingParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("unknown parameter '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for parameter '{key}'")]
    BadValue { key: String, value: String },
    #[error("config line {line}: expected 'key = value'")]
    Syntax { line: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams {
    pub voxel_size: f64,
    /// Points beyond this range are discarded before voxelization.
    pub max_range: f64,
    pub normal_radius: f64,
    pub iss: IssParams,
    pub descriptor_radius: f64,
    pub min_place_distance: f64,
    pub place_radius: f64,
    pub calib: CalibrationParams,
    pub voting: VotingParams,
    pub registration: RegistrationParams,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.4,
            max_range: 40.0,
            normal_radius: 1.0,
            iss: IssParams::default(),
            descriptor_radius: 7.0,
            min_place_distance: 10.0,
            place_radius: 40.0,
            calib: CalibrationParams::default(),
            voting: VotingParams::default(),
            registration: RegistrationParams::default(),
        }
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ParamError> {
    value.trim().parse().map_err(|_| ParamError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ParamError> {
    value.split(',').map(|v| parse::<f64>(key, v)).collect()
}

impl PipelineParams {
    /// Every parameter as `(key, value)` in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let r = &self.registration;
        vec![
            ("voxel_size", self.voxel_size.to_string()),
            ("max_range", self.max_range.to_string()),
            ("normal_radius", self.normal_radius.to_string()),
            ("salient_radius", self.iss.salient_radius.to_string()),
            ("nonmax_radius", self.iss.nonmax_radius.to_string()),
            ("gamma21", self.iss.gamma21.to_string()),
            ("gamma32", self.iss.gamma32.to_string()),
            ("min_neighbors", self.iss.min_neighbors.to_string()),
            ("min_saliency", self.iss.min_saliency.to_string()),
            ("boundary_radius", self.iss.boundary_radius.to_string()),
            ("gap_threshold", self.iss.gap_threshold.to_string()),
            ("descriptor_radius", self.descriptor_radius.to_string()),
            ("min_place_distance", self.min_place_distance.to_string()),
            ("place_radius", self.place_radius.to_string()),
            ("calib_voxel_size", self.calib.voxel_size.to_string()),
            ("calib_max_iter", self.calib.max_iter.to_string()),
            ("calib_tol", self.calib.tol.to_string()),
            ("calib_max_range", self.calib.max_calib_range.to_string()),
            ("batch_size", self.voting.batch_size.to_string()),
            ("xi", self.voting.xi.to_string()),
            ("k_candidates", self.voting.k_candidates.to_string()),
            (
                "tau_edges",
                self.voting.tau_edges.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("min_bin_samples", self.voting.min_bin_samples.to_string()),
            ("resolution", r.resolution.to_string()),
            ("min_cluster", r.min_cluster.to_string()),
            ("match_k", r.match_k.to_string()),
            ("icp_max_iter", r.icp.max_iter.to_string()),
            ("icp_max_corr_dist", r.icp.max_corr_dist.to_string()),
            ("icp_tol", r.icp.tol.to_string()),
            ("epsilon_icp", r.epsilon_icp.to_string()),
            ("min_overlap", r.min_overlap.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ParamError> {
        let r = &mut self.registration;
        match key {
            "voxel_size" => self.voxel_size = parse(key, value)?,
            "max_range" => self.max_range = parse(key, value)?,
            "normal_radius" => self.normal_radius = parse(key, value)?,
            "salient_radius" => self.iss.salient_radius = parse(key, value)?,
            "nonmax_radius" => self.iss.nonmax_radius = parse(key, value)?,
            "gamma21" => self.iss.gamma21 = parse(key, value)?,
            "gamma32" => self.iss.gamma32 = parse(key, value)?,
            "min_neighbors" => self.iss.min_neighbors = parse(key, value)?,
            "min_saliency" => self.iss.min_saliency = parse(key, value)?,
            "boundary_radius" => self.iss.boundary_radius = parse(key, value)?,
            "gap_threshold" => self.iss.gap_threshold = parse(key, value)?,
            "descriptor_radius" => self.descriptor_radius = parse(key, value)?,
            "min_place_distance" => self.min_place_distance = parse(key, value)?,
            "place_radius" => self.place_radius = parse(key, value)?,
            "calib_voxel_size" => self.calib.voxel_size = parse(key, value)?,
            "calib_max_iter" => self.calib.max_iter = parse(key, value)?,
            "calib_tol" => self.calib.tol = parse(key, value)?,
            "calib_max_range" => self.calib.max_calib_range = parse(key, value)?,
            "batch_size" => self.voting.batch_size = parse(key, value)?,
            "xi" => self.voting.xi = parse(key, value)?,
            "k_candidates" => self.voting.k_candidates = parse(key, value)?,
            "tau_edges" => self.voting.tau_edges = parse_list(key, value)?,
            "min_bin_samples" => self.voting.min_bin_samples = parse(key, value)?,
            "resolution" => r.resolution = parse(key, value)?,
            "min_cluster" => r.min_cluster = parse(key, value)?,
            "match_k" => r.match_k = parse(key, value)?,
            "icp_max_iter" => r.icp.max_iter = parse(key, value)?,
            "icp_max_corr_dist" => r.icp.max_corr_dist = parse(key, value)?,
            "icp_tol" => r.icp.tol = parse(key, value)?,
            "epsilon_icp" => r.epsilon_icp = parse(key, value)?,
            "min_overlap" => r.min_overlap = parse(key, value)?,
            _ => return Err(ParamError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        Self::default().entries().iter().any(|(k, _)| *k == key)
    }

    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    /// Keys not recognised here are returned for the caller to handle.
    pub fn apply_config_text(&mut self, text: &str) -> Result<Vec<(String, String)>, ParamError> {
        let mut unknown = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.split('#').next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or(ParamError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            match self.set(k, v) {
                Err(ParamError::UnknownKey(_)) => unknown.push((k.to_string(), v.to_string())),
                other => other?,
            }
        }
        Ok(unknown)
    }

    pub fn from_config_text(text: &str) -> Result<Self, ParamError> {
        let mut p = Self::default();
        if let Some((k, _)) = p.apply_config_text(text)?.into_iter().next() {
            return Err(ParamError::UnknownKey(k));
        }
        Ok(p)
    }
}
