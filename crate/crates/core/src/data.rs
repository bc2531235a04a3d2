//! Trajectory and scene types, the observed/future split and dark-vessel masking.

use std::fmt;
use std::str::FromStr;

use cmivtp_numerics::Rng;

use crate::error::{Error, Result};

/// Planar point. AIS points are normalized geographic units (unit square);
/// CCTV points are pixels in the scene-raster frame.
pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct AisTrajectory {
    pub points: Vec<Point>,
    /// `false` where the vessel was dark or the report was dropped.
    pub available: Vec<bool>,
}

impl AisTrajectory {
    pub fn fully_observed(points: Vec<Point>) -> Self {
        let available = vec![true; points.len()];
        AisTrajectory { points, available }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn any_available(&self) -> bool {
        self.available.iter().any(|&a| a)
    }

    pub fn last_available(&self) -> Option<Point> {
        self.points
            .iter()
            .zip(&self.available)
            .rev()
            .find(|(_, &a)| a)
            .map(|(p, _)| *p)
    }

    /// Points with unavailable steps filled from the nearest earlier available
    /// step (or the first available one for a leading gap). `None` when nothing
    /// is available.
    pub fn filled(&self) -> Option<Vec<Point>> {
        let first = self
            .points
            .iter()
            .zip(&self.available)
            .find(|(_, &a)| a)
            .map(|(p, _)| *p)?;
        let mut last = first;
        Some(
            self.points
                .iter()
                .zip(&self.available)
                .map(|(p, &a)| {
                    if a {
                        last = *p;
                    }
                    last
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CctvTrajectory {
    /// Bounding-box midpoints `(x_mid, y_mid)` per frame.
    pub points: Vec<Point>,
}

/// One 3-channel scene raster (waterway mask, other-vessel occupancy, target
/// marker) with the target's bounding box in raster coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub height: usize,
    pub width: usize,
    /// `3 × height × width`, channel-major.
    pub raster: Vec<f32>,
    /// `(x_min, y_min, x_max, y_max)`
    pub bbox: [f64; 4],
}

impl SceneFrame {
    pub const CHANNELS: usize = 3;

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.height == 0 || self.width == 0 {
            return Err("raster has a zero dimension".into());
        }
        let expected = Self::CHANNELS * self.height * self.width;
        if self.raster.len() != expected {
            return Err(format!(
                "raster holds {} values, shape needs {expected}",
                self.raster.len()
            ));
        }
        if self.raster.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("raster values must lie in [0, 1]".into());
        }
        let [x0, y0, x1, y1] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) || x0 >= x1 || y0 >= y1 {
            return Err(format!("bbox {:?} must satisfy x_min<x_max, y_min<y_max", self.bbox));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Density {
    Low,
    Medium,
    High,
}

impl Density {
    pub const ALL: [Density; 3] = [Density::Low, Density::Medium, Density::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Density::Low => "low",
            Density::Medium => "medium",
            Density::High => "high",
        }
    }
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Density {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "low" => Ok(Density::Low),
            "medium" => Ok(Density::Medium),
            "high" => Ok(Density::High),
            other => Err(format!("unknown density `{other}`")),
        }
    }
}

/// One vessel's aligned observation window and ground-truth future.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselSample {
    pub vessel_id: String,
    pub density: Density,
    pub is_dark: bool,
    pub obs_ais: AisTrajectory,
    pub obs_cctv: CctvTrajectory,
    pub scenes: Vec<SceneFrame>,
    pub fut_ais: Vec<Point>,
    pub fut_cctv: Vec<Point>,
}

impl VesselSample {
    pub fn t_obs(&self) -> usize {
        self.obs_ais.len()
    }

    pub fn t_fut(&self) -> usize {
        self.fut_ais.len()
    }

    /// Structural invariants; the message names the offending field.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let t_obs = self.obs_ais.points.len();
        if t_obs == 0 {
            return Err(("obs_ais", "empty observation window".into()));
        }
        if self.obs_ais.available.len() != t_obs {
            return Err((
                "ais_mask",
                format!("length {} != obs_ais length {t_obs}", self.obs_ais.available.len()),
            ));
        }
        if self.obs_cctv.points.len() != t_obs {
            return Err((
                "obs_cctv",
                format!("length {} != obs_ais length {t_obs}", self.obs_cctv.points.len()),
            ));
        }
        if self.scenes.len() != t_obs {
            return Err((
                "scenes",
                format!("length {} != obs_ais length {t_obs}", self.scenes.len()),
            ));
        }
        if self.fut_ais.is_empty() {
            return Err(("fut_ais", "empty future window".into()));
        }
        if self.fut_cctv.len() != self.fut_ais.len() {
            return Err((
                "fut_cctv",
                format!("length {} != fut_ais length {}", self.fut_cctv.len(), self.fut_ais.len()),
            ));
        }
        let finite = |pts: &[Point]| pts.iter().flatten().all(|v| v.is_finite());
        for (name, pts) in [
            ("obs_cctv", &self.obs_cctv.points),
            ("fut_ais", &self.fut_ais),
            ("fut_cctv", &self.fut_cctv),
        ] {
            if !finite(pts) {
                return Err((name, "non-finite coordinate".into()));
            }
        }
        let avail_finite = self
            .obs_ais
            .points
            .iter()
            .zip(&self.obs_ais.available)
            .all(|(p, &a)| !a || p.iter().all(|v| v.is_finite()));
        if !avail_finite {
            return Err(("obs_ais", "non-finite available coordinate".into()));
        }
        if self.is_dark && self.obs_ais.any_available() {
            return Err(("ais_mask", "dark vessel with available AIS steps".into()));
        }
        let (h, w) = (self.scenes[0].height, self.scenes[0].width);
        for s in &self.scenes {
            s.validate().map_err(|m| ("scenes", m))?;
            if (s.height, s.width) != (h, w) {
                return Err(("scenes", "frames differ in raster shape".into()));
            }
        }
        Ok(())
    }
}

/// Split a full track into `T_obs` observed points (t = −T_obs+1 … 0) and the
/// following `T_fut` future points (t = 1 … T_fut). Extra trailing points
/// are ignored.
pub fn split_window<T: Clone>(track: &[T], t_obs: usize, t_fut: usize) -> Result<(Vec<T>, Vec<T>)> {
    if t_obs == 0 || t_fut == 0 || track.len() < t_obs + t_fut {
        return Err(Error::Window {
            len: track.len(),
            t_obs,
            t_fut,
        });
    }
    Ok((
        track[..t_obs].to_vec(),
        track[t_obs..t_obs + t_fut].to_vec(),
    ))
}

/// Turn exactly `⌊ρ·N⌋` vessels dark. Candidates are sorted by `vessel_id`
/// before a seeded shuffle, so the choice does not depend on input order.
/// Coordinates are never touched; future AIS stays as ground truth.
pub fn apply_dark_vessels(samples: &[VesselSample], rho: f64, seed: u64) -> Result<Vec<VesselSample>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Invalid(format!("dark-vessel rate {rho} outside [0, 1]")));
    }
    let n_dark = (rho * samples.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].vessel_id.cmp(&samples[b].vessel_id));
    Rng::new(seed).shuffle(&mut order);

    let mut out = samples.to_vec();
    for &i in &order[..n_dark] {
        let s = &mut out[i];
        s.is_dark = true;
        s.obs_ais.available.iter_mut().for_each(|a| *a = false);
    }
    Ok(out)
}
