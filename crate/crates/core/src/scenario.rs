//! Synthetic curved-waterway scenarios with a planar camera.
//!
//! Vessels travel along a centerline at constant arc-length speed with a
//! lateral lane offset; a minority performs an avoidance swerve. CCTV tracks
//! are the homography projection of the true positions into a pixel frame
//! that coincides with the scene-raster grid.

use cmivtp_numerics::Rng;

use crate::data::{AisTrajectory, CctvTrajectory, Density, Point, SceneFrame, VesselSample};
use crate::error::{Error, Result};

/// Invertible 3×3 projective map from normalized geographic to pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
    inv: [[f64; 3]; 3],
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}

/// Solve `a·x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let det = det3(&m);
        if !det.is_finite() || det.abs() <= 1e-9 {
            return Err(Error::Homography(format!("|det| = {} is not invertible", det.abs())));
        }
        Ok(Homography {
            m,
            inv: inverse3(&m, det),
        })
    }

    pub fn identity() -> Self {
        Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()
    }

    /// Direct linear transform from four point correspondences (h₃₃ = 1).
    pub fn from_correspondences(src: [Point; 4], dst: [Point; 4]) -> Result<Self> {
        let mut a = Vec::with_capacity(8);
        let mut b = Vec::with_capacity(8);
        for (s, d) in src.iter().zip(&dst) {
            let ([x, y], [u, v]) = (*s, *d);
            a.push(vec![x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            b.push(u);
            a.push(vec![0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b.push(v);
        }
        let h = solve(a, b).ok_or_else(|| Error::Homography("degenerate correspondences".into()))?;
        Homography::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    }

    /// Default oblique shore camera: the unit square maps onto a trapezoid
    /// (far bank narrower, image y pointing down) inside a `size × size` frame.
    pub fn default_camera(size: usize) -> Self {
        let s = size as f64;
        Homography::from_correspondences(
            [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            [
                [0.06 * s, 0.95 * s],
                [0.94 * s, 0.95 * s],
                [0.74 * s, 0.06 * s],
                [0.26 * s, 0.06 * s],
            ],
        )
        .expect("default camera is non-degenerate")
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn inverse(&self) -> Homography {
        Homography {
            m: self.inv,
            inv: self.m,
        }
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        apply(&self.m, p)
    }

    pub fn apply_inverse(&self, p: Point) -> Result<Point> {
        apply(&self.inv, p)
    }
}

fn apply(m: &[[f64; 3]; 3], [x, y]: Point) -> Result<Point> {
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    if w.abs() < 1e-12 || !w.is_finite() {
        return Err(Error::Homography(format!("point ({x}, {y}) maps to w ≈ 0")));
    }
    Ok([
        (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
        (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
    ])
}

/// Projective transform with w-division.
pub fn project_geo_to_pixels(points: &[Point], h: &Homography) -> Result<Vec<Point>> {
    points.iter().map(|&p| h.apply(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Centerline {
    /// `y = 0.5 + A·sin(2π(x − x₀)/period)` across the square.
    Sinusoid { amplitude: f64, period: f64 },
    /// Circular arc bulging toward +y, centered at (0.5, 0.2).
    Arc { radius: f64 },
}

impl Centerline {
    pub fn straight() -> Self {
        Centerline::Sinusoid {
            amplitude: 0.0,
            period: 1.0,
        }
    }

    fn point(&self, u: f64) -> Point {
        match *self {
            Centerline::Sinusoid { amplitude, period } => {
                let x = 0.08 + 0.84 * u;
                [x, 0.5 + amplitude * (std::f64::consts::TAU * (x - 0.08) / period).sin()]
            }
            Centerline::Arc { radius } => {
                let th = std::f64::consts::PI * (0.95 - 0.9 * u);
                [0.5 + radius * th.cos(), 0.2 + radius * th.sin()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterwayConfig {
    pub centerline: Centerline,
    pub half_width: f64,
    pub vessel_count: usize,
    /// Arc-length speed range per timestep.
    pub speed_range: (f64, f64),
    pub maneuver_prob: f64,
    pub homography: Homography,
    pub ais_noise: f64,
    pub pixel_noise: f64,
    /// Per-step probability that an observed AIS report is dropped.
    pub ais_dropout: f64,
    pub t_obs: usize,
    pub t_fut: usize,
    /// Scene raster side length; also the CCTV pixel frame.
    pub raster_size: usize,
    /// Overrides the count-derived density label.
    pub density: Option<Density>,
    pub id_prefix: String,
}

impl Default for WaterwayConfig {
    fn default() -> Self {
        WaterwayConfig {
            centerline: Centerline::Sinusoid {
                amplitude: 0.12,
                period: 0.7,
            },
            half_width: 0.05,
            vessel_count: 24,
            speed_range: (0.006, 0.012),
            maneuver_prob: 0.15,
            homography: Homography::default_camera(64),
            ais_noise: 0.0005,
            pixel_noise: 0.05,
            ais_dropout: 0.0,
            t_obs: 8,
            t_fut: 12,
            raster_size: 64,
            density: None,
            id_prefix: "s0-".into(),
        }
    }
}

impl WaterwayConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("waterway config: {m}")));
        if !(self.half_width > 0.0) {
            return bad("half_width must be positive");
        }
        if self.vessel_count == 0 || self.t_obs == 0 || self.t_fut == 0 {
            return bad("vessel_count, t_obs and t_fut must be positive");
        }
        if self.raster_size < 4 {
            return bad("raster_size must be at least 4");
        }
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("speed range must satisfy 0 < min ≤ max");
        }
        if !(0.0..=1.0).contains(&self.maneuver_prob) || !(0.0..=1.0).contains(&self.ais_dropout) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.ais_noise < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn density_label(&self) -> Density {
        self.density.unwrap_or(match self.vessel_count {
            0..=15 => Density::Low,
            16..=31 => Density::Medium,
            _ => Density::High,
        })
    }
}

/// A generated sample plus generator-side truth that is not part of the
/// dataset schema.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedVessel {
    pub sample: VesselSample,
    pub maneuvering: bool,
    /// Noise-free positions over the whole window.
    pub true_track: Vec<Point>,
}

struct Polyline {
    pts: Vec<Point>,
    cum: Vec<f64>,
}

impl Polyline {
    fn new(c: &Centerline, segments: usize) -> Self {
        let pts: Vec<Point> = (0..=segments).map(|i| c.point(i as f64 / segments as f64)).collect();
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        Polyline { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and unit left normal at arc length `s`.
    fn at(&self, s: f64) -> (Point, Point) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => (i - 1).min(self.pts.len() - 2),
        };
        let seg = self.cum[i + 1] - self.cum[i];
        let f = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let n = (dx * dx + dy * dy).sqrt();
        ([a[0] + f * dx, a[1] + f * dy], [-dy / n, dx / n])
    }

    fn distance(&self, p: Point) -> f64 {
        self.pts
            .iter()
            .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

fn waterway_mask(cfg: &WaterwayConfig, line: &Polyline) -> Vec<f32> {
    let s = cfg.raster_size;
    let mut mask = vec![0.0f32; s * s];
    for i in 0..s {
        for j in 0..s {
            let px = [j as f64 + 0.5, i as f64 + 0.5];
            if let Ok(g) = cfg.homography.apply_inverse(px) {
                if line.distance(g) <= cfg.half_width {
                    mask[i * s + j] = 1.0;
                }
            }
        }
    }
    mask
}

fn splat(plane: &mut [f32], size: usize, p: Point, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let (ci, cj) = (p[1].floor() as isize, p[0].floor() as isize);
    for i in ci - r..=ci + r {
        for j in cj - r..=cj + r {
            if i < 0 || j < 0 || i >= size as isize || j >= size as isize {
                continue;
            }
            let d2 = (j as f64 + 0.5 - p[0]).powi(2) + (i as f64 + 0.5 - p[1]).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
            let cell = &mut plane[i as usize * size + j as usize];
            *cell = cell.max(v);
        }
    }
}

/// Simulate one scenario. Deterministic in `(cfg, seed)`.
pub fn generate_scenario_detailed(cfg: &WaterwayConfig, seed: u64) -> Result<Vec<GeneratedVessel>> {
    cfg.validate()?;
    let rng = Rng::new(seed);
    let line = Polyline::new(&cfg.centerline, 2048);
    let total = cfg.t_obs + cfg.t_fut;
    let size = cfg.raster_size;
    let frame_max = size as f64 - 1e-6;

    struct Truth {
        geo: Vec<Point>,
        pix: Vec<Point>,
        maneuvering: bool,
    }

    let mut truths = Vec::with_capacity(cfg.vessel_count);
    for v in 0..cfg.vessel_count {
        let mut r = rng.fork(v as u64);
        let max_speed = 0.9 * line.length() / (total - 1).max(1) as f64;
        let speed = r.uniform_in(cfg.speed_range.0, cfg.speed_range.1).min(max_speed);
        let forward = r.bernoulli(0.5);
        let side = if forward { 1.0 } else { -1.0 };
        let base_offset = -side * r.uniform_in(0.15, 0.6) * cfg.half_width;
        let travel = speed * (total - 1) as f64;
        let s0 = r.uniform_in(0.0, line.length() - travel);
        let maneuvering = r.bernoulli(cfg.maneuver_prob);
        let (t0, dur, amp) = if maneuvering {
            let dur = (r.uniform_in(8.0, 16.0).round() as usize).min(total);
            let t0 = r.below(total - dur + 1);
            let dir = if r.bernoulli(0.5) { 1.0 } else { -1.0 };
            (t0, dur, dir * r.uniform_in(0.5, 0.9) * cfg.half_width)
        } else {
            (0, 1, 0.0)
        };

        let mut geo = Vec::with_capacity(total);
        for t in 0..total {
            let s = if forward {
                s0 + speed * t as f64
            } else {
                s0 + travel - speed * t as f64
            };
            let mut off = base_offset;
            if maneuvering && t >= t0 && t < t0 + dur {
                let phase = std::f64::consts::PI * (t - t0) as f64 / dur as f64;
                off += amp * phase.sin().powi(2);
            }
            off = off.clamp(-0.95 * cfg.half_width, 0.95 * cfg.half_width);
            let (p, n) = line.at(s);
            geo.push([p[0] + off * n[0], p[1] + off * n[1]]);
        }
        let pix = project_geo_to_pixels(&geo, &cfg.homography)?;
        truths.push(Truth {
            geo,
            pix,
            maneuvering,
        });
    }

    let mask = waterway_mask(cfg, &line);
    let density = cfg.density_label();
    let sigma = (size as f64 / 64.0).max(0.6);
    let half_box = (0.03 * size as f64).max(1.0);

    let mut out = Vec::with_capacity(cfg.vessel_count);
    for (v, truth) in truths.iter().enumerate() {
        let mut r = rng.fork(1_000_003 + v as u64);
        let noisy_geo: Vec<Point> = truth
            .geo
            .iter()
            .map(|p| [p[0] + cfg.ais_noise * r.normal(), p[1] + cfg.ais_noise * r.normal()])
            .collect();
        let noisy_pix: Vec<Point> = truth
            .pix
            .iter()
            .map(|p| {
                [
                    (p[0] + cfg.pixel_noise * r.normal()).clamp(0.0, frame_max),
                    (p[1] + cfg.pixel_noise * r.normal()).clamp(0.0, frame_max),
                ]
            })
            .collect();
        let available: Vec<bool> = (0..cfg.t_obs).map(|_| !r.bernoulli(cfg.ais_dropout)).collect();

        let mut scenes = Vec::with_capacity(cfg.t_obs);
        for t in 0..cfg.t_obs {
            let mut raster = vec![0.0f32; 3 * size * size];
            raster[..size * size].copy_from_slice(&mask);
            {
                let occ = &mut raster[size * size..2 * size * size];
                for (u, other) in truths.iter().enumerate() {
                    if u != v {
                        splat(occ, size, other.pix[t], sigma);
                    }
                }
            }
            let c = noisy_pix[t];
            let bbox = [
                (c[0] - half_box).max(0.0),
                (c[1] - half_box).max(0.0),
                (c[0] + half_box).min(size as f64),
                (c[1] + half_box).min(size as f64),
            ];
            let marker = &mut raster[2 * size * size..];
            for i in 0..size {
                for j in 0..size {
                    let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                    if x >= bbox[0] && x <= bbox[2] && y >= bbox[1] && y <= bbox[3] {
                        marker[i * size + j] = 1.0;
                    }
                }
            }
            scenes.push(SceneFrame {
                height: size,
                width: size,
                raster,
                bbox,
            });
        }

        let sample = VesselSample {
            vessel_id: format!("{}v{v:04}", cfg.id_prefix),
            density,
            is_dark: false,
            obs_ais: AisTrajectory {
                points: noisy_geo[..cfg.t_obs].to_vec(),
                available,
            },
            obs_cctv: CctvTrajectory {
                points: noisy_pix[..cfg.t_obs].to_vec(),
            },
            scenes,
            fut_ais: noisy_geo[cfg.t_obs..].to_vec(),
            fut_cctv: noisy_pix[cfg.t_obs..].to_vec(),
        };
        out.push(GeneratedVessel {
            sample,
            maneuvering: truth.maneuvering,
            true_track: truth.geo.clone(),
        });
    }
    Ok(out)
}

pub fn generate_scenario(cfg: &WaterwayConfig, seed: u64) -> Result<Vec<VesselSample>> {
    Ok(generate_scenario_detailed(cfg, seed)?
        .into_iter()
        .map(|g| g.sample)
        .collect())
}

/// `scenarios` independent scenes with seeds `seed, seed+1, …`; vessel ids
/// are prefixed `s<i>-`.
pub fn generate_dataset(cfg: &WaterwayConfig, scenarios: usize, seed: u64) -> Result<Vec<VesselSample>> {
    let mut out = Vec::with_capacity(scenarios * cfg.vessel_count);
    for i in 0..scenarios {
        let scene_cfg = WaterwayConfig {
            id_prefix: format!("s{i}-"),
            ..cfg.clone()
        };
        out.extend(generate_scenario(&scene_cfg, seed.wrapping_add(i as u64))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::dataset_to_string;

    fn small(seed_prefix: &str) -> WaterwayConfig {
        WaterwayConfig {
            vessel_count: 6,
            raster_size: 16,
            homography: Homography::default_camera(16),
            id_prefix: seed_prefix.into(),
            ..WaterwayConfig::default()
        }
    }

    #[test]
    fn projection_examples() {
        let pts = vec![[0.3, 0.7], [-1.0, 2.0]];
        assert_eq!(project_geo_to_pixels(&pts, &Homography::identity()).unwrap(), pts);
        let s = Homography::new([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(project_geo_to_pixels(&pts, &s).unwrap(), vec![[0.6, 1.4], [-2.0, 4.0]]);
    }

    #[test]
    fn random_homography_round_trip() {
        let mut r = Rng::new(11);
        let mut tested = 0;
        while tested < 50 {
            let mut m = [[0.0; 3]; 3];
            for row in &mut m {
                for v in row.iter_mut() {
                    *v = r.uniform_in(-1.0, 1.0);
                }
            }
            m[2][2] = 1.0 + r.uniform();
            let Ok(h) = Homography::new(m) else { continue };
            for _ in 0..10 {
                let p = [r.uniform(), r.uniform()];
                let Ok(q) = h.apply(p) else { continue };
                let back = h.apply_inverse(q).unwrap();
                let scale = 1.0 + q[0].abs().max(q[1].abs());
                assert!((back[0] - p[0]).abs() < 1e-9 * scale && (back[1] - p[1]).abs() < 1e-9 * scale);
            }
            tested += 1;
        }
    }

    #[test]
    fn singular_homography_and_w_zero() {
        assert!(Homography::new([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_err());
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0 + 1e-3]]).unwrap();
        assert!(h.apply([-1e-3, 0.0]).is_err());
    }

    #[test]
    fn default_camera_maps_corners() {
        let h = Homography::default_camera(64);
        let p = h.apply([1.0, 1.0]).unwrap();
        assert!((p[0] - 0.74 * 64.0).abs() < 1e-9 && (p[1] - 0.06 * 64.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_straight_tracks_are_collinear() {
        let cfg = WaterwayConfig {
            centerline: Centerline::straight(),
            maneuver_prob: 0.0,
            ais_noise: 0.0,
            pixel_noise: 0.0,
            ..small("a-")
        };
        for g in generate_scenario_detailed(&cfg, 3).unwrap() {
            let mut pts = g.sample.obs_ais.points.clone();
            pts.extend(&g.sample.fut_ais);
            let (a, b) = (pts[0], *pts.last().unwrap());
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            for p in &pts {
                let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                assert!((cross / len).abs() < 1e-9);
            }
            // zero noise: CCTV equals the projected AIS exactly
            let proj = project_geo_to_pixels(&g.sample.obs_ais.points, &cfg.homography).unwrap();
            assert_eq!(proj, g.sample.obs_cctv.points);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small("b-");
        let a = dataset_to_string(&generate_scenario(&cfg, 5).unwrap());
        let b = dataset_to_string(&generate_scenario(&cfg, 5).unwrap());
        assert_eq!(a, b);
        let c = dataset_to_string(&generate_scenario(&cfg, 6).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn maneuver_fraction_is_binomial() {
        // Binomial(200, 0.15): mean 30, sd ≈ 5.05; [20, 40] is ±~2σ.
        let cfg = WaterwayConfig {
            vessel_count: 200,
            maneuver_prob: 0.15,
            raster_size: 8,
            homography: Homography::default_camera(8),
            t_fut: 4,
            ..WaterwayConfig::default()
        };
        let n = generate_scenario_detailed(&cfg, 17)
            .unwrap()
            .iter()
            .filter(|g| g.maneuvering)
            .count();
        assert!((20..=40).contains(&n), "{n} maneuvering vessels");
    }

    #[test]
    fn target_marker_matches_bbox() {
        let cfg = small("c-");
        for g in generate_scenario_detailed(&cfg, 8).unwrap() {
            let s = cfg.raster_size;
            assert!(g.sample.validate().is_ok());
            for f in &g.sample.scenes {
                let marker = &f.raster[2 * s * s..];
                let mut inside = 0;
                for i in 0..s {
                    for j in 0..s {
                        let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                        let in_box = x >= f.bbox[0] && x <= f.bbox[2] && y >= f.bbox[1] && y <= f.bbox[3];
                        assert_eq!(marker[i * s + j] > 0.0, in_box);
                        inside += in_box as usize;
                    }
                }
                assert!(inside > 0);
            }
            for p in g.sample.obs_cctv.points.iter().chain(&g.sample.fut_cctv) {
                assert!(p[0] >= 0.0 && p[0] < s as f64 && p[1] >= 0.0 && p[1] < s as f64);
            }
        }
    }
}
