//! Trajectory bank: k-means over normalized motion features with medoid
//! prototypes, cosine retrieval, and gated refinement of the decoded AIS
//! trajectory toward the retrieved prior.

use std::path::Path;

use cmivtp_numerics::{ParamStore, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{split_window, Point, VesselSample};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};

pub const SIMILARITY_EPS: f64 = 1e-8;
pub const KMEANS_MAX_ITER: usize = 100;

/// Shift to the first point, divide by the start-to-end displacement
/// (floored at 1e-8) and flatten.
pub fn motion_feature(track: &[Point]) -> Vec<f64> {
    let Some(&first) = track.first() else {
        return Vec::new();
    };
    let last = track[track.len() - 1];
    let scale = displacement(first, last).max(1e-8);
    track
        .iter()
        .flat_map(|p| [(p[0] - first[0]) / scale, (p[1] - first[1]) / scale])
        .collect()
}

fn displacement(a: Point, b: Point) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + SIMILARITY_EPS)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared feature-to-centroid distances after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest(f: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(f, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn cluster_means(features: &[Vec<f64>], assign: &[usize], k: usize, old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &a) in features.iter().zip(assign) {
        counts[a] += 1;
        sums[a].iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, n))| {
            if n == 0 {
                old[c].clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

/// Lloyd's k-means with seeded farthest-point initialization. The first
/// centroid is a seeded random feature; each next one is the feature with
/// the largest distance to its nearest chosen centroid (lowest index on
/// ties). An empty cluster takes the feature farthest from its own centroid.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = features.len();
    if n == 0 || k == 0 {
        return Err(Error::Invalid("k-means needs at least one feature and one cluster".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Invalid("k-means features have inconsistent lengths".into()));
    }
    let k = k.min(n);
    let mut rng = Rng::new(seed);
    let mut centroids = vec![features[rng.below(n)].clone()];
    let mut min_d: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let mut pick = 0;
        for i in 1..n {
            if min_d[i] > min_d[pick] {
                pick = i;
            }
        }
        centroids.push(features[pick].clone());
        for (m, f) in min_d.iter_mut().zip(features) {
            *m = m.min(sq_dist(f, &features[pick]));
        }
    }

    let mut assign: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let next: Vec<usize> = features.iter().map(|f| nearest(f, &centroids)).collect();
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
        iterations += 1;

        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&a| counts[a] += 1);
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut pick: Option<(usize, f64)> = None;
            for (i, f) in features.iter().enumerate() {
                if taken[i] || counts[assign[i]] < 2 {
                    continue;
                }
                let d = sq_dist(f, &centroids[assign[i]]);
                if pick.is_none_or(|(_, best)| d > best) {
                    pick = Some((i, d));
                }
            }
            if let Some((i, _)) = pick {
                counts[assign[i]] -= 1;
                counts[c] = 1;
                assign[i] = c;
                taken[i] = true;
                centroids[c] = features[i].clone();
            }
        }
        centroids = cluster_means(features, &assign, k, &centroids);
        objective.push(features.iter().zip(&assign).map(|(f, &a)| sq_dist(f, &centroids[a])).sum());
    }
    Ok(KMeans {
        centroids,
        assignments: assign,
        objective,
        iterations,
        converged,
    })
}

/// Member closest to the members' mean feature; lowest index on ties.
pub fn medoid(features: &[Vec<f64>], members: &[usize]) -> Option<usize> {
    let first = *members.first()?;
    let dim = features[first].len();
    let mut mean = vec![0.0; dim];
    for &m in members {
        mean.iter_mut().zip(&features[m]).for_each(|(s, v)| *s += v);
    }
    mean.iter_mut().for_each(|v| *v /= members.len() as f64);
    let mut best = (first, f64::INFINITY);
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    for m in sorted {
        let d = sq_dist(&features[m], &mean);
        if d < best.1 {
            best = (m, d);
        }
    }
    Some(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub obs: Vec<Point>,
    pub fut: Vec<Point>,
    pub feat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankHeader {
    pub t_obs: usize,
    pub t_fut: usize,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBank {
    pub header: BankHeader,
    pub entries: Vec<BankEntry>,
}

/// Full AIS tracks (observed followed by future) of samples whose observed
/// AIS is completely available.
pub fn bank_tracks(samples: &[VesselSample]) -> Vec<Vec<Point>> {
    samples
        .iter()
        .filter(|s| !s.is_dark && s.obs_ais.available.iter().all(|&a| a))
        .map(|s| s.obs_ais.points.iter().chain(&s.fut_ais).copied().collect())
        .collect()
}

pub fn build_bank(tracks: &[Vec<Point>], k_max: usize, t_obs: usize, t_fut: usize, seed: u64) -> Result<TrajectoryBank> {
    if tracks.is_empty() {
        return Err(Error::Invalid("cannot build a trajectory bank from an empty dataset".into()));
    }
    if k_max == 0 {
        return Err(Error::Invalid("bank size K_max must be positive".into()));
    }
    let mut windows = Vec::with_capacity(tracks.len());
    for t in tracks {
        windows.push(split_window(t, t_obs, t_fut)?);
    }
    let features: Vec<Vec<f64>> = windows.iter().map(|(o, _)| motion_feature(o)).collect();
    let km = kmeans(&features, k_max, seed, KMEANS_MAX_ITER)?;
    let k = km.centroids.len();
    let mut entries = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (0..features.len()).filter(|&i| km.assignments[i] == c).collect();
        if let Some(m) = medoid(&features, &members) {
            let (obs, fut) = &windows[m];
            entries.push(BankEntry {
                obs: obs.clone(),
                fut: fut.clone(),
                feat: features[m].clone(),
            });
        }
    }
    Ok(TrajectoryBank {
        header: BankHeader {
            t_obs,
            t_fut,
            k: entries.len(),
            seed,
        },
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    pub index: usize,
    pub similarity: f64,
}

impl TrajectoryBank {
    /// Highest cosine similarity between the query's motion feature and the
    /// bank features; lowest index wins ties.
    pub fn search(&self, observed: &[Point]) -> Result<Retrieval> {
        self.search_feature(&motion_feature(observed))
    }

    pub fn search_feature(&self, query: &[f64]) -> Result<Retrieval> {
        if self.entries.is_empty() {
            return Err(Error::Invalid("search on an empty trajectory bank".into()));
        }
        let mut best = Retrieval {
            index: 0,
            similarity: f64::NEG_INFINITY,
        };
        for (i, e) in self.entries.iter().enumerate() {
            let s = cosine_similarity(query, &e.feat);
            if s > best.similarity {
                best = Retrieval { index: i, similarity: s };
            }
        }
        Ok(best)
    }

    /// Retrieved future moved into the query's frame: translated to the
    /// query's first point and rescaled by the ratio of overall displacements.
    pub fn aligned_prior(&self, index: usize, observed: &[Point]) -> Vec<Point> {
        let e = &self.entries[index];
        let (q0, qn) = (observed[0], observed[observed.len() - 1]);
        let (b0, bn) = (e.obs[0], e.obs[e.obs.len() - 1]);
        let ratio = displacement(q0, qn) / displacement(b0, bn).max(1e-8);
        e.fut
            .iter()
            .map(|p| [q0[0] + (p[0] - b0[0]) * ratio, q0[1] + (p[1] - b0[1]) * ratio])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.header;
        let bad = |msg: String| Err(Error::Invalid(format!("trajectory bank: {msg}")));
        if h.k != self.entries.len() {
            return bad(format!("header k = {} but {} entries", h.k, self.entries.len()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.obs.len() != h.t_obs || e.fut.len() != h.t_fut || e.feat.len() != 2 * h.t_obs {
                return bad(format!("entry {i} does not match t_obs = {}, t_fut = {}", h.t_obs, h.t_fut));
            }
            let finite = e.obs.iter().chain(&e.fut).flatten().chain(&e.feat).all(|v| v.is_finite());
            if !finite {
                return bad(format!("entry {i} holds a non-finite value"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: TrajectoryBank =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("trajectory bank JSON: {e}")))?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrajectoryBank::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Which side of the gate the refined prior sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionForm {
    /// `β·Ŷ_ref + (1−β)·Ŷ_base`
    #[default]
    GateOnPrior,
    /// `β·Ŷ_base + (1−β)·Ŷ_ref`
    GateOnBase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementParams {
    pub offset: Mlp,
    pub gate: Linear,
    pub gamma_off: f64,
    pub form: FusionForm,
    pub t_fut: usize,
}

pub struct Refined {
    pub out: Var,
    pub beta: Var,
    pub offset: Var,
}

impl RefinementParams {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        t_fut: usize,
        gamma_off: f64,
        form: FusionForm,
        rng: &mut Rng,
    ) -> Self {
        RefinementParams {
            offset: Mlp::new(store, "vgtb.offset", [t_fut * (2 + d), 2 * d, 2 * t_fut], rng),
            gate: Linear::new(store, "vgtb.gate", d, 1, rng),
            gamma_off,
            form,
            t_fut,
        }
    }

    /// `base`, `prior`: `[T_fut × 2]`; `f_dec`: `[T_fut × d]`; `f_enc`: `[1 × d]`.
    /// `gate_override` pins β for tests.
    pub fn refine_and_fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        base: Var,
        prior: Var,
        f_dec: Var,
        f_enc: Var,
        gate_override: Option<f64>,
    ) -> Result<Refined> {
        let t = self.t_fut;
        if tape.shape(base) != [t, 2] || tape.shape(prior) != [t, 2] {
            return Err(Error::Invalid(format!(
                "refinement expects [{t}×2] trajectories, got {:?} and {:?}",
                tape.shape(base),
                tape.shape(prior)
            )));
        }
        let pf = tape.reshape(prior, &[1, 2 * t])?;
        let d = tape.value(f_dec).numel();
        let ff = tape.reshape(f_dec, &[1, d])?;
        let x = tape.concat_cols(&[pf, ff])?;
        let o = self.offset.forward(tape, store, x)?;
        let offset = tape.reshape(o, &[t, 2])?;
        let scaled = tape.scale(offset, self.gamma_off);
        let refined = tape.add(prior, scaled)?;
        let beta = match gate_override {
            Some(b) => tape.constant(Tensor::new(&[1, 1], vec![b])?),
            None => {
                let g = self.gate.forward(tape, store, f_enc)?;
                tape.sigmoid(g)
            }
        };
        let (from, to) = match self.form {
            FusionForm::GateOnPrior => (base, refined),
            FusionForm::GateOnBase => (refined, base),
        };
        let neg = tape.scale(beta, -1.0);
        let rest = tape.add_scalar(neg, 1.0);
        let a = tape.mul_scalar(to, beta)?;
        let b = tape.mul_scalar(from, rest)?;
        let out = tape.add(a, b)?;
        Ok(Refined { out, beta, offset })
    }
}
