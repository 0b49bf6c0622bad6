//! Spatial representation analysis: rate maps over nodes, grid and place
//! scores, remapping statistics, and figure/table export.
//!
//! A rate map is the mean activity of one unit at each node of an
//! environment, collected over a long random walk and Gaussian-smoothed
//! over node coordinates (kernel renormalised over visited nodes, so
//! smoothing preserves total mass). Position units are the coordinates of
//! the combined encoding `g`; memory neurons are the sensory-mode softmax
//! weights, one unit per stored memory.
//!
//! The grid score is the classic rotational-autocorrelation statistic:
//! spatial autocorrelogram, annulus around the central peak, then
//! `min(corr at 60, 120 deg) - max(corr at 30, 90, 150 deg)`, maximised
//! over the annulus outer radius. The place score binarises a map at a
//! fraction of its peak and reports the share of firing mass in the
//! largest connected component.

use crate::envgen::{sample_trajectory, Environment};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::model::{run_episode, ModelParams, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitSource {
    PositionUnit,
    MemoryNeuron,
}

impl UnitSource {
    pub fn name(self) -> &'static str {
        match self {
            UnitSource::PositionUnit => "position",
            UnitSource::MemoryNeuron => "memory",
        }
    }
}

/// Smoothing widths (lattice units) swept by the grid-pipeline
/// validation, bracketing the default sigma of 1. Widths much beyond a
/// quarter of the validation grating period suppress the periodic signal
/// itself, leaving only boundary artifacts.
pub const DEFAULT_SMOOTHING_SWEEP: [f64; 4] = [0.5, 0.75, 1.0, 1.25];

/// Rate maps for every unit of one source over one environment.
#[derive(Debug, Clone)]
pub struct RateMapSet {
    pub source: UnitSource,
    pub coords: Vec<(f64, f64)>,
    pub neighbors: Vec<Vec<usize>>,
    pub visits: Vec<u64>,
    /// Visited nodes; unvisited nodes are excluded from all scores.
    pub valid: Vec<bool>,
    /// Per-unit raw mean activity per node.
    pub raw: Vec<Vec<f64>>,
    /// Per-unit smoothed maps (the ones scored and exported).
    pub maps: Vec<Vec<f64>>,
    pub sigma: f64,
    /// More than 10% of nodes were never visited.
    pub unvisited_warning: bool,
}

impl RateMapSet {
    pub fn n_units(&self) -> usize {
        self.maps.len()
    }
}

/// Per-node mean activity from per-step unit activities.
pub fn rate_maps_from_activity(
    activity: &[Vec<f64>],
    node_trace: &[u32],
    n_units: usize,
    n_nodes: usize,
) -> (Vec<Vec<f64>>, Vec<u64>) {
    let mut sums = vec![vec![0.0; n_nodes]; n_units];
    let mut visits = vec![0u64; n_nodes];
    for (t, &node) in node_trace.iter().enumerate() {
        let node = node as usize;
        visits[node] += 1;
        let row = &activity[t];
        for (u, sum) in sums.iter_mut().enumerate() {
            // Activities shorter than n_units (e.g. a still-growing store)
            // are implicitly zero.
            if let Some(&a) = row.get(u) {
                sum[node] += a;
            }
        }
    }
    for sum in sums.iter_mut() {
        for (s, &v) in sum.iter_mut().zip(&visits) {
            if v > 0 {
                *s /= v as f64;
            }
        }
    }
    (sums, visits)
}

/// Gaussian smoothing over node coordinates. The kernel is normalised
/// per source node over valid nodes, so total mass is preserved to
/// roundoff. `sigma <= 0` is a pass-through.
pub fn smooth_rate_map(
    values: &[f64],
    coords: &[(f64, f64)],
    valid: &[bool],
    sigma: f64,
) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let n = values.len();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; n];
    for m in 0..n {
        if !valid[m] || values[m] == 0.0 {
            continue;
        }
        let (mx, my) = coords[m];
        let mut weights = vec![0.0; n];
        let mut z = 0.0;
        for (nn, w) in weights.iter_mut().enumerate() {
            if !valid[nn] {
                continue;
            }
            let dx = coords[nn].0 - mx;
            let dy = coords[nn].1 - my;
            *w = (-(dx * dx + dy * dy) * inv).exp();
            z += *w;
        }
        for (o, w) in out.iter_mut().zip(&weights) {
            *o += values[m] * w / z;
        }
    }
    out
}

/// Runs a long random walk with frozen parameters and averages unit
/// activity per node. Position units record the combined encoding `g`;
/// memory neurons record the sensory-retrieval softmax weight of each
/// stored memory (zero before the memory exists).
pub fn collect_rate_maps(
    params: &ModelParams,
    env: &Environment,
    n_steps: usize,
    seed: u64,
    source: UnitSource,
    sigma: f64,
) -> Result<RateMapSet> {
    let episode = sample_trajectory(env, n_steps, seed)?;
    let opts = RunOptions {
        record_trace: true,
        reset_interval: Some(512),
        ..RunOptions::default()
    };
    let run = run_episode(params, &episode, &opts, false)?;

    let n_units = match source {
        UnitSource::PositionUnit => params.cfg.n_g,
        UnitSource::MemoryNeuron => run.store.len(),
    };
    let activity: Vec<Vec<f64>> = run
        .trace
        .iter()
        .map(|r| match source {
            UnitSource::PositionUnit => r.position.g.clone(),
            UnitSource::MemoryNeuron => r.attn_weights.clone(),
        })
        .collect();
    let (raw, visits) =
        rate_maps_from_activity(&activity, &episode.node_trace, n_units, env.n_nodes());
    let coords = env.coords();
    let valid: Vec<bool> = visits.iter().map(|&v| v > 0).collect();
    let unvisited = valid.iter().filter(|v| !**v).count();
    let maps: Vec<Vec<f64>> = raw
        .iter()
        .map(|m| smooth_rate_map(m, &coords, &valid, sigma))
        .collect();
    Ok(RateMapSet {
        source,
        neighbors: env.neighbors(),
        coords,
        visits,
        valid,
        raw,
        maps,
        sigma,
        unvisited_warning: unvisited * 10 > env.n_nodes(),
    })
}

// ── connected components and place score ────────────────────────────

/// Connected components of the included nodes under the given adjacency.
pub fn connected_components(include: &[bool], neighbors: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = include.len();
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if !include[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(node) = stack.pop() {
            comp.push(node);
            for &next in &neighbors[node] {
                if include[next] && !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// Share of firing mass in the largest connected suprathreshold
/// component: 1 iff all firing above `threshold_frac * peak` sits in one
/// component. Undefined (None) for all-zero or negative-peak maps.
pub fn place_score(
    map: &[f64],
    neighbors: &[Vec<usize>],
    valid: &[bool],
    threshold_frac: f64,
) -> Option<f64> {
    let peak = map
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(m, _)| *m)
        .fold(f64::NEG_INFINITY, f64::max);
    if peak.is_nan() || peak <= 0.0 {
        return None;
    }
    let threshold = threshold_frac * peak;
    let include: Vec<bool> = map
        .iter()
        .zip(valid)
        .map(|(&m, &v)| v && m >= threshold)
        .collect();
    let components = connected_components(&include, neighbors);
    if components.is_empty() {
        return None;
    }
    let masses: Vec<f64> = components
        .iter()
        .map(|c| c.iter().map(|&n| map[n]).sum())
        .collect();
    let total: f64 = masses.iter().sum();
    let largest = masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(largest / total)
}

// ── grid score ──────────────────────────────────────────────────────

struct Raster {
    w: usize,
    h: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl Raster {
    fn at(&self, x: usize, y: usize) -> (f64, bool) {
        let i = y * self.w + x;
        (self.values[i], self.valid[i])
    }
}

/// Integer-lattice maps rasterise exactly at one pixel per node; other
/// geometries (hex) are resampled onto a half-unit grid by inverse
/// distance weighting over nearby nodes.
fn rasterize(map: &[f64], coords: &[(f64, f64)], valid: &[bool]) -> Option<Raster> {
    let pts: Vec<(f64, f64, f64)> = coords
        .iter()
        .zip(map)
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(((x, y), m), _)| (*x, *y, *m))
        .collect();
    if pts.len() < 4 {
        return None;
    }
    let integral = pts
        .iter()
        .all(|(x, y, _)| (x - x.round()).abs() < 1e-9 && (y - y.round()).abs() < 1e-9);
    if integral {
        let min_x = pts.iter().map(|p| p.0.round() as i64).min().unwrap();
        let min_y = pts.iter().map(|p| p.1.round() as i64).min().unwrap();
        let max_x = pts.iter().map(|p| p.0.round() as i64).max().unwrap();
        let max_y = pts.iter().map(|p| p.1.round() as i64).max().unwrap();
        let w = (max_x - min_x + 1) as usize;
        let h = (max_y - min_y + 1) as usize;
        let mut values = vec![0.0; w * h];
        let mut valid_px = vec![false; w * h];
        for (x, y, m) in pts {
            let i = (y.round() as i64 - min_y) as usize * w + (x.round() as i64 - min_x) as usize;
            values[i] = m;
            valid_px[i] = true;
        }
        return Some(Raster {
            w,
            h,
            values,
            valid: valid_px,
        });
    }

    let px = 0.5;
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let w = ((max_x - min_x) / px).round() as usize + 1;
    let h = ((max_y - min_y) / px).round() as usize + 1;
    let mut values = vec![0.0; w * h];
    let mut valid_px = vec![false; w * h];
    for gy in 0..h {
        for gx in 0..w {
            let cx = min_x + gx as f64 * px;
            let cy = min_y + gy as f64 * px;
            let mut num = 0.0;
            let mut den = 0.0;
            let mut hit = None;
            for (x, y, m) in &pts {
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                if d2 < 1e-12 {
                    hit = Some(*m);
                    break;
                }
                if d2 <= 1.0 {
                    let wgt = 1.0 / d2;
                    num += wgt * m;
                    den += wgt;
                }
            }
            let i = gy * w + gx;
            if let Some(m) = hit {
                values[i] = m;
                valid_px[i] = true;
            } else if den > 0.0 {
                values[i] = num / den;
                valid_px[i] = true;
            }
        }
    }
    Some(Raster {
        w,
        h,
        values,
        valid: valid_px,
    })
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return None;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx < 1e-12 || syy < 1e-12 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

struct Autocorrelogram {
    half_w: isize,
    half_h: isize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl Autocorrelogram {
    fn width(&self) -> usize {
        (2 * self.half_w + 1) as usize
    }

    fn index(&self, dx: isize, dy: isize) -> usize {
        ((dy + self.half_h) as usize) * self.width() + (dx + self.half_w) as usize
    }

    fn at(&self, dx: isize, dy: isize) -> Option<f64> {
        if dx.abs() > self.half_w || dy.abs() > self.half_h {
            return None;
        }
        let i = self.index(dx, dy);
        self.valid[i].then(|| self.values[i])
    }

    /// Bilinear sample at a real-valued offset; all four neighbors must be
    /// valid.
    fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let v00 = self.at(x0 as isize, y0 as isize)?;
        let v10 = self.at(x0 as isize + 1, y0 as isize)?;
        let v01 = self.at(x0 as isize, y0 as isize + 1)?;
        let v11 = self.at(x0 as isize + 1, y0 as isize + 1)?;
        Some(
            v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy,
        )
    }
}

const MIN_OVERLAP_PAIRS: usize = 20;
const MIN_ANNULUS_POINTS: usize = 30;

fn autocorrelogram(r: &Raster) -> Autocorrelogram {
    let half_w = r.w as isize - 1;
    let half_h = r.h as isize - 1;
    let wi = (2 * half_w + 1) as usize;
    let hi = (2 * half_h + 1) as usize;
    let mut values = vec![0.0; wi * hi];
    let mut valid = vec![false; wi * hi];
    for dy in -half_h..=half_h {
        for dx in -half_w..=half_w {
            let mut pairs = Vec::new();
            for y in 0..r.h as isize {
                let y2 = y + dy;
                if y2 < 0 || y2 >= r.h as isize {
                    continue;
                }
                for x in 0..r.w as isize {
                    let x2 = x + dx;
                    if x2 < 0 || x2 >= r.w as isize {
                        continue;
                    }
                    let (a, va) = r.at(x as usize, y as usize);
                    let (b, vb) = r.at(x2 as usize, y2 as usize);
                    if va && vb {
                        pairs.push((a, b));
                    }
                }
            }
            if pairs.len() >= MIN_OVERLAP_PAIRS {
                if let Some(c) = pearson(&pairs) {
                    let i = ((dy + half_h) as usize) * wi + (dx + half_w) as usize;
                    values[i] = c;
                    valid[i] = true;
                }
            }
        }
    }
    Autocorrelogram {
        half_w,
        half_h,
        values,
        valid,
    }
}

/// Rotational-autocorrelation grid score in [-2, 2]; `None` when the map
/// is degenerate (constant, too small, or without a central-peak zero
/// crossing). Pixel units are lattice units for square maps and half
/// units for resampled hex maps.
pub fn grid_score(map: &[f64], coords: &[(f64, f64)], valid: &[bool]) -> Option<f64> {
    let raster = rasterize(map, coords, valid)?;
    if raster.w < 5 || raster.h < 5 {
        return None;
    }
    let ac = autocorrelogram(&raster);
    let r_max = (ac.half_w.min(ac.half_h)) as f64;

    // Inner annulus radius: first ring whose mean correlation crosses zero.
    let mut r_in = None;
    let mut r = 1.0;
    while r <= r_max {
        let mut sum = 0.0;
        let mut count = 0;
        for dy in -ac.half_h..=ac.half_h {
            for dx in -ac.half_w..=ac.half_w {
                let dist = ((dx * dx + dy * dy) as f64).sqrt();
                if (dist - r).abs() <= 0.5 {
                    if let Some(v) = ac.at(dx, dy) {
                        sum += v;
                        count += 1;
                    }
                }
            }
        }
        if count > 0 && (sum / count as f64) < 0.0 {
            r_in = Some(r);
            break;
        }
        r += 1.0;
    }
    let r_in = r_in?;

    let angles = [30.0f64, 60.0, 90.0, 120.0, 150.0];
    let mut best: Option<f64> = None;
    let mut r_out = r_in + 2.0;
    while r_out <= r_max {
        let mut annulus = Vec::new();
        for dy in -ac.half_h..=ac.half_h {
            for dx in -ac.half_w..=ac.half_w {
                let dist = ((dx * dx + dy * dy) as f64).sqrt();
                if dist > r_in && dist <= r_out && ac.at(dx, dy).is_some() {
                    annulus.push((dx, dy));
                }
            }
        }
        if annulus.len() >= MIN_ANNULUS_POINTS {
            let mut corrs = Vec::with_capacity(angles.len());
            for angle in angles {
                let rad = angle.to_radians();
                let (sin, cos) = rad.sin_cos();
                let mut pairs = Vec::new();
                for &(dx, dy) in &annulus {
                    let (x, y) = (dx as f64, dy as f64);
                    let rx = x * cos - y * sin;
                    let ry = x * sin + y * cos;
                    if let (Some(a), Some(b)) = (ac.at(dx, dy), ac.sample(rx, ry)) {
                        pairs.push((a, b));
                    }
                }
                if pairs.len() < MIN_ANNULUS_POINTS {
                    corrs.clear();
                    break;
                }
                match pearson(&pairs) {
                    Some(c) => corrs.push(c),
                    None => {
                        corrs.clear();
                        break;
                    }
                }
            }
            if corrs.len() == angles.len() {
                let hex = corrs[1].min(corrs[3]);
                let square = corrs[0].max(corrs[2]).max(corrs[4]);
                let score = hex - square;
                best = Some(best.map_or(score, |b: f64| b.max(score)));
            }
        }
        r_out += 1.0;
    }
    best
}

// ── score table ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub unit: usize,
    pub grid: Option<f64>,
    pub place: Option<f64>,
    pub peak: f64,
    pub active: bool,
}

/// Scores every unit. A unit is active when its peak rate exceeds
/// `active_frac` of the population's maximum peak. Place scores are only
/// defined for nonnegative maps.
pub fn score_table(set: &RateMapSet, active_frac: f64, place_frac: f64) -> Vec<ScoreRow> {
    let peaks: Vec<f64> = set
        .maps
        .iter()
        .map(|m| {
            m.iter()
                .zip(&set.valid)
                .filter(|(_, &v)| v)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let pop_max = peaks.iter().cloned().fold(0.0f64, f64::max);
    set.maps
        .iter()
        .enumerate()
        .map(|(unit, map)| {
            let nonneg = map.iter().all(|&v| v >= 0.0);
            ScoreRow {
                unit,
                grid: grid_score(map, &set.coords, &set.valid),
                place: if nonneg {
                    place_score(map, &set.neighbors, &set.valid, place_frac)
                } else {
                    None
                },
                peak: peaks[unit],
                active: pop_max > 0.0 && peaks[unit] > active_frac * pop_max,
            }
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

#[derive(Debug, Clone)]
pub struct PlacePermutation {
    pub observed_median: f64,
    pub null_medians: Vec<f64>,
    pub p_value: f64,
    pub n_units: usize,
}

/// Permutation control for place structure: each shuffle permutes every
/// unit's smoothed map over visited nodes, preserving the value
/// distribution while destroying spatial contiguity. The p-value is the
/// share of shuffles whose median place score reaches the observed
/// median.
pub fn place_score_permutation_test(
    set: &RateMapSet,
    place_frac: f64,
    n_shuffles: usize,
    seed: u64,
) -> PlacePermutation {
    let visited: Vec<usize> = (0..set.valid.len()).filter(|&n| set.valid[n]).collect();
    let observed: Vec<f64> = set
        .maps
        .iter()
        .filter_map(|m| place_score(m, &set.neighbors, &set.valid, place_frac))
        .collect();
    let observed_median = median(&observed).unwrap_or(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null_medians = Vec::with_capacity(n_shuffles);
    for _ in 0..n_shuffles {
        let mut scores = Vec::with_capacity(set.maps.len());
        for map in &set.maps {
            let mut perm = visited.clone();
            for i in (1..perm.len()).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut shuffled = vec![0.0; map.len()];
            for (slot, &src) in visited.iter().zip(&perm) {
                shuffled[*slot] = map[src];
            }
            if let Some(s) = place_score(&shuffled, &set.neighbors, &set.valid, place_frac) {
                scores.push(s);
            }
        }
        null_medians.push(median(&scores).unwrap_or(0.0));
    }
    let ge = null_medians
        .iter()
        .filter(|&&m| m >= observed_median)
        .count();
    PlacePermutation {
        observed_median,
        p_value: (1 + ge) as f64 / (1 + n_shuffles) as f64,
        null_medians,
        n_units: observed.len(),
    }
}

// ── remapping ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RemappingReport {
    /// Mean per-unit Pearson correlation of position-unit maps across
    /// environment pairs (node ids correspond spatially).
    pub position_map_corr: f64,
    /// Pearson correlation of memory-neuron pairwise peak distances
    /// across environment pairs; near zero under random remapping.
    pub memory_distance_corr: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    /// Two-sided permutation p-value for the distance correlation.
    pub p_value: f64,
    pub n_common_neurons: usize,
}

fn peak_node(map: &[f64], valid: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (n, (&m, &v)) in map.iter().zip(valid).enumerate() {
        if v && m > 0.0 && best.is_none_or(|(_, bm)| m > bm) {
            best = Some((n, m));
        }
    }
    best.map(|(n, _)| n)
}

fn pairwise_distances(peaks: &[usize], coords: &[(f64, f64)]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..peaks.len() {
        for j in (i + 1)..peaks.len() {
            let (ax, ay) = coords[peaks[i]];
            let (bx, by) = coords[peaks[j]];
            out.push(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt());
        }
    }
    out
}

/// Memory slots are indexed by addition order, and discovery order shares
/// geometry across environments (hard-to-reach nodes are stored late
/// everywhere), so a full-shuffle null would flag that shared trend as
/// preserved identity. Shuffling within blocks of adjacent ranks keeps
/// the coarse rank structure while destroying per-neuron correspondence.
const RANK_SHUFFLE_BLOCK: usize = 8;

fn block_shuffle<T, R: Rng>(items: &mut [T], block: usize, rng: &mut R) {
    let mut start = 0;
    while start < items.len() {
        let end = (start + block).min(items.len());
        let window = &mut items[start..end];
        for i in (1..window.len()).rev() {
            let j = rng.random_range(0..=i);
            window.swap(i, j);
        }
        start = end;
    }
}

/// Compares representations across environments with shared structure:
/// position units should preserve their spatial maps (high map
/// correlation) while memory neurons should remap randomly (pairwise
/// peak-distance correlation inside the permutation null).
pub fn remapping_stats(
    params: &ModelParams,
    envs: &[Environment],
    n_steps: usize,
    seed: u64,
    n_permutations: usize,
) -> Result<RemappingReport> {
    if envs.len() < 2 {
        return Err(Error::Param("remapping needs at least 2 environments".into()));
    }
    let mut position_sets = Vec::with_capacity(envs.len());
    let mut memory_sets = Vec::with_capacity(envs.len());
    for (i, env) in envs.iter().enumerate() {
        let walk_seed = mix_seed(seed, 0x0a, i as u64, 0);
        position_sets.push(collect_rate_maps(
            params,
            env,
            n_steps,
            walk_seed,
            UnitSource::PositionUnit,
            1.0,
        )?);
        memory_sets.push(collect_rate_maps(
            params,
            env,
            n_steps,
            walk_seed,
            UnitSource::MemoryNeuron,
            1.0,
        )?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0b, 0, 0));
    let mut map_corrs = Vec::new();
    let mut dist_corrs = Vec::new();
    let mut null_corrs = Vec::new();
    let mut n_common = usize::MAX;
    for a in 0..envs.len() {
        for b in (a + 1)..envs.len() {
            // Position units: same unit, same node ids, across stimuli.
            for u in 0..params.cfg.n_g {
                let pairs: Vec<(f64, f64)> = (0..envs[a].n_nodes())
                    .filter(|&n| position_sets[a].valid[n] && position_sets[b].valid[n])
                    .map(|n| (position_sets[a].maps[u][n], position_sets[b].maps[u][n]))
                    .collect();
                if let Some(c) = pearson(&pairs) {
                    map_corrs.push(c);
                }
            }

            // Memory neurons: slot index is the only correspondence.
            let common = memory_sets[a]
                .n_units()
                .min(memory_sets[b].n_units());
            let peaks: Vec<(usize, usize)> = (0..common)
                .filter_map(|u| {
                    let pa = peak_node(&memory_sets[a].maps[u], &memory_sets[a].valid)?;
                    let pb = peak_node(&memory_sets[b].maps[u], &memory_sets[b].valid)?;
                    Some((pa, pb))
                })
                .collect();
            n_common = n_common.min(peaks.len());
            if peaks.len() >= 4 {
                let pa: Vec<usize> = peaks.iter().map(|p| p.0).collect();
                let pb: Vec<usize> = peaks.iter().map(|p| p.1).collect();
                let da = pairwise_distances(&pa, &envs[a].coords());
                let db = pairwise_distances(&pb, &envs[b].coords());
                let pairs: Vec<(f64, f64)> = da.iter().cloned().zip(db.iter().cloned()).collect();
                if let Some(c) = pearson(&pairs) {
                    dist_corrs.push(c);
                }
                for _ in 0..n_permutations {
                    let mut pb_null = pb.clone();
                    block_shuffle(&mut pb_null, RANK_SHUFFLE_BLOCK, &mut rng);
                    let db_p = pairwise_distances(&pb_null, &envs[b].coords());
                    let pairs: Vec<(f64, f64)> =
                        da.iter().cloned().zip(db_p.iter().cloned()).collect();
                    if let Some(c) = pearson(&pairs) {
                        null_corrs.push(c);
                    }
                }
            }
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let memory_distance_corr = mean(&dist_corrs);
    let null_mean = mean(&null_corrs);
    let null_sd = (null_corrs
        .iter()
        .map(|c| (c - null_mean) * (c - null_mean))
        .sum::<f64>()
        / null_corrs.len().max(1) as f64)
        .sqrt();
    let extreme = null_corrs
        .iter()
        .filter(|&&c| (c - null_mean).abs() >= (memory_distance_corr - null_mean).abs())
        .count();
    Ok(RemappingReport {
        position_map_corr: mean(&map_corrs),
        memory_distance_corr,
        null_mean,
        null_sd,
        p_value: (1 + extreme) as f64 / (1 + null_corrs.len()) as f64,
        n_common_neurons: if n_common == usize::MAX { 0 } else { n_common },
    })
}

// ── synthetic validation patterns ───────────────────────────────────

/// Sum of three plane-wave cosines 60 degrees apart, sampled on a square
/// lattice and shifted nonnegative; an ideal hexagonal firing pattern.
pub fn synthetic_hex_grating(
    width: usize,
    height: usize,
    period: f64,
) -> (Vec<(f64, f64)>, Vec<f64>) {
    let k = 2.0 * std::f64::consts::PI / period;
    let mut coords = Vec::with_capacity(width * height);
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            coords.push((x as f64, y as f64));
            let mut v = 0.0;
            for angle in [0.0f64, 60.0, 120.0] {
                let rad = angle.to_radians();
                v += (k * (x as f64 * rad.cos() + y as f64 * rad.sin())).cos();
            }
            values.push(v + 3.0);
        }
    }
    (coords, values)
}

/// Square grating (peaks on a square lattice), shifted nonnegative.
pub fn synthetic_square_grating(
    width: usize,
    height: usize,
    period: f64,
) -> (Vec<(f64, f64)>, Vec<f64>) {
    let k = 2.0 * std::f64::consts::PI / period;
    let mut coords = Vec::with_capacity(width * height);
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            coords.push((x as f64, y as f64));
            values.push((k * x as f64).cos() + (k * y as f64).cos() + 2.0);
        }
    }
    (coords, values)
}

/// Self-validation of the scoring pipeline on synthetic patterns with
/// known answers: an ideal hexagonal grating must score above 0.5, a
/// square grating below 0, and a 3:1:1 three-blob map must have place
/// score exactly 0.6.
#[derive(Debug, Clone)]
pub struct ScoringPipelineReport {
    pub hex_grid_score: f64,
    pub square_grid_score: f64,
    pub blob_place_score: f64,
    pub passed: bool,
}

impl ScoringPipelineReport {
    pub fn summary(&self) -> String {
        format!(
            "scoring pipeline: hex grid {:.3} (> 0.5), square grid {:.3} (< 0), 3:1:1 place {:.10} (= 0.6): {}",
            self.hex_grid_score,
            self.square_grid_score,
            self.blob_place_score,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn verify_scoring_pipeline() -> ScoringPipelineReport {
    let (coords, hex) = synthetic_hex_grating(20, 20, 4.0);
    let valid = vec![true; coords.len()];
    let hex_grid_score = grid_score(&hex, &coords, &valid).unwrap_or(f64::NAN);
    let (coords_sq, square) = synthetic_square_grating(20, 20, 4.0);
    let square_grid_score = grid_score(&square, &coords_sq, &valid).unwrap_or(f64::NAN);

    let env = crate::envgen::generate_environment(crate::envgen::Topology::Square4, 10, 10, 2, 0)
        .expect("static lattice");
    let coords = env.coords();
    let neighbors = env.neighbors();
    let node_at = |x: usize, y: usize| {
        coords
            .iter()
            .position(|&(cx, cy)| cx == x as f64 && cy == y as f64)
            .unwrap()
    };
    let mut blob = vec![0.0; env.n_nodes()];
    blob[node_at(1, 1)] = 3.0;
    blob[node_at(5, 5)] = 1.0;
    blob[node_at(8, 1)] = 1.0;
    let blob_place_score =
        place_score(&blob, &neighbors, &vec![true; env.n_nodes()], 0.2).unwrap_or(f64::NAN);

    let passed = hex_grid_score > 0.5
        && square_grid_score < 0.0
        && (blob_place_score - 0.6).abs() < 1e-9;
    ScoringPipelineReport {
        hex_grid_score,
        square_grid_score,
        blob_place_score,
        passed,
    }
}

// ── export ──────────────────────────────────────────────────────────

/// Renders one map as a binary 8-bit PGM, `block x block` pixels per
/// raster cell. Intensity mapping: 0 for invalid cells, otherwise
/// `round(255 * (v - min) / (max - min))` over valid cells (a constant
/// map renders as full white).
pub fn render_pgm(map: &[f64], coords: &[(f64, f64)], valid: &[bool], block: usize) -> Option<Vec<u8>> {
    let raster = rasterize(map, coords, valid)?;
    let w = raster.w * block;
    let h = raster.h * block;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (v, &ok) in raster.values.iter().zip(&raster.valid) {
        if ok {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = hi - lo;
    let mut pixels = vec![0u8; w * h];
    for gy in 0..raster.h {
        for gx in 0..raster.w {
            let (v, ok) = raster.at(gx, gy);
            if !ok {
                continue;
            }
            let shade = if span <= 0.0 {
                255
            } else {
                ((v - lo) / span * 255.0).round() as u8
            };
            // Raster row 0 is the minimum y; render with y up.
            let py0 = (raster.h - 1 - gy) * block;
            for by in 0..block {
                for bx in 0..block {
                    pixels[(py0 + by) * w + gx * block + bx] = shade;
                }
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Some(out)
}

/// Writes per-unit heatmaps, the score table CSV, and a score histogram
/// CSV under `dir`. Returns the paths written.
pub fn export_figures(
    set: &RateMapSet,
    scores: &[ScoreRow],
    dir: &Path,
    block: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (unit, map) in set.maps.iter().enumerate() {
        if let Some(bytes) = render_pgm(map, &set.coords, &set.valid, block) {
            let path = dir.join(format!("{}_{unit:04}.pgm", set.source.name()));
            std::fs::write(&path, bytes)?;
            written.push(path);
        }
    }

    let mut csv = String::from("unit,grid_score,place_score,peak,active\n");
    for row in scores {
        let grid = row.grid.map(|g| g.to_string()).unwrap_or_default();
        let place = row.place.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{}", row.unit, grid, place, row.peak, row.active);
    }
    let path = dir.join(format!("{}_scores.csv", set.source.name()));
    std::fs::write(&path, csv)?;
    written.push(path);

    let mut hist = String::from("bin_low,bin_high,grid_count,place_count\n");
    let bins = 16;
    let (lo, hi) = (-2.0, 2.0);
    let width = (hi - lo) / bins as f64;
    for b in 0..bins {
        let bin_lo = lo + b as f64 * width;
        let bin_hi = bin_lo + width;
        let gc = scores
            .iter()
            .filter_map(|r| r.grid)
            .filter(|&g| g >= bin_lo && g < bin_hi)
            .count();
        let pc = scores
            .iter()
            .filter_map(|r| r.place)
            .filter(|&p| p >= bin_lo && p < bin_hi)
            .count();
        let _ = writeln!(hist, "{bin_lo},{bin_hi},{gc},{pc}");
    }
    let path = dir.join(format!("{}_score_histogram.csv", set.source.name()));
    std::fs::write(&path, hist)?;
    written.push(path);
    Ok(written)
}
