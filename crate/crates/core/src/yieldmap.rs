//! Multi-view count aggregation and two-sided yield merging.
//!
//! A cluster track is one physical fruit cluster seen in several frames. Its
//! count is the median over the three observations with the most apple
//! pixels. A tree row is mapped from both sides; clusters seen from both sides
//! are found through the intersection of their 3-D extents and deduplicated
//! with an inclusion-exclusion style deduction per connected overlap group.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::count::{ClusterPatch, MAX_COUNT};
use crate::imaging::{BinaryMask, BoundingBox, RgbImage};

#[derive(Debug, Error, PartialEq)]
pub enum YieldError {
    #[error("track {0:?} has no observations")]
    EmptyTrack(String),
    #[error("track {0:?} has an extent without positive volume")]
    DegenerateExtent(String),
    #[error("track {track:?} observes frame {frame:?} twice")]
    DuplicateFrame { track: String, frame: String },
    #[error("cluster id {0:?} appears twice on one side")]
    DuplicateCluster(String),
    #[error("track {0:?} has no resolved count")]
    Unresolved(String),
    #[error("overlap references unknown {side} cluster {id:?}")]
    DanglingReference { side: Side, id: String },
    #[error("overlap {front:?}/{back:?} has volume {volume} exceeding the smaller extent")]
    OverlapTooLarge { front: String, back: String, volume: f64 },
    #[error("harvested count must be at least 1")]
    ZeroHarvest,
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Front,
    Back,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Front => "front",
            Side::Back => "back",
        })
    }
}

/// Axis-aligned box in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent3 {
    pub fn volume(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0)).product()
    }

    pub fn intersection_volume(&self, other: &Extent3) -> f64 {
        (0..3)
            .map(|i| (self.max[i].min(other.max[i]) - self.min[i].max(other.min[i])).max(0.0))
            .product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSource {
    Patch(ClusterPatch),
    /// Count produced elsewhere, e.g. by an external counter.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackObservation {
    pub frame: String,
    /// Segmented apple pixels of the cluster in this frame.
    pub area: usize,
    pub source: ObservationSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrack {
    pub id: String,
    pub observations: Vec<TrackObservation>,
    pub extent: Extent3,
    #[serde(default)]
    pub on_ground: bool,
    #[serde(default)]
    pub background: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

impl ClusterTrack {
    pub fn validate(&self) -> Result<(), YieldError> {
        if self.observations.is_empty() {
            return Err(YieldError::EmptyTrack(self.id.clone()));
        }
        if !(self.extent.volume() > 0.0) {
            return Err(YieldError::DegenerateExtent(self.id.clone()));
        }
        let mut seen = HashSet::new();
        for o in &self.observations {
            if !seen.insert(o.frame.as_str()) {
                return Err(YieldError::DuplicateFrame {
                    track: self.id.clone(),
                    frame: o.frame.clone(),
                });
            }
        }
        Ok(())
    }

    fn resolved(&self) -> Result<usize, YieldError> {
        self.count.ok_or_else(|| YieldError::Unresolved(self.id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideModel {
    pub side: Side,
    pub tracks: Vec<ClusterTrack>,
}

impl SideModel {
    pub fn validate(&self) -> Result<(), YieldError> {
        let mut ids = HashSet::new();
        for t in &self.tracks {
            t.validate()?;
            if !ids.insert(t.id.as_str()) {
                return Err(YieldError::DuplicateCluster(t.id.clone()));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> Result<usize, YieldError> {
        self.tracks.iter().map(ClusterTrack::resolved).sum()
    }

    /// Sets every track's count with `counter` applied to its observations.
    pub fn resolve_counts<F>(&mut self, counter: F)
    where
        F: Fn(&TrackObservation) -> usize + Sync,
    {
        self.tracks
            .par_iter_mut()
            .for_each(|t| t.count = Some(aggregate_track_count(t, &counter)));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub front: String,
    pub back: String,
    pub volume: f64,
}

/// Median count over the (up to) three observations with the largest area.
/// Ties in area go to the lexicographically earlier frame id. Counts above
/// the class ceiling are clipped.
pub fn aggregate_track_count<F>(track: &ClusterTrack, counter: F) -> usize
where
    F: Fn(&TrackObservation) -> usize,
{
    let mut order: Vec<&TrackObservation> = track.observations.iter().collect();
    order.sort_by(|a, b| b.area.cmp(&a.area).then_with(|| a.frame.cmp(&b.frame)));
    let mut counts: Vec<usize> = order
        .into_iter()
        .take(3)
        .map(|o| counter(o).min(MAX_COUNT))
        .collect();
    if counts.is_empty() {
        return 0;
    }
    counts.sort_unstable();
    counts[(counts.len() - 1) / 2]
}

/// Drops tracks flagged as fallen fruit or as belonging to another row.
pub fn filter_ground_and_background(tracks: Vec<ClusterTrack>) -> Vec<ClusterTrack> {
    tracks.into_iter().filter(|t| !t.on_ground && !t.background).collect()
}

pub fn sum_single_sides(front: &SideModel, back: &SideModel) -> Result<usize, YieldError> {
    Ok(front.total()? + back.total()?)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Checks overlap references and volumes and returns, per record, the
/// (front index, back index) pair.
fn resolve_overlaps(front: &SideModel, back: &SideModel, overlaps: &[OverlapRecord]) -> Result<Vec<(usize, usize)>, YieldError> {
    let fi: HashMap<&str, usize> = front.tracks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let bi: HashMap<&str, usize> = back.tracks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    overlaps
        .iter()
        .map(|o| {
            let f = *fi.get(o.front.as_str()).ok_or_else(|| YieldError::DanglingReference {
                side: Side::Front,
                id: o.front.clone(),
            })?;
            let b = *bi.get(o.back.as_str()).ok_or_else(|| YieldError::DanglingReference {
                side: Side::Back,
                id: o.back.clone(),
            })?;
            let limit = front.tracks[f].extent.volume().min(back.tracks[b].extent.volume());
            if !(o.volume >= 0.0) || o.volume > limit * (1.0 + 1e-9) {
                return Err(YieldError::OverlapTooLarge {
                    front: o.front.clone(),
                    back: o.back.clone(),
                    volume: o.volume,
                });
            }
            Ok((f, b))
        })
        .collect()
}

/// Per connected overlap group: fruits seen twice, estimated as
/// `min(front count, back count)` scaled by the intersection volume relative
/// to the smaller of the two side extents, rounded half up.
fn group_deductions(front: &SideModel, back: &SideModel, overlaps: &[OverlapRecord], pairs: &[(usize, usize)]) -> Result<Vec<usize>, YieldError> {
    let nf = front.tracks.len();
    let mut parent: Vec<usize> = (0..nf + back.tracks.len()).collect();
    for &(f, b) in pairs {
        let (rf, rb) = (find(&mut parent, f), find(&mut parent, nf + b));
        if rf != rb {
            parent[rf.max(rb)] = rf.min(rb);
        }
    }
    #[derive(Default)]
    struct Group {
        front_count: usize,
        back_count: usize,
        front_volume: f64,
        back_volume: f64,
        intersection: f64,
        linked: bool,
    }
    let mut groups: BTreeMap<usize, Group> = BTreeMap::new();
    for (i, t) in front.tracks.iter().enumerate() {
        let g = groups.entry(find(&mut parent, i)).or_default();
        g.front_count += t.resolved()?;
        g.front_volume += t.extent.volume();
    }
    for (i, t) in back.tracks.iter().enumerate() {
        let g = groups.entry(find(&mut parent, nf + i)).or_default();
        g.back_count += t.resolved()?;
        g.back_volume += t.extent.volume();
    }
    for (o, &(f, _)) in overlaps.iter().zip(pairs) {
        let g = groups.get_mut(&find(&mut parent, f)).expect("group exists");
        g.intersection += o.volume;
        g.linked = true;
    }
    Ok(groups
        .into_values()
        .filter(|g| g.linked)
        .map(|g| {
            let smaller = g.front_volume.min(g.back_volume);
            let fraction = if smaller > 0.0 { (g.intersection / smaller).min(1.0) } else { 0.0 };
            let shared = g.front_count.min(g.back_count) as f64 * fraction;
            (shared + 0.5).floor() as usize
        })
        .collect())
}

/// Two-sided total with double-counted fruits removed. The result never
/// drops below either side alone nor exceeds their sum.
pub fn merge_sides(front: &SideModel, back: &SideModel, overlaps: &[OverlapRecord]) -> Result<usize, YieldError> {
    let (sf, sb) = (front.total()?, back.total()?);
    let pairs = resolve_overlaps(front, back, overlaps)?;
    let deduction: usize = group_deductions(front, back, overlaps, &pairs)?.into_iter().sum();
    Ok((sf + sb).saturating_sub(deduction).max(sf.max(sb)))
}

/// Intersections between every front and back extent that touch.
pub fn compute_overlaps(front: &SideModel, back: &SideModel) -> Vec<OverlapRecord> {
    let mut out = Vec::new();
    for f in &front.tracks {
        for b in &back.tracks {
            let volume = f.extent.intersection_volume(&b.extent);
            if volume > 0.0 {
                out.push(OverlapRecord {
                    front: f.id.clone(),
                    back: b.id.clone(),
                    volume,
                });
            }
        }
    }
    out
}

/// Estimated count as a percentage of the harvested count, rounded half up
/// to two decimals.
pub fn yield_accuracy(estimated: usize, harvested: usize) -> Result<f64, YieldError> {
    if harvested == 0 {
        return Err(YieldError::ZeroHarvest);
    }
    let (e, h) = (estimated as u128, harvested as u128);
    let hundredths = (e * 20_000 + h) / (2 * h);
    Ok(hundredths as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    pub dataset: String,
    /// Counting method the numbers come from, e.g. "GMM".
    pub method: String,
    pub front_sum: usize,
    pub back_sum: usize,
    pub single_side_sum: usize,
    pub merged: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harvested: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub single_side_accuracy: Option<f64>,
}

impl YieldReport {
    pub fn build(
        dataset: impl Into<String>,
        method: impl Into<String>,
        front: &SideModel,
        back: &SideModel,
        overlaps: &[OverlapRecord],
        harvested: Option<usize>,
    ) -> Result<Self, YieldError> {
        let (front_sum, back_sum) = (front.total()?, back.total()?);
        let merged = merge_sides(front, back, overlaps)?;
        let single = front_sum + back_sum;
        let (merged_accuracy, single_side_accuracy) = match harvested {
            Some(h) => (Some(yield_accuracy(merged, h)?), Some(yield_accuracy(single, h)?)),
            None => (None, None),
        };
        Ok(Self {
            dataset: dataset.into(),
            method: method.into(),
            front_sum,
            back_sum,
            single_side_sum: single,
            merged,
            harvested,
            merged_accuracy,
            single_side_accuracy,
        })
    }

    /// `"256 (94.81%)"`, or the bare count when nothing was harvested.
    pub fn merged_cell(&self) -> String {
        cell(self.merged, self.merged_accuracy)
    }

    pub fn single_side_cell(&self) -> String {
        cell(self.single_side_sum, self.single_side_accuracy)
    }
}

fn cell(count: usize, accuracy: Option<f64>) -> String {
    match accuracy {
        Some(a) => format!("{count} ({a:.2}%)"),
        None => count.to_string(),
    }
}

/// Plain-text table with one row per report.
pub fn render_yield_table(reports: &[YieldReport]) -> String {
    let header = ["Dataset", "Method", "Harvested FCs", "Merged FCs from both sides", "Sum of FCs from single sides"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.method.clone(),
                r.harvested.map_or_else(|| "-".to_string(), |h| h.to_string()),
                r.merged_cell(),
                r.single_side_cell(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..5)
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap())
        .collect();
    let line = |cells: &[&str]| {
        let mut s = String::from("|");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(s, " {c:<w$} |");
        }
        s.push('\n');
        s
    };
    let rule: String = {
        let mut s = String::from("|");
        for w in &widths {
            s.push_str(&"-".repeat(w + 2));
            s.push('|');
        }
        s.push('\n');
        s
    };
    let mut out = line(&header);
    out.push_str(&rule);
    for r in &rows {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub trees: usize,
    pub fruits_per_tree: usize,
    /// Probability that a cluster is visible from both sides.
    pub both_side_fraction: f64,
    /// Probability that a fruit is hidden from a given side.
    pub occlusion_rate: f64,
    /// Fallen-fruit tracks added per tree, flagged `on_ground`.
    pub ground_tracks_per_tree: usize,
    pub views_per_track: usize,
    /// Side length of the rendered square frames, in pixels.
    pub frame_size: u32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            trees: 4,
            fruits_per_tree: 30,
            both_side_fraction: 0.5,
            occlusion_rate: 0.05,
            ground_tracks_per_tree: 1,
            views_per_track: 4,
            frame_size: 120,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), YieldError> {
        let bad = |m: &str| Err(YieldError::InvalidParams(m.to_string()));
        if self.trees == 0 || self.fruits_per_tree == 0 {
            return bad("trees and fruits_per_tree must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.both_side_fraction) || !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.views_per_track == 0 {
            return bad("views_per_track must be >= 1");
        }
        if self.frame_size < 120 {
            return bad("frame_size must be >= 120");
        }
        Ok(())
    }
}

/// One rendered frame with its ground-truth apple pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub id: String,
    pub image: RgbImage,
    pub apple_mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScene {
    /// Fruits on the trees; fallen fruit is not part of the yield.
    pub truth: usize,
    pub front: SideModel,
    pub back: SideModel,
    pub overlaps: Vec<OverlapRecord>,
    /// Rendered frames. Observation patches hold their ground-truth masks and
    /// every track's `count` is its true number of visible fruits.
    pub frames: Vec<SimFrame>,
}

pub const SIM_APPLE: [u8; 3] = [196, 32, 38];
pub const SIM_LEAF: [u8; 3] = [58, 128, 52];
pub const SIM_BRANCH: [u8; 3] = [104, 78, 52];

const FRUIT_RADIUS: (f64, f64) = (9.0, 12.0);
const CELL: f64 = 1.0;
const CLUSTER_SIZE: (f64, f64) = (0.4, 0.6);
const MAX_JITTER: f64 = 0.02;

struct SimCluster {
    /// Fruit layout in image space: (x, y, radius).
    fruits: Vec<(f64, f64, f64)>,
    hidden_front: Vec<bool>,
    hidden_back: Vec<bool>,
    extent: Extent3,
    front: bool,
    back: bool,
    on_ground: bool,
}

fn fruit_layout(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Vec<(f64, f64, f64)> {
    let margin = FRUIT_RADIUS.1 + 4.0;
    'attempt: loop {
        let mut fruits: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..200 {
                let r = rng.random_range(FRUIT_RADIUS.0..FRUIT_RADIUS.1);
                let c = (rng.random_range(margin..size - margin), rng.random_range(margin..size - margin));
                let clear = fruits
                    .iter()
                    .all(|&(x, y, s)| ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() >= 1.5 * (r + s));
                if clear {
                    fruits.push((c.0, c.1, r));
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }
        return fruits;
    }
}

fn jitter_extent(rng: &mut ChaCha8Rng, e: &Extent3) -> Extent3 {
    let mut out = *e;
    for i in 0..3 {
        let size = e.max[i] - e.min[i];
        let shift = rng.random_range(-MAX_JITTER..MAX_JITTER) * size;
        out.min[i] += shift;
        out.max[i] += shift;
    }
    out
}

fn noisy(rng: &mut ChaCha8Rng, base: [u8; 3], amp: i32) -> [u8; 3] {
    base.map(|c| (i32::from(c) + rng.random_range(-amp..=amp)).clamp(0, 255) as u8)
}

/// Renders the visible fruits of one view: leaves with noise, a branch band
/// and red discs. Returns the frame and its apple mask.
fn render_view(rng: &mut ChaCha8Rng, size: u32, fruits: &[(f64, f64, f64)], mirror: bool) -> (RgbImage, BinaryMask) {
    let dx = rng.random_range(-2.0..2.0);
    let dy = rng.random_range(-2.0..2.0);
    let placed: Vec<(f64, f64, f64)> = fruits
        .iter()
        .map(|&(x, y, r)| {
            let x = if mirror { size as f64 - 1.0 - x } else { x };
            (x + dx, y + dy, r)
        })
        .collect();
    let band = rng.random_range(0..size - 10);
    let shade: Vec<i32> = placed.iter().map(|_| rng.random_range(-6..=6)).collect();
    let inside = |x: u32, y: u32| {
        placed
            .iter()
            .position(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
    };
    let mask = BinaryMask::from_fn(size, size, |x, y| inside(x, y).is_some());
    let image = RgbImage::from_fn(size, size, |x, y| match inside(x, y) {
        Some(i) => {
            // Darker towards the rim.
            let (cx, cy, r) = placed[i];
            let rim = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (r * r);
            let factor = 1.0 - 0.3 * rim;
            let base = SIM_APPLE.map(|c| ((f64::from(c) * factor) as i32 + shade[i]).clamp(0, 255) as u8);
            noisy(rng, base, 6)
        }
        None if (band..band + 8).contains(&y) => noisy(rng, SIM_BRANCH, 6),
        None => noisy(rng, SIM_LEAF, 8),
    });
    (image, mask)
}

/// Deterministic synthetic orchard row seen from both sides.
pub fn simulate_scene(seed: u64, params: &SceneParams) -> Result<SimulatedScene, YieldError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = params.frame_size;
    let mut clusters = Vec::new();
    let mut truth = 0;
    for tree in 0..params.trees {
        let mut remaining = params.fruits_per_tree;
        let mut slot = 0usize;
        let place = |rng: &mut ChaCha8Rng, slot: usize, z0: f64| {
            // Clusters sit in a 4-wide grid of cells per tree, one per cell,
            // so extents of different clusters never touch.
            let origin = [tree as f64 * 5.0 * CELL + (slot % 4) as f64 * CELL, 0.0, z0 + (slot / 4) as f64 * CELL];
            let mut e = Extent3 { min: [0.0; 3], max: [0.0; 3] };
            for i in 0..3 {
                let len = rng.random_range(CLUSTER_SIZE.0..CLUSTER_SIZE.1);
                let lo = origin[i] + rng.random_range(0.1..(CELL - len - 0.1));
                e.min[i] = lo;
                e.max[i] = lo + len;
            }
            e
        };
        while remaining > 0 {
            let n = rng.random_range(1..=MAX_COUNT).min(remaining);
            remaining -= n;
            truth += n;
            let extent = place(&mut rng, slot, 1.0);
            slot += 1;
            let fruits = fruit_layout(&mut rng, n, size as f64);
            let hidden_front = (0..n).map(|_| rng.random_bool(params.occlusion_rate)).collect();
            let hidden_back = (0..n).map(|_| rng.random_bool(params.occlusion_rate)).collect();
            let (front, back) = if rng.random_bool(params.both_side_fraction) {
                (true, true)
            } else if rng.random_bool(0.5) {
                (true, false)
            } else {
                (false, true)
            };
            clusters.push(SimCluster {
                fruits,
                hidden_front,
                hidden_back,
                extent,
                front,
                back,
                on_ground: false,
            });
        }
        for g in 0..params.ground_tracks_per_tree {
            let n = rng.random_range(1..=2);
            let extent = place(&mut rng, g, -2.0);
            let fruits = fruit_layout(&mut rng, n, size as f64);
            let front = rng.random_bool(0.5);
            clusters.push(SimCluster {
                fruits,
                hidden_front: vec![false; n],
                hidden_back: vec![false; n],
                extent,
                front,
                back: !front,
                on_ground: true,
            });
        }
    }

    let mut frames = Vec::new();
    let mut sides = [Vec::new(), Vec::new()];
    for (ci, c) in clusters.iter().enumerate() {
        for (si, side) in [Side::Front, Side::Back].into_iter().enumerate() {
            let (visible, hidden) = match side {
                Side::Front => (c.front, &c.hidden_front),
                Side::Back => (c.back, &c.hidden_back),
            };
            let shown: Vec<(f64, f64, f64)> = c
                .fruits
                .iter()
                .zip(hidden)
                .filter(|(_, h)| !**h)
                .map(|(f, _)| *f)
                .collect();
            if !visible || shown.is_empty() {
                continue;
            }
            let id = format!("{side}-c{ci:04}");
            let extent = if side == Side::Back { jitter_extent(&mut rng, &c.extent) } else { c.extent };
            let mut observations = Vec::new();
            for v in 0..params.views_per_track {
                let frame = format!("{id}-v{v}");
                let (image, apple_mask) = render_view(&mut rng, size, &shown, side == Side::Back);
                let roi = apple_mask
                    .bounding_box()
                    .and_then(|b| {
                        BoundingBox::new(b.x.saturating_sub(4), b.y.saturating_sub(4), b.w + 8, b.h + 8).clamp_to(size, size)
                    })
                    .expect("visible fruits are rendered");
                let patch = ClusterPatch::from_frame_mask(frame.clone(), &apple_mask, roi);
                observations.push(TrackObservation {
                    frame: frame.clone(),
                    area: patch.area(),
                    source: ObservationSource::Patch(patch),
                });
                frames.push(SimFrame { id: frame, image, apple_mask });
            }
            sides[si].push(ClusterTrack {
                id,
                observations,
                extent,
                on_ground: c.on_ground,
                background: false,
                count: Some(shown.len()),
            });
        }
    }
    let [front, back] = sides;
    let front = SideModel { side: Side::Front, tracks: front };
    let back = SideModel { side: Side::Back, tracks: back };
    let overlaps = compute_overlaps(&front, &back);
    Ok(SimulatedScene {
        truth,
        front,
        back,
        overlaps,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(x: f64) -> Extent3 {
        Extent3 {
            min: [x, 0.0, 0.0],
            max: [x + 1.0, 1.0, 1.0],
        }
    }

    fn track(id: &str, count: usize, extent: Extent3) -> ClusterTrack {
        ClusterTrack {
            id: id.into(),
            observations: vec![TrackObservation {
                frame: "f".into(),
                area: 1,
                source: ObservationSource::Count(count),
            }],
            extent,
            on_ground: false,
            background: false,
            count: Some(count),
        }
    }

    fn side(side: Side, tracks: Vec<ClusterTrack>) -> SideModel {
        SideModel { side, tracks }
    }

    fn counted(obs: &[(usize, usize)]) -> ClusterTrack {
        ClusterTrack {
            observations: obs
                .iter()
                .enumerate()
                .map(|(i, &(area, c))| TrackObservation {
                    frame: format!("f{i}"),
                    area,
                    source: ObservationSource::Count(c),
                })
                .collect(),
            ..track("t", 0, cube(0.0))
        }
    }

    fn source_count(o: &TrackObservation) -> usize {
        match o.source {
            ObservationSource::Count(c) => c,
            ObservationSource::Patch(_) => unreachable!(),
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_track_count(&counted(&[(100, 3), (90, 3), (80, 4)]), source_count), 3);
        assert_eq!(aggregate_track_count(&counted(&[(7, 5)]), source_count), 5);
        let five = counted(&[(10, 9), (20, 1), (30, 2), (40, 3), (50, 4)]);
        assert_eq!(aggregate_track_count(&five, source_count), 3);
        assert_eq!(aggregate_track_count(&counted(&[(5, 2), (9, 4)]), source_count), 2);
        // Equal areas: earlier frame ids win.
        assert_eq!(aggregate_track_count(&counted(&[(5, 1), (5, 1), (5, 6), (5, 6)]), source_count), 1);
    }

    /// Brute force over all 3-subsets: the chosen subset maximises the sorted
    /// area vector.
    fn aggregate_oracle(obs: &[(usize, usize)]) -> usize {
        let n = obs.len();
        if n <= 3 {
            let mut c: Vec<usize> = obs.iter().map(|o| o.1.min(MAX_COUNT)).collect();
            c.sort();
            return c[(c.len() - 1) / 2];
        }
        let mut best: Option<(Vec<(usize, std::cmp::Reverse<usize>)>, [usize; 3])> = None;
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    let mut key: Vec<(usize, std::cmp::Reverse<usize>)> =
                        [a, b, c].iter().map(|&i| (obs[i].0, std::cmp::Reverse(i))).collect();
                    key.sort_by(|x, y| y.cmp(x));
                    if best.as_ref().is_none_or(|(k, _)| key > *k) {
                        best = Some((key, [a, b, c]));
                    }
                }
            }
        }
        let mut c: Vec<usize> = best.unwrap().1.iter().map(|&i| obs[i].1.min(MAX_COUNT)).collect();
        c.sort();
        c[1]
    }

    proptest! {
        #[test]
        fn aggregate_matches_subset_oracle(obs in proptest::collection::vec((0usize..20, 0usize..9), 1..8)) {
            prop_assert_eq!(aggregate_track_count(&counted(&obs), source_count), aggregate_oracle(&obs));
        }

        #[test]
        fn aggregate_ignores_order(obs in proptest::collection::vec((0usize..20, 0usize..9), 1..8), rot in 0usize..8) {
            let t = counted(&obs);
            let mut shuffled = t.clone();
            let len = shuffled.observations.len();
            shuffled.observations.rotate_left(rot % len);
            shuffled.observations.reverse();
            prop_assert_eq!(aggregate_track_count(&t, source_count), aggregate_track_count(&shuffled, source_count));
        }

        #[test]
        fn merge_is_symmetric_and_bounded(
            fc in proptest::collection::vec(0usize..7, 1..5),
            bc in proptest::collection::vec(0usize..7, 1..5),
            links in proptest::collection::vec((0usize..5, 0usize..5, 0.0f64..1.0), 0..6),
        ) {
            let front = side(Side::Front, fc.iter().enumerate().map(|(i, &c)| track(&format!("f{i}"), c, cube(i as f64))).collect());
            let back = side(Side::Back, bc.iter().enumerate().map(|(i, &c)| track(&format!("b{i}"), c, cube(i as f64))).collect());
            let mut seen = HashSet::new();
            let overlaps: Vec<OverlapRecord> = links
                .iter()
                .filter(|(f, b, _)| *f < fc.len() && *b < bc.len() && seen.insert((*f, *b)))
                .map(|&(f, b, v)| OverlapRecord { front: format!("f{f}"), back: format!("b{b}"), volume: v })
                .collect();
            let merged = merge_sides(&front, &back, &overlaps).unwrap();
            let single = sum_single_sides(&front, &back).unwrap();
            prop_assert!(merged <= single);
            prop_assert!(merged >= fc.iter().sum::<usize>().max(bc.iter().sum()));
            if overlaps.is_empty() {
                prop_assert_eq!(merged, single);
            }
            let swapped: Vec<OverlapRecord> = overlaps
                .iter()
                .map(|o| OverlapRecord { front: o.back.clone(), back: o.front.clone(), volume: o.volume })
                .collect();
            let mut sf = back.clone();
            sf.side = Side::Front;
            let mut sb = front.clone();
            sb.side = Side::Back;
            prop_assert_eq!(merge_sides(&sf, &sb, &swapped).unwrap(), merged);
        }
    }

    #[test]
    fn merge_examples() {
        let f = side(Side::Front, vec![track("a", 4, cube(0.0))]);
        let b = side(Side::Back, vec![track("a", 4, cube(0.0))]);
        assert_eq!(merge_sides(&f, &b, &[]).unwrap(), 8);
        let full = [OverlapRecord { front: "a".into(), back: "a".into(), volume: 1.0 }];
        assert_eq!(merge_sides(&f, &b, &full).unwrap(), 4);

        let b3 = side(Side::Back, vec![track("z", 3, cube(0.0))]);
        let half = [OverlapRecord { front: "a".into(), back: "z".into(), volume: 0.5 }];
        assert_eq!(merge_sides(&f, &b3, &half).unwrap(), 5);

        let dangling = [OverlapRecord { front: "a".into(), back: "q".into(), volume: 0.5 }];
        assert_eq!(
            merge_sides(&f, &b3, &dangling),
            Err(YieldError::DanglingReference { side: Side::Back, id: "q".into() })
        );
        let too_big = [OverlapRecord { front: "a".into(), back: "z".into(), volume: 2.0 }];
        assert!(matches!(merge_sides(&f, &b3, &too_big), Err(YieldError::OverlapTooLarge { .. })));
    }

    #[test]
    fn single_side_sums() {
        let empty = side(Side::Front, vec![]);
        let b = side(Side::Back, vec![track("a", 4, cube(0.0)), track("b", 2, cube(2.0))]);
        assert_eq!(sum_single_sides(&empty, &side(Side::Back, vec![])).unwrap(), 0);
        assert_eq!(sum_single_sides(&empty, &b).unwrap(), 6);
        let mut unresolved = b.clone();
        unresolved.tracks[1].count = None;
        assert_eq!(sum_single_sides(&empty, &unresolved), Err(YieldError::Unresolved("b".into())));
    }

    #[test]
    fn filter_flags() {
        let tracks: Vec<ClusterTrack> = (0..10).map(|i| track(&format!("t{i}"), 1, cube(i as f64))).collect();
        assert_eq!(filter_ground_and_background(tracks.clone()), tracks);
        let mut flagged = tracks.clone();
        flagged[2].on_ground = true;
        flagged[5].background = true;
        flagged[7].on_ground = true;
        let kept: Vec<String> = filter_ground_and_background(flagged).into_iter().map(|t| t.id).collect();
        assert_eq!(kept, ["t0", "t1", "t3", "t4", "t6", "t8", "t9"]);
        let all: Vec<ClusterTrack> = tracks.into_iter().map(|t| ClusterTrack { on_ground: true, ..t }).collect();
        assert!(filter_ground_and_background(all).is_empty());
    }

    #[test]
    fn accuracy_and_report() {
        assert_eq!(yield_accuracy(256, 270).unwrap(), 94.81);
        assert_eq!(yield_accuracy(0, 5).unwrap(), 0.0);
        assert_eq!(yield_accuracy(1, 0), Err(YieldError::ZeroHarvest));
        let f = side(Side::Front, vec![track("a", 200, cube(0.0))]);
        let b = side(Side::Back, vec![track("a", 148, cube(0.0))]);
        let overlap = [OverlapRecord { front: "a".into(), back: "a".into(), volume: 0.62 }];
        let r = YieldReport::build("Dataset-1", "GMM", &f, &b, &overlap, Some(270)).unwrap();
        assert_eq!(r.merged, 256);
        assert_eq!(r.merged_cell(), "256 (94.81%)");
        assert_eq!(r.single_side_cell(), "348 (128.89%)");
        let table = render_yield_table(&[r.clone()]);
        assert!(table.contains("| 256 (94.81%)"), "{table}");
        assert!(table.lines().next().unwrap().contains("Harvested FCs"));
        let back: YieldReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn filtered(scene: &SimulatedScene) -> (SideModel, SideModel, Vec<OverlapRecord>) {
        let f = SideModel { side: Side::Front, tracks: filter_ground_and_background(scene.front.tracks.clone()) };
        let b = SideModel { side: Side::Back, tracks: filter_ground_and_background(scene.back.tracks.clone()) };
        let o = compute_overlaps(&f, &b);
        (f, b, o)
    }

    #[test]
    fn scene_is_deterministic_and_valid() {
        let p = SceneParams { trees: 2, ..SceneParams::default() };
        let a = simulate_scene(3, &p).unwrap();
        assert_eq!(a, simulate_scene(3, &p).unwrap());
        assert_ne!(a.frames, simulate_scene(4, &p).unwrap().frames);
        a.front.validate().unwrap();
        a.back.validate().unwrap();
        assert_eq!(a.truth, 60);
        for o in &a.overlaps {
            assert!(o.front.trim_start_matches("front") == o.back.trim_start_matches("back"));
        }
        assert!(simulate_scene(0, &SceneParams { both_side_fraction: 1.5, ..p }).is_err());
    }

    #[test]
    fn full_visibility_merges_to_truth() {
        let p = SceneParams {
            both_side_fraction: 1.0,
            occlusion_rate: 0.0,
            views_per_track: 1,
            ..SceneParams::default()
        };
        for seed in 0..10 {
            let scene = simulate_scene(seed, &p).unwrap();
            let (f, b, o) = filtered(&scene);
            assert_eq!(merge_sides(&f, &b, &o).unwrap(), scene.truth);
        }
    }

    #[test]
    fn merged_beats_single_sides() {
        let p = SceneParams { views_per_track: 1, ..SceneParams::default() };
        let mut total_error = 0.0;
        for seed in 0..10 {
            let scene = simulate_scene(seed, &p).unwrap();
            let (f, b, o) = filtered(&scene);
            let merged = merge_sides(&f, &b, &o).unwrap() as f64;
            let single = sum_single_sides(&f, &b).unwrap() as f64;
            let truth = scene.truth as f64;
            assert!((merged - truth).abs() < (single - truth).abs());
            total_error += (merged - truth).abs() / truth;
        }
        assert!(total_error / 10.0 < 0.08);
    }
}
