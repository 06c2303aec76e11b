//! SLIC superpixels over CIELAB frames.
//!
//! Centers start on a regular grid with spacing `S = sqrt(N / target_count)`,
//! optionally nudged to the lowest-gradient pixel of their 3x3 neighbourhood.
//! Each iteration assigns every pixel inside a `2S x 2S` window around a center
//! to the center minimising `D = sqrt(d_lab^2 + (m * d_xy / S)^2)`, then moves
//! centers to the mean of their members. A final pass makes every superpixel
//! 4-connected: for each label its largest piece is kept, other pieces smaller
//! than a quarter of the mean superpixel size are merged into the adjacent
//! superpixel closest in mean color, and larger stray pieces become superpixels
//! of their own.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{BoundingBox, LabImage};

#[derive(Debug, Error)]
pub enum SlicError {
    #[error("invalid SLIC configuration: {0}")]
    InvalidConfig(String),
    #[error("label buffer has {actual} entries, image has {expected} pixels")]
    LabelCount { expected: usize, actual: usize },
    #[error("label map has {0} superpixels, more than a 16-bit PNG can hold")]
    TooManyLabels(usize),
    #[error("failed to write {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicConfig {
    pub target_count: usize,
    /// Spatial weight `m`.
    pub compactness: f64,
    pub iterations: usize,
    pub perturb_seeds: bool,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            target_count: 2000,
            compactness: 10.0,
            iterations: 10,
            perturb_seeds: true,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self) -> Result<(), SlicError> {
        if self.target_count == 0 {
            return Err(SlicError::InvalidConfig("target_count must be >= 1".into()));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return Err(SlicError::InvalidConfig(format!(
                "compactness must be positive, got {}",
                self.compactness
            )));
        }
        if self.iterations == 0 {
            return Err(SlicError::InvalidConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superpixel {
    pub id: u32,
    pub pixel_count: usize,
    pub mean_lab: [f64; 3],
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

/// Over-segmentation of a frame. Ids are contiguous, so
/// `superpixels[i].id == i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub superpixels: Vec<Superpixel>,
}

impl SuperpixelMap {
    pub fn len(&self) -> usize {
        self.superpixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpixels.is_empty()
    }

    pub fn label_at(&self, x: u32, y: u32) -> u32 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn mean_colors(&self) -> Vec<Vec<f64>> {
        self.superpixels.iter().map(|s| s.mean_lab.to_vec()).collect()
    }

    /// Debug dump of the label map as a 16-bit grayscale PNG.
    pub fn write_label_png(&self, path: impl AsRef<Path>) -> Result<(), SlicError> {
        let path = path.as_ref();
        if self.superpixels.len() > usize::from(u16::MAX) + 1 {
            return Err(SlicError::TooManyLabels(self.superpixels.len()));
        }
        let raw: Vec<u8> = self
            .labels
            .iter()
            .flat_map(|&l| (l as u16).to_ne_bytes())
            .collect();
        image::save_buffer_with_format(
            path,
            &raw,
            self.width,
            self.height,
            image::ExtendedColorType::L16,
            image::ImageFormat::Png,
        )
        .map_err(|e| SlicError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Debug dump of per-superpixel statistics, one JSON object per line.
    pub fn write_stats_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for sp in &self.superpixels {
            serde_json::to_writer(&mut out, sp)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn slic_segment(img: &LabImage, cfg: &SlicConfig) -> Result<SuperpixelMap, SlicError> {
    cfg.validate()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    if cfg.target_count > n {
        return Err(SlicError::InvalidConfig(format!(
            "target_count {} exceeds the {} pixels in the frame",
            cfg.target_count, n
        )));
    }

    let step = (n as f64 / cfg.target_count as f64).sqrt();
    let mut centers = grid_centers(img, step, cfg.perturb_seeds);
    let spatial_weight = (cfg.compactness / step).powi(2);

    let mut labels = vec![u32::MAX; n];
    let mut distances = vec![f64::INFINITY; n];
    let radius = step.ceil() as i64;
    let pixels = img.pixels();

    for _ in 0..cfg.iterations {
        distances.fill(f64::INFINITY);
        let mut changed = false;
        for (k, c) in centers.iter().enumerate() {
            let (cx, cy) = (c[3].round() as i64, c[4].round() as i64);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            for y in y0..=y1 {
                let dy = y as f64 - c[4];
                for x in x0..=x1 {
                    let i = y * w + x;
                    let p = pixels[i];
                    let dl = p[0] - c[0];
                    let da = p[1] - c[1];
                    let db = p[2] - c[2];
                    let dx = x as f64 - c[3];
                    let d = dl * dl + da * da + db * db + spatial_weight * (dx * dx + dy * dy);
                    if d < distances[i] {
                        distances[i] = d;
                        if labels[i] != k as u32 {
                            labels[i] = k as u32;
                            changed = true;
                        }
                    }
                }
            }
        }

        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let p = pixels[i];
            let s = &mut sums[l as usize];
            s[0] += p[0];
            s[1] += p[1];
            s[2] += p[2];
            s[3] += (i % w) as f64;
            s[4] += (i / w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for d in 0..5 {
                    c[d] = s[d] / s[5];
                }
            }
        }
        if !changed {
            break;
        }
    }

    let min_fragment = n as f64 / centers.len() as f64 / 4.0;
    let labels = enforce_connectivity(img, &labels, min_fragment);
    let superpixels = superpixel_stats(img, &labels)?;
    Ok(SuperpixelMap {
        width: img.width(),
        height: img.height(),
        labels,
        superpixels,
    })
}

fn grid_centers(img: &LabImage, step: f64, perturb: bool) -> Vec<[f64; 5]> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let nx = ((w as f64 / step).round() as usize).max(1);
    let ny = ((h as f64 / step).round() as usize).max(1);
    let (sx, sy) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let mut x = (((i as f64 + 0.5) * sx) as usize).min(w - 1);
            let mut y = (((j as f64 + 0.5) * sy) as usize).min(h - 1);
            if perturb {
                (x, y) = lowest_gradient_neighbour(img, x, y);
            }
            let p = img.get(x as u32, y as u32);
            centers.push([p[0], p[1], p[2], x as f64, y as f64]);
        }
    }
    centers
}

fn gradient(img: &LabImage, x: usize, y: usize) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let at = |x: usize, y: usize| img.get(x as u32, y as u32);
    let sq = |a: [f64; 3], b: [f64; 3]| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let gx = sq(at((x + 1).min(w - 1), y), at(x.saturating_sub(1), y));
    let gy = sq(at(x, (y + 1).min(h - 1)), at(x, y.saturating_sub(1)));
    gx + gy
}

fn lowest_gradient_neighbour(img: &LabImage, x: usize, y: usize) -> (usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut best = (x, y);
    let mut best_g = gradient(img, x, y);
    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            let g = gradient(img, nx, ny);
            if g < best_g {
                best_g = g;
                best = (nx, ny);
            }
        }
    }
    best
}

struct Fragment {
    label: u32,
    size: usize,
    lab_sum: [f64; 3],
    neighbours: BTreeSet<usize>,
    anchored: bool,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Splits `labels` into 4-connected fragments and absorbs small stray ones.
/// Returns compact labels numbered in raster order of first pixel.
fn enforce_connectivity(img: &LabImage, labels: &[u32], min_fragment: f64) -> Vec<u32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let pixels = img.pixels();

    let mut frag_of = vec![usize::MAX; n];
    let mut fragments: Vec<Fragment> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if frag_of[start] != usize::MAX {
            continue;
        }
        let id = fragments.len();
        let label = labels[start];
        let mut frag = Fragment {
            label,
            size: 0,
            lab_sum: [0.0; 3],
            neighbours: BTreeSet::new(),
            anchored: false,
        };
        frag_of[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            frag.size += 1;
            for c in 0..3 {
                frag.lab_sum[c] += pixels[i][c];
            }
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if frag_of[j] == usize::MAX && labels[j] == label {
                    frag_of[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        fragments.push(frag);
    }

    for i in 0..n {
        let (x, y) = (i % w, i / w);
        let a = frag_of[i];
        for j in [
            (x + 1 < w).then(|| i + 1),
            (y + 1 < h).then(|| i + w),
        ]
        .into_iter()
        .flatten()
        {
            let b = frag_of[j];
            if a != b {
                fragments[a].neighbours.insert(b);
                fragments[b].neighbours.insert(a);
            }
        }
    }

    // The largest piece of each label is its anchor; ties go to the earlier piece.
    let mut anchor_of_label: std::collections::BTreeMap<u32, usize> = Default::default();
    for (id, f) in fragments.iter().enumerate() {
        if f.label == u32::MAX {
            continue;
        }
        anchor_of_label
            .entry(f.label)
            .and_modify(|best| {
                if f.size > fragments[*best].size {
                    *best = id;
                }
            })
            .or_insert(id);
    }
    let mut orphans = Vec::new();
    for (id, f) in fragments.iter_mut().enumerate() {
        let is_anchor = anchor_of_label.get(&f.label) == Some(&id);
        if is_anchor || (f.label != u32::MAX && f.size as f64 >= min_fragment) {
            f.anchored = true;
        } else {
            orphans.push(id);
        }
    }
    orphans.sort_by_key(|&id| (fragments[id].size, id));

    let mut parent: Vec<usize> = (0..fragments.len()).collect();
    for orphan in orphans {
        let root = find(&mut parent, orphan);
        if fragments[root].anchored {
            continue;
        }
        let neighbours: BTreeSet<usize> = fragments[root]
            .neighbours
            .clone()
            .into_iter()
            .map(|nb| find(&mut parent, nb))
            .filter(|&nb| nb != root)
            .collect();
        if neighbours.is_empty() {
            continue;
        }
        let mean = |f: &Fragment| f.lab_sum.map(|s| s / f.size as f64);
        let own = mean(&fragments[root]);
        let dist = |f: &Fragment| {
            let m = mean(f);
            (0..3).map(|c| (m[c] - own[c]).powi(2)).sum::<f64>()
        };
        let any_anchored = neighbours.iter().any(|&nb| fragments[nb].anchored);
        let target = neighbours
            .iter()
            .copied()
            .filter(|&nb| !any_anchored || fragments[nb].anchored)
            .min_by(|&a, &b| {
                dist(&fragments[a])
                    .total_cmp(&dist(&fragments[b]))
                    .then(a.cmp(&b))
            })
            .expect("neighbour set is non-empty");

        parent[root] = target;
        let absorbed = std::mem::take(&mut fragments[root].neighbours);
        let (size, sum) = (fragments[root].size, fragments[root].lab_sum);
        let t = &mut fragments[target];
        t.size += size;
        for c in 0..3 {
            t.lab_sum[c] += sum[c];
        }
        t.neighbours.extend(absorbed);
        t.neighbours.remove(&target);
        t.neighbours.remove(&root);
    }

    // Number surviving roots by the raster position of their first pixel.
    let mut compact = vec![u32::MAX; fragments.len()];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for i in 0..n {
        let root = find(&mut parent, frag_of[i]);
        if compact[root] == u32::MAX {
            compact[root] = next;
            next += 1;
        }
        out[i] = compact[root];
    }
    out
}

/// Per-id pixel count, mean color, centroid and bounding box. Ids without any
/// pixel are left out.
pub fn superpixel_stats(img: &LabImage, labels: &[u32]) -> Result<Vec<Superpixel>, SlicError> {
    let w = img.width() as usize;
    if labels.len() != img.len() {
        return Err(SlicError::LabelCount {
            expected: img.len(),
            actual: labels.len(),
        });
    }
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    #[derive(Clone)]
    struct Acc {
        count: usize,
        lab: [f64; 3],
        x: f64,
        y: f64,
        min: (usize, usize),
        max: (usize, usize),
    }
    let mut acc = vec![
        Acc {
            count: 0,
            lab: [0.0; 3],
            x: 0.0,
            y: 0.0,
            min: (usize::MAX, usize::MAX),
            max: (0, 0),
        };
        max + 1
    ];
    for (i, (&l, p)) in labels.iter().zip(img.pixels()).enumerate() {
        let (x, y) = (i % w, i / w);
        let a = &mut acc[l as usize];
        a.count += 1;
        for c in 0..3 {
            a.lab[c] += p[c];
        }
        a.x += x as f64;
        a.y += y as f64;
        a.min = (a.min.0.min(x), a.min.1.min(y));
        a.max = (a.max.0.max(x), a.max.1.max(y));
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.count > 0)
        .map(|(id, a)| {
            let n = a.count as f64;
            Superpixel {
                id: id as u32,
                pixel_count: a.count,
                mean_lab: a.lab.map(|s| s / n),
                centroid: (a.x / n, a.y / n),
                bbox: BoundingBox::new(
                    a.min.0 as u32,
                    a.min.1 as u32,
                    (a.max.0 - a.min.0 + 1) as u32,
                    (a.max.1 - a.min.1 + 1) as u32,
                ),
            }
        })
        .collect())
}
