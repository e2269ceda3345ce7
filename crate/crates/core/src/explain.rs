//! Attention rollout and text-conditioned attribute maps.
//!
//! An attribute map composes the head-averaged cross-attention of the
//! attribute query with the rollout of the mediated visual encoder:
//! `map = w · R`, where `R[j][k]` is how much output token `j` draws on
//! input patch `k`. The gender map is built from the attribute maps only;
//! the direct path pools globally and has no spatial map.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::autograd::Graph;
use crate::corpus::image::{write_pgm, write_ppm};
use crate::error::{Error, Result};
use crate::model::{DualPathModel, ForwardOptions};
use crate::tensor::DenseTensor;
use crate::trainer::Batch;

const ROW_TOLERANCE: f64 = 1e-6;

/// A distribution over the `grid x grid` patch cells, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Vec<f64>,
    pub grid: usize,
    /// Attribute name or `"gender-fused"`.
    pub tag: String,
    pub sample: String,
}

impl AttentionMap {
    /// Total mass on `cells`.
    pub fn mass_in(&self, cells: &[usize]) -> f64 {
        cells.iter().map(|&c| self.values[c]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.grid) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    /// Values scaled so the maximum becomes 255.
    pub fn to_gray(&self, cell: usize) -> GrayImage {
        let mx = self.values.iter().cloned().fold(0.0, f64::max);
        let side = (self.grid * cell) as u32;
        GrayImage::from_fn(side, side, |x, y| {
            let v = self.values[(y as usize / cell) * self.grid + x as usize / cell];
            Luma([if mx > 0.0 {
                (v / mx * 255.0).round() as u8
            } else {
                0
            }])
        })
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    v
}

/// Composes per-layer attention `[heads, N, N]` (or `[1, heads, N, N]`):
/// average heads, add the identity, renormalize rows, multiply in depth
/// order. Returns the row-stochastic `N x N` rollout.
pub fn rollout_visual(layers: &[DenseTensor]) -> Result<Vec<f64>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Validation("rollout needs at least one layer".into()))?;
    let n = *first.shape().last().unwrap_or(&0);
    let mut r: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect();
    for (l, layer) in layers.iter().enumerate() {
        let s = layer.shape();
        if s.len() < 3
            || s[s.len() - 1] != n
            || s[s.len() - 2] != n
            || s[..s.len() - 3].iter().any(|&d| d != 1)
        {
            return Err(Error::shape("rollout layer", s, &[n, n]));
        }
        let heads = s[s.len() - 3];
        for row in layer.data().chunks(n) {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Validation(format!(
                    "layer {l}: attention row sums to {total}"
                )));
            }
        }
        let mut a = vec![0.0; n * n];
        for h in layer.data().chunks(n * n) {
            a.iter_mut()
                .zip(h)
                .for_each(|(x, y)| *x += y / heads as f64);
        }
        for i in 0..n {
            a[i * n + i] += 1.0;
            let row = &mut a[i * n..(i + 1) * n];
            let t: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= t);
        }
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += aik * r[k * n + j];
                }
            }
        }
        r = next;
    }
    Ok(r)
}

/// Head-averaged cross-attention row `[heads, 1, N]` composed with the
/// rollout, renormalized.
pub fn attribute_map(
    cross: &DenseTensor,
    rollout: &[f64],
    grid: usize,
    tag: &str,
    sample: &str,
) -> Result<AttentionMap> {
    let n = grid * grid;
    let s = cross.shape();
    if s.last() != Some(&n) || rollout.len() != n * n || cross.numel() % n != 0 {
        return Err(Error::shape("attribute_map", s, &[n]));
    }
    let heads = cross.numel() / n;
    let mut w = vec![0.0; n];
    for h in cross.data().chunks(n) {
        w.iter_mut()
            .zip(h)
            .for_each(|(x, y)| *x += y / heads as f64);
    }
    let mut m = vec![0.0; n];
    for (j, wj) in w.iter().enumerate() {
        for (k, mk) in m.iter_mut().enumerate() {
            *mk += wj * rollout[j * n + k];
        }
    }
    Ok(AttentionMap {
        values: normalized(m),
        grid,
        tag: tag.into(),
        sample: sample.into(),
    })
}

/// Attention mass the fused tokens place on the attribute-path token,
/// averaged over heads and queries of `[heads, 2, 2]` weights.
pub fn attribute_token_mass(fusion: &DenseTensor) -> f64 {
    let cols: Vec<f64> = fusion.data().chunks(2).map(|r| r[1]).collect();
    cols.iter().sum::<f64>() / cols.len().max(1) as f64
}

/// Weighted mean of attribute maps, renormalized.
pub fn gender_map(maps: &[AttentionMap], weights: &[f64]) -> Result<AttentionMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Validation("gender map needs at least one attribute map".into()))?;
    if weights.len() != maps.len() {
        return Err(Error::shape("gender_map", &[weights.len()], &[maps.len()]));
    }
    let mut v = vec![0.0; first.values.len()];
    for (m, w) in maps.iter().zip(weights) {
        v.iter_mut().zip(&m.values).for_each(|(x, y)| *x += w * y);
    }
    Ok(AttentionMap {
        values: normalized(v),
        grid: first.grid,
        tag: "gender-fused".into(),
        sample: first.sample.clone(),
    })
}

/// Attribute maps and the fused gender map of one sample.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub attributes: Vec<AttentionMap>,
    pub gender: AttentionMap,
}

/// Runs the model on `batch` and explains every sample. `ids` name the
/// samples in the emitted maps.
pub fn explain_batch(
    model: &DualPathModel,
    batch: &Batch,
    ids: &[String],
) -> Result<Vec<Explanation>> {
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        &batch.images,
        &batch.prompts,
        ForwardOptions::default(),
    )?;
    let grid = model.config.grid();
    let n = grid * grid;
    let b = ids.len();
    let layers: Vec<DenseTensor> = out
        .visual_attention_mediated
        .iter()
        .map(|&v| g.tensor(v))
        .collect();
    let fusion = g.tensor(out.fusion_attention);
    let mut result = Vec::with_capacity(b);
    for (i, id) in ids.iter().enumerate() {
        let per_sample: Vec<DenseTensor> = layers
            .iter()
            .map(|l| slice_batch(l, i))
            .collect::<Result<_>>()?;
        let rollout = rollout_visual(&per_sample)?;
        let mut maps = Vec::new();
        for (a, spec) in model.config.attributes.iter().enumerate() {
            let w = out.attribute_weights(&g, a)?;
            let w = slice_batch(&w, if w.shape()[0] == 1 { 0 } else { i })?;
            maps.push(attribute_map(&w, &rollout, grid, &spec.name, id)?);
        }
        let mass = attribute_token_mass(&slice_batch(&fusion, i)?);
        let gender = gender_map(&maps, &vec![mass; maps.len()])?;
        debug_assert!(maps.iter().all(|m| m.values.len() == n));
        result.push(Explanation {
            attributes: maps,
            gender,
        });
    }
    Ok(result)
}

/// Sample `i` of a tensor with leading batch axis, keeping the other axes.
fn slice_batch(t: &DenseTensor, i: usize) -> Result<DenseTensor> {
    let s = t.shape();
    let per = t.numel() / s[0].max(1);
    if i >= s[0] {
        return Err(Error::shape("slice_batch", s, &[i]));
    }
    DenseTensor::new(s[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec())
}

/// Grayscale PGM, `cell` pixels per grid cell.
pub fn write_heatmap(map: &AttentionMap, path: &Path, cell: usize) -> Result<()> {
    write_pgm(path, &map.to_gray(cell.max(1)))
}

/// Side-by-side PPM: the source image, then the source tinted red by the map.
pub fn write_overlay(map: &AttentionMap, source: &RgbImage, path: &Path) -> Result<()> {
    let (w, h) = source.dimensions();
    let mx = map.values.iter().cloned().fold(0.0, f64::max);
    let g = map.grid as u32;
    let out = RgbImage::from_fn(2 * w, h, |x, y| {
        let sx = x % w;
        let p = source.get_pixel(sx, y);
        if x < w {
            return *p;
        }
        let v = map.values[((y * g / h) * g + sx * g / w) as usize];
        let t = if mx > 0.0 { v / mx } else { 0.0 };
        let mix =
            |c: u8, target: f64| ((1.0 - 0.6 * t) * c as f64 + 0.6 * t * target).round() as u8;
        Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)])
    });
    write_ppm(path, &out)
}
