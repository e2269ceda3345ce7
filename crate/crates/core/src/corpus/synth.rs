//! Procedural long-range pedestrian corpus.
//!
//! Each 32x32 image shows a blocky figure on a dark background: hair on
//! grid row 0, upper clothing on row 1, lower clothing on row 2 and
//! footwear on row 3, with an accessory to the right of the body and, in
//! the seven-attribute set, a face cell in the top-right corner.
//!
//! Hairstyle, upper and lower classes encode a colour bit and a pattern bit
//! (`class = 2 * colour + pattern`). Pattern 1 adds mean-preserving
//! horizontal stripes whose period is 2, 4 and 8 pixels respectively, so
//! each downsampling level of the distance bins erases one more pattern.
//! Gender is the majority of the three pattern bits XOR a silhouette-width
//! bit (wide torso and legs). Unknown identities have hair and clothing
//! painted a uniform grey at an intermediate width.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};

use super::prompt::{compose_prompt, PromptMode, PromptVocabulary};
use super::record::{attribute_set, write_corpus_csv, SampleRecord, Split, ALL_ATTRIBUTES};
use crate::autograd::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const IMAGE_SIZE: usize = 32;
pub const SOURCE: &str = "synthetic";

/// Degradation applied to one distance bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradation {
    pub downsample: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

pub const DEGRADATIONS: [Degradation; 4] = [
    Degradation {
        downsample: 1,
        blur_sigma: 0.0,
        noise_sigma: 0.0,
    },
    Degradation {
        downsample: 2,
        blur_sigma: 0.5,
        noise_sigma: 0.02,
    },
    Degradation {
        downsample: 4,
        blur_sigma: 1.0,
        noise_sigma: 0.05,
    },
    Degradation {
        downsample: 8,
        blur_sigma: 2.0,
        noise_sigma: 0.1,
    },
];

/// Distance (or height) range `(lo, hi]` of each bin, in metres.
pub const BIN_RANGES: [(f64, f64); 4] = [(10.0, 20.0), (20.0, 40.0), (40.0, 80.0), (80.0, 120.0)];

pub const ANGLES: [u32; 3] = [30, 60, 90];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    /// 5 or 7.
    pub attributes: usize,
    /// Relative frequency of each degradation bin.
    pub bin_weights: Vec<f64>,
    pub unknown_rate: f64,
    /// Probability of the wide silhouette.
    pub wide_rate: f64,
    pub samples_per_identity: usize,
    /// Fractions of identities assigned to train and val; the rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 7,
            attributes: 5,
            bin_weights: vec![0.4, 0.2, 0.2, 0.2],
            unknown_rate: 0.1,
            wide_rate: 0.25,
            samples_per_identity: 4,
            train_fraction: 0.7,
            val_fraction: 0.2,
        }
    }
}

/// Latent description of one identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Figure {
    pub unknown: bool,
    pub wide: bool,
    pub hairstyle: usize,
    pub upper: usize,
    pub lower: usize,
    pub feet: usize,
    pub accessories: usize,
    /// `None` unless the seven-attribute set is generated.
    pub beard: Option<usize>,
    pub moustache: Option<usize>,
}

/// Majority of the three pattern bits XOR the width bit (1 = Female).
pub fn gender_of(hairstyle: usize, upper: usize, lower: usize, wide: bool) -> usize {
    let votes = (hairstyle & 1) + (upper & 1) + (lower & 1);
    ((votes >= 2) ^ wide) as usize
}

impl Figure {
    pub fn gender(&self) -> usize {
        if self.unknown {
            2
        } else {
            gender_of(self.hairstyle, self.upper, self.lower, self.wide)
        }
    }

    /// Labels in [`ALL_ATTRIBUTES`] order.
    pub fn labels(&self) -> [i64; 7] {
        let masked = |v: usize| if self.unknown { IGNORE_INDEX } else { v as i64 };
        let opt = |v: Option<usize>| match v {
            Some(v) if !self.unknown => v as i64,
            _ => IGNORE_INDEX,
        };
        [
            masked(self.hairstyle),
            masked(self.upper),
            masked(self.lower),
            self.feet as i64,
            self.accessories as i64,
            opt(self.beard),
            opt(self.moustache),
        ]
    }
}

/// Generator parameters of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub path: String,
    pub identity: String,
    pub bin: usize,
    pub figure: Figure,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub records: Vec<SampleRecord>,
    pub params: Vec<GeneratorParams>,
    pub vocab: PromptVocabulary,
}

/// Class descriptions of every synthetic attribute.
pub fn synth_vocabulary() -> PromptVocabulary {
    let table: [(&str, &[&str]); 7] = [
        (
            "hairstyle",
            &[
                "short dark hair",
                "braided dark hair",
                "short blond hair",
                "braided blond hair",
            ],
        ),
        (
            "upper",
            &[
                "a plain red top",
                "a striped red top",
                "a plain green top",
                "a striped green top",
            ],
        ),
        (
            "lower",
            &[
                "plain blue trousers",
                "striped blue trousers",
                "plain purple trousers",
                "striped purple trousers",
            ],
        ),
        (
            "feet",
            &[
                "a person wearing sneakers",
                "a person wearing boots",
                "a person wearing high heels",
            ],
        ),
        (
            "accessories",
            &[
                "no accessories",
                "a person carrying a bag",
                "a person carrying an umbrella",
            ],
        ),
        ("beard", &["no beard", "a beard"]),
        ("moustache", &["no moustache", "a moustache"]),
    ];
    let rows = table.iter().flat_map(|(a, ds)| {
        ds.iter()
            .enumerate()
            .map(move |(i, d)| (a.to_string(), i, d.to_string()))
    });
    PromptVocabulary::new(rows).expect("static vocabulary is complete")
}

/// Pixel rectangle `(x0, y0, x1, y1)` of an attribute's region.
pub fn attribute_rect(attribute: &str) -> Option<(usize, usize, usize, usize)> {
    Some(match attribute {
        "hairstyle" => (0, 0, 24, 8),
        "upper" => (0, 8, 24, 16),
        "lower" => (0, 16, 24, 24),
        "feet" => (0, 24, 24, 32),
        "accessories" => (24, 8, 32, 24),
        "beard" | "moustache" => (24, 0, 32, 8),
        _ => return None,
    })
}

/// Grid cells (row-major on a `grid x grid` layout) whose centres lie in
/// the attribute's region.
pub fn attribute_cells(attribute: &str, grid: usize) -> Vec<usize> {
    let Some((x0, y0, x1, y1)) = attribute_rect(attribute) else {
        return Vec::new();
    };
    let cell = IMAGE_SIZE as f64 / grid as f64;
    let mut out = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            let (cx, cy) = ((c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell);
            if cx >= x0 as f64 && cx < x1 as f64 && cy >= y0 as f64 && cy < y1 as f64 {
                out.push(r * grid + c);
            }
        }
    }
    out
}

const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.14];
const MASK_GREY: [f64; 3] = [0.55, 0.55, 0.55];
const SKIN: [f64; 3] = [0.85, 0.7, 0.6];
const FACIAL_HAIR: [f64; 3] = [0.2, 0.15, 0.1];
const HAIR: [[f64; 3]; 2] = [[0.35, 0.25, 0.2], [0.8, 0.7, 0.35]];
const UPPER: [[f64; 3]; 2] = [[0.8, 0.25, 0.25], [0.25, 0.7, 0.3]];
const LOWER: [[f64; 3]; 2] = [[0.25, 0.3, 0.8], [0.6, 0.25, 0.65]];
const FEET: [[f64; 3]; 3] = [[0.95, 0.95, 0.95], [0.95, 0.85, 0.05], [0.9, 0.1, 0.5]];
const ACCESSORY: [[f64; 3]; 3] = [[0.1, 0.45, 0.45], [1.0, 0.5, 0.0], [0.2, 0.75, 0.85]];
const STRIPE: f64 = 0.2;

struct Canvas {
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            px: vec![BACKGROUND; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    /// Fills `[x0, x1) x [y0, y1)`; a nonzero `period` adds horizontal stripes.
    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [f64; 3], period: usize) {
        for y in y0..y1 {
            let shift = if period == 0 {
                0.0
            } else if ((y - y0) / (period / 2)) % 2 == 0 {
                STRIPE
            } else {
                -STRIPE
            };
            for x in x0..x1 {
                self.px[y * IMAGE_SIZE + x] = color.map(|c| c + shift);
            }
        }
    }
}

/// Draws a figure without degradation, as linear RGB in [0, 1].
fn render(f: &Figure) -> Canvas {
    let mut c = Canvas::new();
    let (x0, x1) = if f.unknown {
        (2, 22)
    } else if f.wide {
        (0, 24)
    } else {
        (4, 20)
    };
    let part = |class: usize, palette: &[[f64; 3]; 2], period: usize| {
        if f.unknown {
            (MASK_GREY, 0)
        } else {
            (palette[class / 2], if class % 2 == 1 { period } else { 0 })
        }
    };
    let (col, p) = part(f.hairstyle, &HAIR, 2);
    c.fill(4, 0, 20, 8, col, p);
    let (col, p) = part(f.upper, &UPPER, 4);
    c.fill(x0, 8, x1, 16, col, p);
    let (col, p) = part(f.lower, &LOWER, 8);
    c.fill(x0, 16, x1, 24, col, p);
    c.fill(4, 24, 20, 32, FEET[f.feet], 0);
    c.fill(24, 8, 32, 24, ACCESSORY[f.accessories], 0);
    if f.beard.is_some() || f.moustache.is_some() {
        if f.unknown {
            c.fill(24, 0, 32, 8, MASK_GREY, 0);
        } else {
            c.fill(24, 0, 32, 8, SKIN, 0);
            if f.moustache == Some(1) {
                c.fill(25, 4, 31, 5, FACIAL_HAIR, 0);
            }
            if f.beard == Some(1) {
                c.fill(25, 5, 31, 8, FACIAL_HAIR, 0);
            }
        }
    }
    c
}

fn area_downsample_bilinear_up(px: &[[f64; 3]], factor: usize) -> Vec<[f64; 3]> {
    if factor <= 1 {
        return px.to_vec();
    }
    let s = IMAGE_SIZE;
    let small = s / factor;
    let mut low = vec![[0.0; 3]; small * small];
    for y in 0..s {
        for x in 0..s {
            let cell = &mut low[(y / factor) * small + x / factor];
            for ch in 0..3 {
                cell[ch] += px[y * s + x][ch];
            }
        }
    }
    let area = (factor * factor) as f64;
    low.iter_mut()
        .for_each(|p| p.iter_mut().for_each(|v| *v /= area));
    let sample = |fy: f64, fx: f64| -> [f64; 3] {
        let cy = fy.clamp(0.0, (small - 1) as f64);
        let cx = fx.clamp(0.0, (small - 1) as f64);
        let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(small - 1), (x0 + 1).min(small - 1));
        let (wy, wx) = (cy - y0 as f64, cx - x0 as f64);
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = (1.0 - wy)
                * ((1.0 - wx) * low[y0 * small + x0][ch] + wx * low[y0 * small + x1][ch])
                + wy * ((1.0 - wx) * low[y1 * small + x0][ch] + wx * low[y1 * small + x1][ch]);
        }
        out
    };
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let fy = (y as f64 + 0.5) / factor as f64 - 0.5;
            let fx = (x as f64 + 0.5) / factor as f64 - 0.5;
            out.push(sample(fy, fx));
        }
    }
    out
}

fn gaussian_blur(px: &[[f64; 3]], sigma: f64) -> Vec<[f64; 3]> {
    if sigma <= 0.0 {
        return px.to_vec();
    }
    let s = IMAGE_SIZE as isize;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; src.len()];
        for y in 0..s {
            for x in 0..s {
                let mut acc = [0.0; 3];
                for (k, w) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, s - 1), y)
                    } else {
                        (x, (y + o).clamp(0, s - 1))
                    };
                    let p = src[(sy * s + sx) as usize];
                    for ch in 0..3 {
                        acc[ch] += w * p[ch];
                    }
                }
                out[(y * s + x) as usize] = acc;
            }
        }
        out
    };
    let h = pass(px, true);
    pass(&h, false)
}

/// Renders a figure and applies the degradation of `bin`.
pub fn draw(figure: &Figure, bin: usize, rng: &mut impl Rng) -> RgbImage {
    let d = DEGRADATIONS[bin];
    let canvas = render(figure);
    let px = area_downsample_bilinear_up(&canvas.px, d.downsample);
    let mut px = gaussian_blur(&px, d.blur_sigma);
    if d.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, d.noise_sigma).expect("positive sigma");
        for p in &mut px {
            for v in p.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    RgbImage::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |x, y| {
        let p = px[y as usize * IMAGE_SIZE + x as usize];
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn draw_figure(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Figure {
    let seven = cfg.attributes == 7;
    let unknown = rng.gen::<f64>() < cfg.unknown_rate;
    let wide = rng.gen::<f64>() < cfg.wide_rate;
    let hairstyle = rng.gen_range(0..4);
    let upper = rng.gen_range(0..4);
    let lower = rng.gen_range(0..4);
    let feet = rng.gen_range(0..3);
    let accessories = rng.gen_range(0..3);
    let male = !unknown && gender_of(hairstyle, upper, lower, wide) == 0;
    let facial = |rng: &mut ChaCha8Rng| seven.then(|| (male && rng.gen::<f64>() < 0.5) as usize);
    let beard = facial(rng);
    let moustache = facial(rng);
    Figure {
        unknown,
        wide,
        hairstyle,
        upper,
        lower,
        feet,
        accessories,
        beard,
        moustache,
    }
}

/// Generates `cfg.n` samples. Identities share one figure across their
/// samples and are assigned to exactly one split.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if cfg.bin_weights.len() != DEGRADATIONS.len() || cfg.bin_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config(format!(
            "expected {} nonnegative bin weights, got {:?}",
            DEGRADATIONS.len(),
            cfg.bin_weights
        )));
    }
    let bins = WeightedIndex::new(&cfg.bin_weights)
        .map_err(|e| Error::Config(format!("bin weights: {e}")))?;
    let attrs = attribute_set(cfg.attributes)?;
    let vocab = synth_vocabulary();
    let per = cfg.samples_per_identity.max(1);
    let identities = cfg.n.div_ceil(per);
    let width = (identities.max(2) as f64).log10().ceil() as usize + 1;
    let mut rng = stream(cfg.seed, "synth", 0);
    let mut records = Vec::with_capacity(cfg.n);
    let mut params = Vec::with_capacity(cfg.n);
    for id in 0..identities {
        let identity = format!("id{id:0width$}");
        let figure = draw_figure(&mut rng, cfg);
        let u = rng.gen::<f64>();
        let split = if u < cfg.train_fraction {
            Split::Train
        } else if u < cfg.train_fraction + cfg.val_fraction {
            Split::Val
        } else {
            Split::Test
        };
        for k in 0..per.min(cfg.n - id * per) {
            let bin = bins.sample(&mut rng);
            let angle = ANGLES[rng.gen_range(0..ANGLES.len())];
            let (lo, hi) = BIN_RANGES[bin];
            let metric = hi - (hi - lo) * rng.gen::<f64>();
            let metric = (metric * 100.0).round() / 100.0;
            let (distance_m, height_m) = if angle == 90 {
                (None, Some(metric))
            } else {
                (Some(metric), None)
            };
            let image = draw(&figure, bin, &mut rng);
            let path = format!("images/{identity}_{k}.ppm");
            let mut record = SampleRecord {
                path: path.clone(),
                image: Some(image),
                gender: figure.gender(),
                attributes: figure.labels(),
                prompt: String::new(),
                identity: identity.clone(),
                split,
                distance_m,
                height_m,
                angle_deg: Some(angle),
                source: SOURCE.into(),
            };
            record.prompt = compose_prompt(&record, &vocab, &attrs, PromptMode::Neutral);
            records.push(record);
            params.push(GeneratorParams {
                path,
                identity: identity.clone(),
                bin,
                figure,
            });
        }
    }
    Ok(SynthCorpus {
        records,
        params,
        vocab,
    })
}

/// Sidecar CSV of generator parameters.
pub fn write_params_csv(path: &Path, params: &[GeneratorParams]) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::at_path(path))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["path", "identity", "bin", "unknown", "wide"];
    header.extend(ALL_ATTRIBUTES);
    header.extend(["downsample", "blur_sigma", "noise_sigma"]);
    w.write_record(&header)?;
    for p in params {
        let f = &p.figure;
        let d = DEGRADATIONS[p.bin];
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            p.path.clone(),
            p.identity.clone(),
            p.bin.to_string(),
            (f.unknown as u8).to_string(),
            (f.wide as u8).to_string(),
            f.hairstyle.to_string(),
            f.upper.to_string(),
            f.lower.to_string(),
            f.feet.to_string(),
            f.accessories.to_string(),
            opt(f.beard),
            opt(f.moustache),
            d.downsample.to_string(),
            d.blur_sigma.to_string(),
            d.noise_sigma.to_string(),
        ])?;
    }
    w.flush().map_err(Error::at_path(path))?;
    Ok(())
}

/// Writes `corpus.csv`, `vocab.csv`, `generator.csv` and `images/*.ppm`.
pub fn write_corpus_dir(dir: &Path, corpus: &SynthCorpus) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(Error::at_path(dir))?;
    for r in &corpus.records {
        if let Some(img) = &r.image {
            super::image::write_ppm(&dir.join(&r.path), img)?;
        }
    }
    write_corpus_csv(&dir.join("corpus.csv"), &corpus.records)?;
    corpus.vocab.save(&dir.join("vocab.csv"))?;
    write_params_csv(&dir.join("generator.csv"), &corpus.params)
}
