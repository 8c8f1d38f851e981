//! Procedural texture corpus.
//!
//! Head class `g` is a sinusoidal grating with a group-specific color,
//! frequency and axis. Tail classes reuse a head group's grating and add one
//! secondary feature (bright blobs, an orthogonal grating, or a color tint),
//! so each tail class is confusable with exactly one head class. Gratings
//! only run along the image axes, which keeps every class closed under
//! horizontal and vertical flips.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ClassTaxonomy, DatasetManifest, Origin, Record, Split};
use crate::error::{Error, IoContext, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_classes: usize,
    /// Head classes are ids `0..n_head_classes`; the rest are tail.
    pub n_head_classes: usize,
    pub head_count_per_class: usize,
    pub tail_count_per_class: usize,
    pub val_head_count: usize,
    pub val_tail_count: usize,
    pub test_count_per_class: usize,
    pub image_size: usize,
    pub texture_seed: u64,
    /// Amplitude multiplier of the tail-specific secondary features.
    #[serde(default = "default_strength")]
    pub feature_strength: f64,
}

fn default_strength() -> f64 {
    1.0
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_head_classes: 4,
            head_count_per_class: 200,
            tail_count_per_class: 10,
            val_head_count: 100,
            val_tail_count: 10,
            test_count_per_class: 100,
            image_size: 64,
            texture_seed: 7,
            feature_strength: 1.0,
        }
    }
}

impl CorpusSpec {
    /// Four head classes with 1000 training samples and twelve tail classes
    /// with ten.
    pub fn sixteen_class() -> Self {
        Self {
            n_classes: 16,
            n_head_classes: 4,
            head_count_per_class: 1000,
            tail_count_per_class: 10,
            val_head_count: 100,
            val_tail_count: 10,
            test_count_per_class: 100,
            image_size: 64,
            texture_seed: 7,
            feature_strength: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("corpus spec", r));
        if self.n_head_classes == 0 || self.n_head_classes >= self.n_classes {
            return bad(format!(
                "need 0 < n_head_classes < n_classes, got {} of {}",
                self.n_head_classes, self.n_classes
            ));
        }
        for (name, v) in [
            ("head_count_per_class", self.head_count_per_class),
            ("tail_count_per_class", self.tail_count_per_class),
            ("val_head_count", self.val_head_count),
            ("val_tail_count", self.val_tail_count),
            ("test_count_per_class", self.test_count_per_class),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.tail_count_per_class >= self.head_count_per_class {
            return bad(format!(
                "tail_count_per_class ({}) must be below head_count_per_class ({})",
                self.tail_count_per_class, self.head_count_per_class
            ));
        }
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return bad(format!("image_size {} is not a power of two >= 8", self.image_size));
        }
        if !(self.feature_strength > 0.0) {
            return bad("feature_strength must be positive".into());
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> ClassTaxonomy {
        let n_head = self.n_head_classes;
        let mut names = Vec::with_capacity(self.n_classes);
        let mut pairs = Vec::new();
        for id in 0..self.n_classes {
            if id < n_head {
                names.push(format!("head_{id}"));
            } else {
                let k = id - n_head;
                let group = k % n_head;
                let feature = SecondaryFeature::for_variant(k / n_head);
                names.push(format!("tail_{group}_{}{}", feature.name(), variant_suffix(k / n_head)));
                pairs.push((group, id));
            }
        }
        ClassTaxonomy {
            class_names: names,
            head_ids: (0..n_head).collect::<BTreeSet<_>>(),
            tail_ids: (n_head..self.n_classes).collect::<BTreeSet<_>>(),
            similarity_pairs: pairs,
        }
    }

    fn count(&self, split: Split, tail: bool) -> usize {
        match (split, tail) {
            (Split::Train, false) => self.head_count_per_class,
            (Split::Train, true) => self.tail_count_per_class,
            (Split::Val, false) => self.val_head_count,
            (Split::Val, true) => self.val_tail_count,
            (Split::Test, _) => self.test_count_per_class,
        }
    }
}

fn variant_suffix(v: usize) -> String {
    if v < 3 {
        String::new()
    } else {
        format!("{}", v / 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SecondaryFeature {
    Blobs,
    Cross,
    Tint,
}

impl SecondaryFeature {
    fn for_variant(v: usize) -> Self {
        match v % 3 {
            0 => SecondaryFeature::Blobs,
            1 => SecondaryFeature::Cross,
            _ => SecondaryFeature::Tint,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SecondaryFeature::Blobs => "blobs",
            SecondaryFeature::Cross => "cross",
            SecondaryFeature::Tint => "tint",
        }
    }
}

/// Class-level texture parameters, fixed by the texture seed.
#[derive(Debug, Clone)]
struct Family {
    vertical: bool,
    cycles: f64,
    color: [f64; 3],
    secondary: Option<(SecondaryFeature, usize)>,
    tint: [f64; 3],
}

fn family(spec: &CorpusSpec, class_id: usize) -> Family {
    let n_head = spec.n_head_classes;
    let (group, secondary) = if class_id < n_head {
        (class_id, None)
    } else {
        let k = class_id - n_head;
        (k % n_head, Some((SecondaryFeature::for_variant(k / n_head), k / n_head)))
    };
    let mut r = SplitMix64::labelled(spec.texture_seed, &format!("family/{group}"));
    let max_cycles = spec.image_size as f64 / 4.0;
    let cycles = (1.5 + 1.25 * (group / 2) as f64 + r.range(-0.2, 0.2)).min(max_cycles);
    let hue = (group as f64 / n_head as f64 + r.range(0.0, 0.1)) * std::f64::consts::TAU;
    let color = [0.0, 1.0, 2.0].map(|k: f64| 0.6 + 0.4 * (hue + k * std::f64::consts::TAU / 3.0).cos());
    let mut rt = SplitMix64::labelled(spec.texture_seed, &format!("tint/{class_id}"));
    let ch = rt.below(3);
    let mut tint = [-0.15; 3];
    tint[ch] = 0.35;
    Family {
        vertical: group % 2 == 1,
        cycles,
        color,
        secondary,
        tint,
    }
}

/// Renders one image. Pixel values are computed in `[-1, 1]` and quantized.
fn render(spec: &CorpusSpec, fam: &Family, rng: &mut SplitMix64) -> RgbImage {
    let size = spec.image_size;
    let s = size as f64;
    let tau = std::f64::consts::TAU;
    let phase = rng.range(0.0, tau);
    let cycles = fam.cycles * rng.range(0.92, 1.08);
    let amp = rng.range(0.55, 0.75);
    let offset = rng.range(-0.1, 0.1);
    let strength = spec.feature_strength;

    let mut blobs = Vec::new();
    let mut cross = None;
    let mut tint = [0.0; 3];
    if let Some((feature, variant)) = fam.secondary {
        match feature {
            SecondaryFeature::Blobs => {
                let n = 3 + rng.below(2) + variant / 3;
                let radius = s / 10.0 * rng.range(0.9, 1.2);
                for _ in 0..n {
                    blobs.push((rng.range(0.0, s), rng.range(0.0, s), radius));
                }
            }
            SecondaryFeature::Cross => {
                cross = Some((rng.range(0.0, tau), cycles * (1.5 + 0.25 * (variant / 3) as f64)));
            }
            SecondaryFeature::Tint => tint = fam.tint,
        }
    }

    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (u, w) = if fam.vertical {
                (x as f64 / s, y as f64 / s)
            } else {
                (y as f64 / s, x as f64 / s)
            };
            let g = (tau * cycles * u + phase).sin();
            let mut extra = 0.0;
            if let Some((p2, c2)) = cross {
                extra += 0.45 * amp * strength * (tau * c2 * w + p2).sin();
            }
            for &(bx, by, r) in &blobs {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                extra += 0.8 * strength * (-d2 / (2.0 * r * r)).exp();
            }
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let noise = 0.08 * rng.normal();
                let v = offset + amp * g * fam.color[ch] + extra + strength * tint[ch] + noise;
                px[ch] = (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

pub(crate) fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    }
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    fs::write(path, buf).ctx(|| format!("writing {}", path.display()))
}

fn sample_stream(spec: &CorpusSpec, split: Split, class_id: usize, index: usize) -> SplitMix64 {
    SplitMix64::labelled(
        spec.texture_seed,
        &format!("sample/{split}/{class_id}/{index}"),
    )
}

fn render_corpus(
    spec: &CorpusSpec,
    out_dir: &Path,
    count: impl Fn(Split, usize) -> usize,
) -> Result<DatasetManifest> {
    let taxonomy = spec.taxonomy();
    taxonomy.validate()?;
    let mut records = Vec::new();
    for split in Split::ALL {
        for class_id in 0..spec.n_classes {
            let fam = family(spec, class_id);
            let name = taxonomy.name(class_id).to_string();
            for index in 0..count(split, class_id) {
                let sample_id = format!("{split}_c{class_id:02}_{index:05}");
                let rel = PathBuf::from(format!("images/{split}/{name}/{sample_id}.png"));
                let img = render(spec, &fam, &mut sample_stream(spec, split, class_id, index));
                write_png(&out_dir.join(&rel), &img)?;
                records.push(Record {
                    sample_id,
                    path: rel,
                    class_id,
                    split,
                    origin: Origin::Natural,
                });
            }
        }
    }
    let manifest = DatasetManifest::new(records, taxonomy, out_dir.to_path_buf())?;
    manifest.write(&out_dir.join("manifest.csv"))
}

/// Renders the long-tailed toy corpus under `out_dir` and writes
/// `out_dir/manifest.csv`. Output is a pure function of `spec`.
pub fn generate_toy_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let tax = spec.taxonomy();
    render_corpus(spec, out_dir, |split, c| spec.count(split, tax.is_tail(c)))
}

/// Same texture families with `per_class` training and validation images for
/// every class. Used to train the audit oracle.
pub fn generate_balanced_corpus(
    spec: &CorpusSpec,
    per_class: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if per_class == 0 {
        return Err(Error::invalid("corpus spec", "per_class must be positive"));
    }
    let val = spec.val_head_count;
    render_corpus(spec, out_dir, |split, _| match split {
        Split::Train => per_class,
        Split::Val => val,
        Split::Test => spec.test_count_per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_classes: 4,
            n_head_classes: 2,
            head_count_per_class: 6,
            tail_count_per_class: 2,
            val_head_count: 2,
            val_tail_count: 1,
            test_count_per_class: 2,
            image_size: 16,
            texture_seed: 3,
            feature_strength: 1.0,
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = small();
        s.image_size = 24;
        assert!(s.validate().is_err());
        let mut s = small();
        s.tail_count_per_class = 6;
        assert!(s.validate().is_err());
        let mut s = small();
        s.test_count_per_class = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sixteen_class_taxonomy() {
        let t = CorpusSpec::sixteen_class().taxonomy();
        assert_eq!(t.head_ids.len(), 4);
        assert_eq!(t.tail_ids.len(), 12);
        assert_eq!(t.similarity_pairs.len(), 12);
        t.validate().unwrap();
    }

    #[test]
    fn counts_match_the_requested_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_corpus(&small(), dir.path()).unwrap();
        assert_eq!(m.train_class_counts(), vec![6, 6, 2, 2]);
        assert_eq!(m.count(Split::Val, 0), 2);
        assert_eq!(m.count(Split::Val, 3), 1);
        assert_eq!(m.count(Split::Test, 3), 2);
        let back = DatasetManifest::read(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn flips_keep_the_grating_axis() {
        // A horizontal flip of a horizontal-stripe image is still horizontal stripes:
        // rows are constant up to noise.
        let spec = small();
        let fam = family(&spec, 0);
        assert!(!fam.vertical);
        let img = render(&spec, &fam, &mut SplitMix64::new(1));
        let row_var: f64 = (0..16)
            .map(|y| {
                let v: Vec<f64> = (0..16).map(|x| img.get_pixel(x, y)[0] as f64).collect();
                let m = v.iter().sum::<f64>() / 16.0;
                v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0
            })
            .sum::<f64>()
            / 16.0;
        assert!(row_var < 200.0, "row variance {row_var}");
    }
}
