//! Deterministic generator of IHC-like images with exact point annotations.
//!
//! Cells are anti-aliased discs: brown-ish for marker-positive (DAB),
//! blue-ish for marker-negative (hematoxylin), over a lightly textured
//! background. Every disc center is an integer pixel coordinate recorded
//! verbatim in the annotations, so counting ground truth is exact by
//! construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AnnotatedImage, AnnotationFile, AnnotationRecord, PointAnnotation};
use crate::error::{CoreError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    /// inclusive range of negative-cell counts (category 0)
    pub num_neg: [usize; 2],
    /// inclusive range of positive-cell counts (category 1)
    pub num_pos: [usize; 2],
    /// disc radius range in pixels
    pub cell_radius: [f64; 2],
    /// fraction of cells deliberately placed within one radius of another
    pub overlap_fraction: f64,
    /// DAB-like brown for positive cells
    pub pos_color: [f64; 3],
    /// hematoxylin-like blue for negative cells
    pub neg_color: [f64; 3],
    pub background_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 70,
            num_neg: [4, 20],
            num_pos: [2, 10],
            cell_radius: [3.0, 5.0],
            overlap_fraction: 0.3,
            pos_color: [0.55, 0.35, 0.15],
            neg_color: [0.25, 0.30, 0.62],
            background_amplitude: 0.06,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(CoreError::InvalidArgument("image_size must be > 0".into()));
        }
        if self.num_neg[0] > self.num_neg[1] || self.num_pos[0] > self.num_pos[1] {
            return Err(CoreError::InvalidArgument(
                "cell count ranges must be lo <= hi".into(),
            ));
        }
        if self.cell_radius[0] <= 0.0 || self.cell_radius[0] > self.cell_radius[1] {
            return Err(CoreError::InvalidArgument(
                "cell_radius must be 0 < lo <= hi".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(CoreError::InvalidArgument(
                "overlap_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.pos_color == self.neg_color {
            return Err(CoreError::InvalidArgument(
                "category colors must be distinct".into(),
            ));
        }
        let max_cells = self.num_neg[1] + self.num_pos[1];
        let min_r = self.cell_radius[0];
        let area = (self.image_size * self.image_size) as f64;
        if max_cells as f64 * std::f64::consts::PI * min_r * min_r > 0.9 * area {
            return Err(CoreError::InvalidArgument(format!(
                "cell count infeasible for the image area at the minimum radius \
                 ({max_cells} cells of r >= {min_r} in {}x{})",
                self.image_size, self.image_size
            )));
        }
        Ok(())
    }
}

struct Disc {
    x: usize,
    y: usize,
    radius: f64,
    color: [f64; 3],
    category: usize,
}

/// Renders image `index` of the virtual dataset. Fully determined by
/// `(cfg, index)`; each index derives an independent RNG substream.
pub fn generate_image(cfg: &SynthConfig, index: usize) -> Result<AnnotatedImage> {
    cfg.validate()?;
    let mut rng = SplitMix64::substream(cfg.seed, index as u64);
    let size = cfg.image_size;

    let n_neg = rng.next_range(cfg.num_neg[0] as u64, cfg.num_neg[1] as u64) as usize;
    let n_pos = rng.next_range(cfg.num_pos[0] as u64, cfg.num_pos[1] as u64) as usize;
    let total = n_neg + n_pos;

    // category sequence: negatives then positives, placement order shuffled
    let mut cats: Vec<usize> = std::iter::repeat(0)
        .take(n_neg)
        .chain(std::iter::repeat(1).take(n_pos))
        .collect();
    for i in (1..cats.len()).rev() {
        let j = rng.next_range(0, i as u64) as usize;
        cats.swap(i, j);
    }

    // choose which placements are forced overlaps (deterministic count)
    let n_overlap = if total > 1 {
        (cfg.overlap_fraction * (total - 1) as f64).round() as usize
    } else {
        0
    };

    let mut discs: Vec<Disc> = Vec::with_capacity(total);
    for (i, &cat) in cats.iter().enumerate() {
        let radius = rng.next_f64_range(cfg.cell_radius[0], cfg.cell_radius[1]);
        let margin = radius.ceil() as u64;
        let hi = (size as u64).saturating_sub(margin + 1).max(margin);
        let (x, y) = if i > 0 && i <= n_overlap {
            // park near an already placed cell, within one radius of it
            let anchor = &discs[rng.next_range(0, (discs.len() - 1) as u64) as usize];
            let ang = rng.next_f64_range(0.0, std::f64::consts::TAU);
            let dist = rng.next_f64_range(0.0, anchor.radius);
            let x = (anchor.x as f64 + dist * ang.cos()).round() as i64;
            let y = (anchor.y as f64 + dist * ang.sin()).round() as i64;
            (
                x.clamp(margin as i64, hi as i64) as usize,
                y.clamp(margin as i64, hi as i64) as usize,
            )
        } else {
            (
                rng.next_range(margin, hi) as usize,
                rng.next_range(margin, hi) as usize,
            )
        };
        let base = if cat == 1 { cfg.pos_color } else { cfg.neg_color };
        let jitter = 0.05;
        let color = [
            (base[0] + rng.next_f64_range(-jitter, jitter)).clamp(0.0, 1.0),
            (base[1] + rng.next_f64_range(-jitter, jitter)).clamp(0.0, 1.0),
            (base[2] + rng.next_f64_range(-jitter, jitter)).clamp(0.0, 1.0),
        ];
        discs.push(Disc {
            x,
            y,
            radius,
            color,
            category: cat,
        });
    }

    let mut pixels = render_background(size, cfg.background_amplitude, &mut rng);
    for d in &discs {
        render_disc(&mut pixels, size, d);
    }

    let points = discs
        .iter()
        .map(|d| PointAnnotation {
            x: d.x,
            y: d.y,
            category_index: d.category,
        })
        .collect();
    AnnotatedImage::new(format!("synth_{index:05}"), size, size, pixels, points)
}

/// Light tissue-like background: warm base plus smooth lattice noise.
fn render_background(size: usize, amplitude: f64, rng: &mut SplitMix64) -> Vec<f32> {
    let base = [0.93f64, 0.90, 0.88];
    let cell = 8usize;
    let lat = size / cell + 2;
    let lattice: Vec<f64> = (0..lat * lat).map(|_| rng.next_f64_range(-1.0, 1.0)).collect();
    let mut pixels = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let v00 = lattice[iy * lat + ix];
            let v01 = lattice[iy * lat + ix + 1];
            let v10 = lattice[(iy + 1) * lat + ix];
            let v11 = lattice[(iy + 1) * lat + ix + 1];
            let noise = v00 * (1.0 - tx) * (1.0 - ty)
                + v01 * tx * (1.0 - ty)
                + v10 * (1.0 - tx) * ty
                + v11 * tx * ty;
            let i = (y * size + x) * 3;
            for c in 0..3 {
                pixels[i + c] = ((base[c] + amplitude * noise).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    pixels
}

/// Alpha-blends an anti-aliased disc; coverage ramps linearly over the last
/// pixel of the radius.
fn render_disc(pixels: &mut [f32], size: usize, d: &Disc) {
    let r = d.radius;
    let lo_y = (d.y as f64 - r - 1.0).floor().max(0.0) as usize;
    let hi_y = ((d.y as f64 + r + 1.0).ceil() as usize).min(size - 1);
    let lo_x = (d.x as f64 - r - 1.0).floor().max(0.0) as usize;
    let hi_x = ((d.x as f64 + r + 1.0).ceil() as usize).min(size - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dist = (((x as f64 - d.x as f64).powi(2) + (y as f64 - d.y as f64).powi(2))
                as f64)
                .sqrt();
            let coverage = (r + 0.5 - dist).clamp(0.0, 1.0);
            if coverage <= 0.0 {
                continue;
            }
            let i = (y * size + x) * 3;
            for c in 0..3 {
                let old = pixels[i + c] as f64;
                pixels[i + c] = (old * (1.0 - coverage) + d.color[c] * coverage) as f32;
            }
        }
    }
}

/// Generates `count` images and writes PNGs plus the annotation JSON under
/// `out_dir`. Returns the annotation file path.
pub fn generate_dataset(cfg: &SynthConfig, count: usize, out_dir: &Path) -> Result<std::path::PathBuf> {
    if count == 0 {
        return Err(CoreError::InvalidArgument("dataset count must be >= 1".into()));
    }
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| CoreError::io(img_dir.display().to_string(), e))?;

    let mut records = Vec::with_capacity(count);
    for index in 0..count {
        let img = generate_image(cfg, index)?;
        let rel = format!("images/{}.png", img.id);
        let png_path = out_dir.join(&rel);
        save_png(&img, &png_path)?;
        records.push(AnnotationRecord {
            id: img.id.clone(),
            path: rel,
            height: img.height,
            width: img.width,
            points: img
                .points
                .iter()
                .map(|p| [p.x as i64, p.y as i64, p.category_index as i64])
                .collect(),
        });
    }
    let ann_path = out_dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&AnnotationFile { images: records })
        .map_err(|e| CoreError::Other(format!("serialize annotations: {e}")))?;
    std::fs::write(&ann_path, json).map_err(|e| CoreError::io(ann_path.display().to_string(), e))?;
    Ok(ann_path)
}

pub fn save_png(img: &AnnotatedImage, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0] * 255.0).round() as u8,
                    (p[1] * 255.0).round() as u8,
                    (p[2] * 255.0).round() as u8,
                ]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| CoreError::Other(format!("write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_background_only() {
        let cfg = SynthConfig {
            num_neg: [0, 0],
            num_pos: [0, 0],
            ..SynthConfig::default()
        };
        let img = generate_image(&cfg, 0).unwrap();
        assert!(img.points.is_empty());
        assert_eq!(img.pixels.len(), 70 * 70 * 3);
    }

    #[test]
    fn deterministic_per_index() {
        let cfg = SynthConfig::default();
        let a = generate_image(&cfg, 3).unwrap();
        let b = generate_image(&cfg, 3).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.points, b.points);
        let c = generate_image(&cfg, 4).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn category_histogram_matches_config() {
        let cfg = SynthConfig {
            num_neg: [30, 30],
            num_pos: [10, 10],
            image_size: 96,
            ..SynthConfig::default()
        };
        let img = generate_image(&cfg, 0).unwrap();
        assert_eq!(img.points.len(), 40);
        assert_eq!(img.count_for_category(0), 30);
        assert_eq!(img.count_for_category(1), 10);
    }

    #[test]
    fn disc_centers_match_annotations() {
        let cfg = SynthConfig {
            num_neg: [3, 3],
            num_pos: [3, 3],
            background_amplitude: 0.0,
            ..SynthConfig::default()
        };
        let img = generate_image(&cfg, 1).unwrap();
        // at every annotated center the pixel must be stained, not background
        for p in &img.points {
            let px = img.pixel(p.y, p.x);
            let expected = if p.category_index == 1 {
                cfg.pos_color
            } else {
                cfg.neg_color
            };
            // overlaps can repaint centers with the later cell's color, so
            // only require it to be far from the background everywhere
            let bg_dist: f64 = (px[0] as f64 - 0.93).abs() + (px[1] as f64 - 0.90).abs();
            assert!(bg_dist > 0.2, "center not stained at {:?} ({px:?}, expected ~{expected:?})", p);
        }
    }

    #[test]
    fn infeasible_density_rejected() {
        let cfg = SynthConfig {
            image_size: 20,
            num_neg: [50, 50],
            num_pos: [0, 0],
            cell_radius: [4.0, 4.0],
            ..SynthConfig::default()
        };
        assert!(generate_image(&cfg, 0).is_err());
    }

    #[test]
    fn dataset_bytes_reproducible() {
        let cfg = SynthConfig {
            num_neg: [2, 5],
            num_pos: [1, 3],
            image_size: 40,
            seed: 11,
            ..SynthConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a1 = generate_dataset(&cfg, 5, d1.path()).unwrap();
        let a2 = generate_dataset(&cfg, 5, d2.path()).unwrap();
        assert_eq!(
            std::fs::read(&a1).unwrap(),
            std::fs::read(&a2).unwrap(),
            "annotation bytes differ"
        );
        for i in 0..5 {
            let p1 = d1.path().join(format!("images/synth_{i:05}.png"));
            let p2 = d2.path().join(format!("images/synth_{i:05}.png"));
            assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
        }
        // and the files round-trip through the loader
        let imgs = crate::datamodel::load_annotations(&a1).unwrap();
        assert_eq!(imgs.len(), 5);
    }
}
