//! Ranked global-to-local patch groups.
//!
//! A group is built by placing one M x M window (seeded-random location),
//! extracting progressively smaller concentric crops, and resizing everything
//! back to M x M. Nesting guarantees that true cell counts are non-decreasing
//! along the group, which is the label-free ordinal signal the teacher
//! selection stage consumes.

use crate::datamodel::{AnnotatedImage, PointAnnotation};
use crate::error::{CoreError, Result};
use crate::rng::SplitMix64;

/// A model-input image patch. Carries the point annotations that fall inside
/// it (in patch coordinates, after resizing) so synthetic teachers and tests
/// can recover exact counts; `None` means the patch came from an unannotated
/// source. Real encoders ignore the metadata entirely.
#[derive(Debug, Clone)]
pub struct Patch {
    pub side: usize,
    /// side * side * 3 interleaved RGB
    pub pixels: Vec<f32>,
    pub points: Option<Vec<ScaledPoint>>,
    pub source_id: String,
}

/// Sub-pixel point position in patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledPoint {
    pub x: f64,
    pub y: f64,
    pub category_index: usize,
}

impl Patch {
    /// Patch without count metadata (e.g. an arbitrary input image at
    /// prediction time).
    pub fn from_raw(side: usize, pixels: Vec<f32>, source_id: String) -> Self {
        assert_eq!(pixels.len(), side * side * 3);
        Patch {
            side,
            pixels,
            points: None,
            source_id,
        }
    }

    pub fn has_metadata(&self) -> bool {
        self.points.is_some()
    }

    pub fn total_count(&self) -> Option<usize> {
        self.points.as_ref().map(|p| p.len())
    }

    pub fn count_for_category(&self, cat: usize) -> Option<usize> {
        self.points
            .as_ref()
            .map(|pts| pts.iter().filter(|p| p.category_index == cat).count())
    }

    /// Count of category points per p x p block, row-major over blocks.
    pub fn block_counts(&self, p: usize, m: usize) -> Option<Vec<u32>> {
        let pts = self.points.as_ref()?;
        let blocks = self.side / p;
        let mut out = vec![0u32; blocks * blocks * m];
        for pt in pts {
            let u = (pt.y.max(0.0) as usize / p).min(blocks - 1);
            let v = (pt.x.max(0.0) as usize / p).min(blocks - 1);
            if pt.category_index < m {
                out[(u * blocks + v) * m + pt.category_index] += 1;
            }
        }
        Some(out)
    }
}

/// k center-aligned crops of one image, resized to a common M x M.
#[derive(Debug, Clone)]
pub struct RankedPatchGroup {
    pub patches: Vec<Patch>,
    /// pre-resize side lengths, non-decreasing
    pub crop_sizes: Vec<usize>,
    pub source_id: String,
}

impl RankedPatchGroup {
    pub fn k(&self) -> usize {
        self.patches.len()
    }

    pub fn true_counts(&self) -> Vec<usize> {
        self.patches
            .iter()
            .map(|p| p.total_count().unwrap_or(0))
            .collect()
    }
}

/// All ordered index pairs (i, j) with i < j; the prior is
/// count(patch_i) <= count(patch_j). Empty for k < 2.
pub fn group_count_order(k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Builds the ranked group. `ratios` must be ascending and end at 1; the
/// largest crop is an M x M window at a seeded-uniform position, every
/// smaller crop of side round(M * ratio) shares its center.
pub fn make_ranked_group(
    image: &AnnotatedImage,
    m_size: usize,
    ratios: &[f64],
    seed: u64,
) -> Result<RankedPatchGroup> {
    if ratios.is_empty() {
        return Err(CoreError::InvalidArgument("ratio list is empty".into()));
    }
    for r in ratios {
        if !(*r > 0.0 && *r <= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "scale ratio {r} outside (0, 1]"
            )));
        }
    }
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(CoreError::InvalidArgument(
            "ratios must be sorted ascending".into(),
        ));
    }
    if (ratios[ratios.len() - 1] - 1.0).abs() > 1e-12 {
        return Err(CoreError::InvalidArgument("last ratio must be 1".into()));
    }
    if image.height < m_size || image.width < m_size {
        return Err(CoreError::ImageTooSmall {
            h: image.height,
            w: image.width,
            m: m_size,
        });
    }

    let mut rng = SplitMix64::substream(seed, 0x6372_6f70); // "crop"
    let y0 = rng.next_range(0, (image.height - m_size) as u64) as usize;
    let x0 = rng.next_range(0, (image.width - m_size) as u64) as usize;

    let mut patches = Vec::with_capacity(ratios.len());
    let mut crop_sizes = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let side = round_half_up(m_size as f64 * ratio).max(1);
        // concentric inside the largest window; floor keeps crops nested
        let off = (m_size - side) / 2;
        let (cy, cx) = (y0 + off, x0 + off);
        patches.push(extract_and_resize(image, cy, cx, side, m_size)?);
        crop_sizes.push(side);
    }
    Ok(RankedPatchGroup {
        patches,
        crop_sizes,
        source_id: image.id.clone(),
    })
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Crops a side x side window at (top, left) and bilinearly resizes it to
/// out_side x out_side, carrying contained points into patch coordinates.
pub fn extract_and_resize(
    image: &AnnotatedImage,
    top: usize,
    left: usize,
    side: usize,
    out_side: usize,
) -> Result<Patch> {
    if top + side > image.height || left + side > image.width {
        return Err(CoreError::InvalidArgument(format!(
            "crop ({top}, {left}) + {side} exceeds image {}x{}",
            image.height, image.width
        )));
    }
    let scale = side as f64 / out_side as f64;
    let mut pixels = vec![0.0f32; out_side * out_side * 3];
    for oy in 0..out_side {
        for ox in 0..out_side {
            // pixel-center sampling, clamped at the crop border
            let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let y1 = sy.floor() as usize;
            let x1 = sx.floor() as usize;
            let y2 = (y1 + 1).min(side - 1);
            let x2 = (x1 + 1).min(side - 1);
            let ty = sy - y1 as f64;
            let tx = sx - x1 as f64;
            let i = (oy * out_side + ox) * 3;
            for c in 0..3 {
                let p11 = image.pixel(top + y1, left + x1)[c] as f64;
                let p12 = image.pixel(top + y1, left + x2)[c] as f64;
                let p21 = image.pixel(top + y2, left + x1)[c] as f64;
                let p22 = image.pixel(top + y2, left + x2)[c] as f64;
                let v = p11 * (1.0 - ty) * (1.0 - tx)
                    + p12 * (1.0 - ty) * tx
                    + p21 * ty * (1.0 - tx)
                    + p22 * ty * tx;
                pixels[i + c] = v as f32;
            }
        }
    }
    let inv = out_side as f64 / side as f64;
    let points = image
        .points
        .iter()
        .filter(|p| p.y >= top && p.y < top + side && p.x >= left && p.x < left + side)
        .map(|p| ScaledPoint {
            x: (p.x - left) as f64 * inv,
            y: (p.y - top) as f64 * inv,
            category_index: p.category_index,
        })
        .collect();
    Ok(Patch {
        side: out_side,
        pixels,
        points: Some(points),
        source_id: image.id.clone(),
    })
}

/// Whole image resized to M x M; the standard fine-tuning / inference input.
pub fn full_resize_patch(image: &AnnotatedImage, m_size: usize) -> Result<Patch> {
    let side = image.height.min(image.width);
    extract_and_resize(image, 0, 0, side, m_size)
}

/// Patch points quantized back to integer annotations (for target building).
/// Empty when the patch has no metadata.
pub fn quantized_points(patch: &Patch) -> Vec<PointAnnotation> {
    patch
        .points
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .map(|p| PointAnnotation {
            x: (p.x.max(0.0) as usize).min(patch.side - 1),
            y: (p.y.max(0.0) as usize).min(patch.side - 1),
            category_index: p.category_index,
        })
        .collect()
}
