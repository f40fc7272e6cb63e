//! Core data types: categories, count bins, point-annotated images, and
//! conversion of point annotations into blockwise classification and density
//! targets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Ordered, fixed set of cell category names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    names: Vec<String>,
}

impl CategorySet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(CoreError::InvalidArgument(
                "category set must contain at least one category".into(),
            ));
        }
        for (i, a) in names.iter().enumerate() {
            if names[i + 1..].contains(a) {
                return Err(CoreError::InvalidArgument(format!(
                    "duplicate category name `{a}`"
                )));
            }
        }
        Ok(CategorySet { names })
    }

    /// The reporting order used throughout: negative first, positive second.
    pub fn default_ihc() -> Self {
        CategorySet {
            names: vec![
                "negative tumor cell".to_string(),
                "positive tumor cell".to_string(),
            ],
        }
    }

    pub fn single(name: &str) -> Self {
        CategorySet {
            names: vec![name.to_string()],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Discrete count bins {0}, {1}, ..., {n-1}, [n, inf).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountBinning {
    n: usize,
}

impl CountBinning {
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(CoreError::InvalidArgument(
                "count binning requires n >= 1".into(),
            ));
        }
        Ok(CountBinning { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_bins(&self) -> usize {
        self.n + 1
    }

    /// Bin index for a raw count: min(count, n).
    pub fn bin_of(&self, count: usize) -> usize {
        count.min(self.n)
    }

    /// Scalar value a bin contributes to expectations. The open bin [n, inf)
    /// is represented by its truncation threshold n.
    pub fn representative(&self, bin: usize) -> f64 {
        debug_assert!(bin <= self.n);
        bin as f64
    }

    pub fn representatives(&self) -> Vec<f64> {
        (0..=self.n).map(|b| self.representative(b)).collect()
    }
}

/// One annotated cell center in pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: usize,
    pub y: usize,
    pub category_index: usize,
}

/// Raster image (values in [0,1], row-major RGB) plus point ground truth.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// h * w * 3 interleaved RGB
    pub pixels: Vec<f32>,
    pub points: Vec<PointAnnotation>,
}

impl AnnotatedImage {
    pub fn new(
        id: String,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        points: Vec<PointAnnotation>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "image `{id}` has zero dimension"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(CoreError::InvalidArgument(format!(
                "image `{id}`: pixel buffer size {} does not match {height}x{width}x3",
                pixels.len()
            )));
        }
        for p in &points {
            if p.x >= width || p.y >= height {
                return Err(CoreError::PointOutOfBounds {
                    id,
                    x: p.x as i64,
                    y: p.y as i64,
                    w: width,
                    h: height,
                });
            }
        }
        Ok(AnnotatedImage {
            id,
            height,
            width,
            pixels,
            points,
        })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn count_for_category(&self, cat: usize) -> usize {
        self.points
            .iter()
            .filter(|p| p.category_index == cat)
            .count()
    }
}

/// Blockwise ground truth: integer count map and truncated class-index map,
/// both laid out [u][v][category] with u = row block, v = column block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTargets {
    pub h_blocks: usize,
    pub w_blocks: usize,
    pub m: usize,
    pub count_map: Vec<u32>,
    pub class_index_map: Vec<u32>,
}

impl BlockTargets {
    #[inline]
    fn idx(&self, u: usize, v: usize, cat: usize) -> usize {
        (u * self.w_blocks + v) * self.m + cat
    }

    pub fn count(&self, u: usize, v: usize, cat: usize) -> u32 {
        self.count_map[self.idx(u, v, cat)]
    }

    pub fn class_index(&self, u: usize, v: usize, cat: usize) -> u32 {
        self.class_index_map[self.idx(u, v, cat)]
    }

    pub fn total_for_category(&self, cat: usize) -> u64 {
        let mut s = 0u64;
        for b in 0..self.h_blocks * self.w_blocks {
            s += self.count_map[b * self.m + cat] as u64;
        }
        s
    }

    /// Truncated density the model is supervised toward: min(count, n).
    pub fn density_for_category(&self, cat: usize) -> Vec<f64> {
        (0..self.h_blocks * self.w_blocks)
            .map(|b| self.class_index_map[b * self.m + cat] as f64)
            .collect()
    }

    /// Ground-truth bin index per block for a category, row-major.
    pub fn bins_for_category(&self, cat: usize) -> Vec<usize> {
        (0..self.h_blocks * self.w_blocks)
            .map(|b| self.class_index_map[b * self.m + cat] as usize)
            .collect()
    }
}

/// Buckets points into p x p blocks. Blocks cover the largest multiple of p
/// inside the image; points in the remainder strip are dropped with a warning.
pub fn build_block_targets(
    points: &[PointAnnotation],
    height: usize,
    width: usize,
    p: usize,
    binning: CountBinning,
    m: usize,
) -> Result<BlockTargets> {
    if p == 0 {
        return Err(CoreError::InvalidArgument(
            "patch size p must be > 0".into(),
        ));
    }
    if m == 0 {
        return Err(CoreError::InvalidArgument("m must be >= 1".into()));
    }
    let h_blocks = height / p;
    let w_blocks = width / p;
    let mut count_map = vec![0u32; h_blocks * w_blocks * m];
    let mut dropped = 0usize;
    for pt in points {
        if pt.category_index >= m {
            return Err(CoreError::InvalidArgument(format!(
                "point category {} out of range for m = {m}",
                pt.category_index
            )));
        }
        let u = pt.y / p;
        let v = pt.x / p;
        if u >= h_blocks || v >= w_blocks {
            dropped += 1;
            continue;
        }
        count_map[(u * w_blocks + v) * m + pt.category_index] += 1;
    }
    if dropped > 0 {
        log::warn!(
            "build_block_targets: dropped {dropped} point(s) in the remainder strip \
             ({height}x{width} with p = {p})"
        );
    }
    let class_index_map = count_map
        .iter()
        .map(|&c| binning.bin_of(c as usize) as u32)
        .collect();
    Ok(BlockTargets {
        h_blocks,
        w_blocks,
        m,
        count_map,
        class_index_map,
    })
}

// ── annotation file format ──────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<AnnotationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub path: String,
    pub height: usize,
    pub width: usize,
    /// [x, y, category_index] triples
    pub points: Vec<[i64; 3]>,
}

/// Reads the dataset annotation JSON and loads every referenced image.
/// Image paths are resolved relative to the annotation file's directory.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    let records = load_annotation_records(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    records
        .images
        .iter()
        .map(|rec| load_record_image(base, rec))
        .collect()
}

/// Parses the annotation JSON without touching image files.
pub fn load_annotation_records(path: &Path) -> Result<AnnotationFile> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| {
        CoreError::Annotation(format!(
            "{}: malformed annotation at line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    for rec in &file.images {
        validate_record_points(rec)?;
    }
    Ok(file)
}

fn validate_record_points(rec: &AnnotationRecord) -> Result<()> {
    for &[x, y, cat] in &rec.points {
        if x < 0 || y < 0 || x >= rec.width as i64 || y >= rec.height as i64 {
            return Err(CoreError::PointOutOfBounds {
                id: rec.id.clone(),
                x,
                y,
                w: rec.width,
                h: rec.height,
            });
        }
        if cat < 0 {
            return Err(CoreError::Annotation(format!(
                "image `{}`: negative category index {cat}",
                rec.id
            )));
        }
    }
    Ok(())
}

pub fn load_record_image(base: &Path, rec: &AnnotationRecord) -> Result<AnnotatedImage> {
    let img_path: PathBuf = base.join(&rec.path);
    let img = image::open(&img_path)
        .map_err(|e| CoreError::Annotation(format!("{}: {e}", img_path.display())))?
        .to_rgb8();
    if (img.height() as usize, img.width() as usize) != (rec.height, rec.width) {
        return Err(CoreError::Annotation(format!(
            "image `{}`: file is {}x{} but annotation says {}x{}",
            rec.id,
            img.height(),
            img.width(),
            rec.height,
            rec.width
        )));
    }
    let pixels: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    let points = rec
        .points
        .iter()
        .map(|&[x, y, cat]| PointAnnotation {
            x: x as usize,
            y: y as usize,
            category_index: cat as usize,
        })
        .collect();
    AnnotatedImage::new(rec.id.clone(), rec.height, rec.width, pixels, points)
}

/// A dataset backed either by memory or by an annotation file on disk.
pub enum Dataset {
    InMemory(Vec<AnnotatedImage>),
    OnDisk {
        base: PathBuf,
        records: Vec<AnnotationRecord>,
    },
}

impl Dataset {
    pub fn open(annotation_path: &Path) -> Result<Self> {
        let file = load_annotation_records(annotation_path)?;
        Ok(Dataset::OnDisk {
            base: annotation_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .to_path_buf(),
            records: file.images,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::InMemory(v) => v.len(),
            Dataset::OnDisk { records, .. } => records.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<AnnotatedImage> {
        match self {
            Dataset::InMemory(v) => Ok(v[i].clone()),
            Dataset::OnDisk { base, records } => load_record_image(base, &records[i]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: usize, y: usize, cat: usize) -> PointAnnotation {
        PointAnnotation {
            x,
            y,
            category_index: cat,
        }
    }

    #[test]
    fn binning_basics() {
        let b = CountBinning::new(4).unwrap();
        assert_eq!(b.num_bins(), 5);
        assert_eq!(b.bin_of(0), 0);
        assert_eq!(b.bin_of(3), 3);
        assert_eq!(b.bin_of(9), 4);
        assert_eq!(b.representatives(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let reps = b.representatives();
        assert!(reps.windows(2).all(|w| w[0] < w[1]));
        assert!(CountBinning::new(0).is_err());
    }

    #[test]
    fn category_set_rejects_duplicates() {
        assert!(CategorySet::new(vec!["a".into(), "a".into()]).is_err());
        assert!(CategorySet::new(vec![]).is_err());
        let c = CategorySet::default_ihc();
        assert_eq!(c.len(), 2);
        assert_eq!(c.name(0), "negative tumor cell");
        assert_eq!(c.name(1), "positive tumor cell");
    }

    #[test]
    fn empty_points_give_zero_maps() {
        let b = CountBinning::new(4).unwrap();
        let t = build_block_targets(&[], 28, 28, 14, b, 2).unwrap();
        assert_eq!((t.h_blocks, t.w_blocks), (2, 2));
        assert!(t.count_map.iter().all(|&c| c == 0));
        assert!(t.class_index_map.iter().all(|&c| c == 0));
    }

    #[test]
    fn single_point_lands_in_first_block() {
        let b = CountBinning::new(4).unwrap();
        let t = build_block_targets(&[pt(3, 3, 0)], 28, 28, 14, b, 2).unwrap();
        assert_eq!(t.count(0, 0, 0), 1);
        assert_eq!(t.count_map.iter().map(|&c| c as u64).sum::<u64>(), 1);
    }

    #[test]
    fn colocated_points_truncate_to_open_bin() {
        let b = CountBinning::new(4).unwrap();
        let points: Vec<_> = (0..6).map(|_| pt(5, 5, 0)).collect();
        let t = build_block_targets(&points, 28, 28, 14, b, 1).unwrap();
        assert_eq!(t.count(0, 0, 0), 6);
        assert_eq!(t.class_index(0, 0, 0), 4);
    }

    #[test]
    fn boundary_point_uses_floor_division() {
        let b = CountBinning::new(4).unwrap();
        // x = 14 with p = 14 belongs to block column 1
        let t = build_block_targets(&[pt(14, 0, 0)], 28, 28, 14, b, 1).unwrap();
        assert_eq!(t.count(0, 1, 0), 1);
    }

    #[test]
    fn remainder_strip_points_are_dropped() {
        let b = CountBinning::new(4).unwrap();
        // 30x30 with p = 14 -> 2x2 blocks covering [0, 28); point at 29 is dropped
        let t = build_block_targets(&[pt(29, 29, 0), pt(1, 1, 0)], 30, 30, 14, b, 1).unwrap();
        assert_eq!(t.count_map.iter().map(|&c| c as u64).sum::<u64>(), 1);
    }

    #[test]
    fn conservation_and_truncation_consistency() {
        let b = CountBinning::new(4).unwrap();
        let mut rng = crate::rng::SplitMix64::new(9);
        for _ in 0..25 {
            let n_pts = rng.next_range(0, 60) as usize;
            let points: Vec<_> = (0..n_pts)
                .map(|_| {
                    pt(
                        rng.next_range(0, 55) as usize,
                        rng.next_range(0, 55) as usize,
                        rng.next_range(0, 1) as usize,
                    )
                })
                .collect();
            let t = build_block_targets(&points, 56, 56, 14, b, 2).unwrap();
            let total: u64 = t.count_map.iter().map(|&c| c as u64).sum();
            assert_eq!(total, n_pts as u64);
            for (c, k) in t.count_map.iter().zip(&t.class_index_map) {
                assert_eq!(*k, (*c).min(4));
            }
        }
    }

    #[test]
    fn point_bounds_checked_on_image() {
        let img = AnnotatedImage::new("t".into(), 4, 4, vec![0.0; 4 * 4 * 3], vec![pt(4, 0, 0)]);
        assert!(matches!(img, Err(CoreError::PointOutOfBounds { .. })));
    }

    #[test]
    fn annotation_roundtrip_via_json() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([x as u8, y as u8, 0]));
        img.save(dir.path().join("img0.png")).unwrap();
        // out-of-bounds x = 10 on an 8-wide image must fail
        let file = AnnotationFile {
            images: vec![AnnotationRecord {
                id: "img0".into(),
                path: "img0.png".into(),
                height: 8,
                width: 8,
                points: vec![[10, 12, 1]],
            }],
        };
        let p = dir.path().join("ann.json");
        std::fs::write(&p, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(
            load_annotations(&p),
            Err(CoreError::PointOutOfBounds { .. })
        ));

        let file = AnnotationFile {
            images: vec![AnnotationRecord {
                id: "img0".into(),
                path: "img0.png".into(),
                height: 8,
                width: 8,
                points: vec![[6, 2, 1]],
            }],
        };
        std::fs::write(&p, serde_json::to_string(&file).unwrap()).unwrap();
        let imgs = load_annotations(&p).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].points, vec![pt(6, 2, 1)]);

        // empty annotation file -> empty list
        std::fs::write(&p, r#"{"images":[]}"#).unwrap();
        assert!(load_annotations(&p).unwrap().is_empty());

        // malformed json reports a line number
        std::fs::write(&p, "{\n \"images\": [,]\n}").unwrap();
        let err = load_annotations(&p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
