//! PNG rendering of density maps and centroid overlays.

use std::path::Path;

use crate::datamodel::AnnotatedImage;
use crate::error::{CoreError, Result};

/// Block-grid density map rendered as a heatmap, each block drawn as a
/// `scale` x `scale` pixel square. Intensity saturates at `max_value`.
pub fn density_heatmap(
    density: &[f64],
    h_blocks: usize,
    w_blocks: usize,
    max_value: f64,
    scale: usize,
    hue: [f64; 3],
) -> image::RgbImage {
    let mut img = image::RgbImage::new((w_blocks * scale) as u32, (h_blocks * scale) as u32);
    for u in 0..h_blocks {
        for v in 0..w_blocks {
            let t = (density[u * w_blocks + v] / max_value).clamp(0.0, 1.0);
            let px = image::Rgb([
                (255.0 * (1.0 - t * (1.0 - hue[0]))) as u8,
                (255.0 * (1.0 - t * (1.0 - hue[1]))) as u8,
                (255.0 * (1.0 - t * (1.0 - hue[2]))) as u8,
            ]);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel((v * scale + dx) as u32, (u * scale + dy) as u32, px);
                }
            }
        }
    }
    img
}

/// The source image with centroid markers drawn at block centers:
/// blue crosses for category 0 (negative), red for category 1 (positive).
pub fn centroid_overlay(
    image: &AnnotatedImage,
    centroids_per_category: &[Vec<(usize, usize)>],
    block_size: usize,
) -> image::RgbImage {
    let mut img = image::RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let p = image.pixel(y, x);
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0] * 255.0) as u8,
                    (p[1] * 255.0) as u8,
                    (p[2] * 255.0) as u8,
                ]),
            );
        }
    }
    let colors = [image::Rgb([40u8, 70, 255]), image::Rgb([235u8, 30, 30])];
    for (cat, centroids) in centroids_per_category.iter().enumerate() {
        let color = colors[cat.min(colors.len() - 1)];
        for &(u, v) in centroids {
            let cy = (u * block_size + block_size / 2) as i64;
            let cx = (v * block_size + block_size / 2) as i64;
            for d in -3i64..=3 {
                for (yy, xx) in [(cy + d, cx), (cy, cx + d)] {
                    if yy >= 0 && xx >= 0 && (yy as usize) < image.height && (xx as usize) < image.width
                    {
                        img.put_pixel(xx as u32, yy as u32, color);
                    }
                }
            }
        }
    }
    img
}

pub fn save_image(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| CoreError::Other(format!("write {}: {e}", path.display())))
}
