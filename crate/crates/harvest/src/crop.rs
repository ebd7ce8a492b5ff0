//! Local zoom-in tool: crops a region of an image file.

use std::path::{Path, PathBuf};

use image::GenericImageView;
use thiserror::Error;
use tracevote_core::BBox;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("cannot read image {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("cannot write crop {path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub path: PathBuf,
    /// Box actually cropped, in whole pixels inside the image.
    pub bbox: BBox,
    pub clamped: bool,
}

/// Snaps `bbox` outward to whole pixels and clamps it to a `width` x `height`
/// image, keeping at least one pixel on each side.
pub fn clamp_bbox(bbox: &BBox, width: u32, height: u32) -> (BBox, bool) {
    let (w, h) = (width as f64, height as f64);
    let snap = |lo: f64, hi: f64, max: f64| {
        let lo = if lo.is_finite() { lo.floor().clamp(0.0, max - 1.0) } else { 0.0 };
        let hi = if hi.is_finite() { hi.ceil().clamp(lo + 1.0, max) } else { max };
        (lo, hi)
    };
    let (x0, x1) = snap(bbox.x_min, bbox.x_max, w);
    let (y0, y1) = snap(bbox.y_min, bbox.y_max, h);
    let out = BBox::new(x0, y0, x1, y1);
    let outside = bbox.x_min < 0.0 || bbox.y_min < 0.0 || bbox.x_max > w || bbox.y_max > h;
    let degenerate = bbox.validate().is_err();
    if outside || degenerate {
        log::warn!(
            "bbox {:?} clamped to {:?} for a {width}x{height} image",
            <[f64; 4]>::from(*bbox),
            <[f64; 4]>::from(out)
        );
    }
    (out, outside || degenerate)
}

/// Crops `bbox` out of `image` and writes it as PNG to `out`.
pub fn crop_tool(image: &Path, bbox: &BBox, out: &Path) -> Result<Crop, ToolError> {
    let img = image::open(image).map_err(|e| ToolError::Unreadable {
        path: image.to_owned(),
        reason: e.to_string(),
    })?;
    let (width, height) = img.dimensions();
    let (bbox, clamped) = clamp_bbox(bbox, width, height);
    let region = img.crop_imm(
        bbox.x_min as u32,
        bbox.y_min as u32,
        bbox.width() as u32,
        bbox.height() as u32,
    );
    region
        .save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| ToolError::Write {
            path: out.to_owned(),
            reason: e.to_string(),
        })?;
    Ok(Crop {
        path: out.to_owned(),
        bbox,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn gradient(dir: &Path, w: u32, h: u32) -> PathBuf {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
        let path = dir.join("src.png");
        img.save(&path).unwrap();
        path
    }

    #[test]
    fn full_image_crop_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let src = gradient(dir.path(), 100, 80);
        let out = dir.path().join("c.png");
        let c = crop_tool(&src, &BBox::new(0.0, 0.0, 100.0, 80.0), &out).unwrap();
        assert!(!c.clamped);
        let a = image::open(&src).unwrap().to_rgb8();
        let b = image::open(&out).unwrap().to_rgb8();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn crop_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let src = gradient(dir.path(), 100, 100);
        let out = dir.path().join("c.png");
        crop_tool(&src, &BBox::new(10.0, 10.0, 20.0, 20.0), &out).unwrap();
        let b = image::open(&out).unwrap().to_rgb8();
        assert_eq!(b.dimensions(), (10, 10));
        assert_eq!(b.get_pixel(0, 0), &Rgb([10, 10, 0]));
    }

    #[test]
    fn out_of_bounds_is_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let src = gradient(dir.path(), 100, 100);
        let out = dir.path().join("c.png");
        let c = crop_tool(&src, &BBox::new(90.0, 50.0, 130.0, 170.0), &out).unwrap();
        assert!(c.clamped);
        assert_eq!(<[f64; 4]>::from(c.bbox), [90.0, 50.0, 100.0, 100.0]);
        assert_eq!(image::open(&out).unwrap().dimensions(), (10, 50));

        let (b, clamped) = clamp_bbox(&BBox::new(200.0, 200.0, 300.0, 300.0), 100, 100);
        assert!(clamped && b.validate().is_ok());
    }

    #[test]
    fn unreadable_image() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not an image").unwrap();
        let err = crop_tool(&bad, &BBox::new(0.0, 0.0, 1.0, 1.0), &dir.path().join("c.png"));
        assert!(matches!(err, Err(ToolError::Unreadable { .. })));
    }
}
