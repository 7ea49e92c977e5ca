//! Cropping images by detection boxes.

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, ImageId};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BoundingBox};

/// Crops smaller than this on either side are upscaled to it.
pub const MIN_CROP_SIDE: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub image_id: ImageId,
    /// 1-based position in score order among the produced crops.
    pub rank: usize,
    /// Padded, clipped pixel rectangle actually cut from the image.
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub padding: f64,
}

/// Grows `b` by `padding` of its width/height on every side, clips it to
/// the image and snaps outward to whole pixels.
pub fn padded_region(b: &BoundingBox, padding: f64, width: u32, height: u32) -> BoundingBox {
    let (dx, dy) = (b.width() * padding, b.height() * padding);
    let grown = BoundingBox::new(b.x_min - dx, b.y_min - dy, b.x_max + dx, b.y_max + dy);
    let c = clip_box(&grown, width as f64, height as f64);
    BoundingBox::new(
        c.x_min.floor(),
        c.y_min.floor(),
        c.x_max.ceil(),
        c.y_max.ceil(),
    )
}

/// Cuts `region` (already pixel-aligned) out of `image`, upscaling tiny
/// crops with nearest-neighbour sampling.
pub fn cut(image: &RgbImage, region: &BoundingBox) -> RgbImage {
    let x = (region.x_min.max(0.0) as u32).min(image.width() - 1);
    let y = (region.y_min.max(0.0) as u32).min(image.height() - 1);
    let w = (region.width() as u32).clamp(1, image.width() - x);
    let h = (region.height() as u32).clamp(1, image.height() - y);
    let crop = imageops::crop_imm(image, x, y, w, h).to_image();
    if w < MIN_CROP_SIDE || h < MIN_CROP_SIDE {
        imageops::resize(
            &crop,
            w.max(MIN_CROP_SIDE),
            h.max(MIN_CROP_SIDE),
            FilterType::Nearest,
        )
    } else {
        crop
    }
}

/// Crops for the top `m` detections, which must be sorted by descending
/// score. Boxes with no area inside the image are skipped.
pub fn make_crops(
    detections: &[Detection],
    image: &RgbImage,
    m: usize,
    padding: f64,
) -> Result<Vec<(CropSpec, RgbImage)>> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    if !(padding >= 0.0 && padding.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "padding must be a non-negative number, got {padding}"
        )));
    }
    if detections.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::InvalidArgument(
            "detections must be sorted by descending score".into(),
        ));
    }
    let (w, h) = image.dimensions();
    let mut out = Vec::new();
    for d in detections {
        if out.len() == m {
            break;
        }
        let clipped = clip_box(&d.bbox, w as f64, h as f64);
        if clipped.is_degenerate() {
            continue;
        }
        let region = padded_region(&clipped, padding, w, h);
        let pixels = cut(image, &region);
        out.push((
            CropSpec {
                image_id: d.image_id,
                rank: out.len() + 1,
                bbox: region,
                padding,
            },
            pixels,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn img(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]))
    }

    fn det(b: BoundingBox, s: f64) -> Detection {
        Detection::agnostic(1, b, s)
    }

    #[test]
    fn whole_image_crop_is_the_image() {
        let im = img(20, 12);
        let crops = make_crops(
            &[det(BoundingBox::new(0.0, 0.0, 20.0, 12.0), 0.9)],
            &im,
            1,
            0.0,
        )
        .unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].1, im);
    }

    #[test]
    fn fewer_detections_than_m() {
        let im = img(50, 50);
        let dets: Vec<_> = (0..4)
            .map(|i| {
                det(
                    BoundingBox::new(i as f64, 0.0, 10.0 + i as f64, 10.0),
                    1.0 - i as f64 * 0.1,
                )
            })
            .collect();
        let crops = make_crops(&dets, &im, 10, 0.0).unwrap();
        assert_eq!(crops.len(), 4);
        assert_eq!(
            crops.iter().map(|c| c.0.rank).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert!(make_crops(&[], &im, 3, 0.0).unwrap().is_empty());
    }

    #[test]
    fn padding_closed_form() {
        let r = padded_region(&BoundingBox::new(10.0, 10.0, 20.0, 20.0), 0.1, 100, 100);
        assert_eq!(r, BoundingBox::new(9.0, 9.0, 21.0, 21.0));
        let r = padded_region(&BoundingBox::new(0.0, 0.0, 10.0, 10.0), 0.5, 100, 100);
        assert_eq!(r, BoundingBox::new(0.0, 0.0, 15.0, 15.0));
    }

    #[test]
    fn tiny_crops_are_upscaled_and_deterministic() {
        let im = img(40, 40);
        let d = [det(BoundingBox::new(3.0, 3.0, 6.0, 5.0), 0.5)];
        let a = make_crops(&d, &im, 1, 0.0).unwrap();
        let b = make_crops(&d, &im, 1, 0.0).unwrap();
        assert_eq!(a[0].1.dimensions(), (8, 8));
        assert_eq!(a[0].1.as_raw(), b[0].1.as_raw());
    }

    #[test]
    fn rejects_bad_input() {
        let im = img(10, 10);
        assert!(make_crops(&[], &im, 0, 0.0).is_err());
        let unsorted = [
            det(BoundingBox::new(0.0, 0.0, 2.0, 2.0), 0.1),
            det(BoundingBox::new(0.0, 0.0, 2.0, 2.0), 0.9),
        ];
        assert!(make_crops(&unsorted, &im, 2, 0.0).is_err());
    }
}
