//! Center-offset box parameterization:
//! `(Δcx / w_a, Δcy / h_a, ln(w / w_a), ln(h / h_a))`.

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Caps log-scale offsets when decoding so a wild regression output cannot
/// overflow `exp`.
const MAX_LOG_SCALE: f64 = 8.0;

pub fn encode_box(anchor: &BoundingBox, truth: &BoundingBox) -> Result<[f64; 4]> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::InvalidArgument(
            "anchor must have positive area".into(),
        ));
    }
    let (tw, th) = (truth.width(), truth.height());
    if tw <= 0.0 || th <= 0.0 {
        return Err(Error::InvalidArgument(
            "truth box must have positive width and height".into(),
        ));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = truth.center();
    Ok([
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ])
}

pub fn decode_box(anchor: &BoundingBox, offsets: &[f64; 4]) -> BoundingBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let cx = acx + offsets[0] * aw;
    let cy = acy + offsets[1] * ah;
    let w = aw * offsets[2].min(MAX_LOG_SCALE).exp();
    let h = ah * offsets[3].min(MAX_LOG_SCALE).exp();
    BoundingBox::from_center(cx, cy, w, h)
}
