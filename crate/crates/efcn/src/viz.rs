//! Mask visualization: renders a scored segmentation as an RGB overlay.
//!
//! The overlay encodes the *kind* of each decision rather than the raw
//! class map:
//!
//! * **red** — the assigned set misses the true label entirely (or names
//!   a known class on a pixel whose true object is outside the frame);
//! * **green** — a cautious multi-class assignment short of the whole
//!   frame;
//! * **pink** — the whole-frame set Ω ("don't know");
//! * otherwise a dimmed version of the class palette color, marking a
//!   confident, correct single-class decision.
//!
//! Buffers are plain 8-bit RGB, ready for [`crate::io::save_ppm`].

use crate::data::class_color;
use crate::frame::PixelLabel;
use crate::metrics::SegResult;
use crate::{Error, Frame, Result};

pub const RED: [u8; 3] = [220, 40, 40];
pub const GREEN: [u8; 3] = [40, 200, 70];
pub const PINK: [u8; 3] = [255, 105, 180];

/// How much correct-singleton class colors are dimmed, so the saturated
/// alert colors stand out.
const DIM: f64 = 0.6;

/// Renders the decision overlay; returns (rgb bytes, height, width).
pub fn render_overlay(result: &SegResult, frame: &Frame) -> Result<(Vec<u8>, usize, usize)> {
    let (h, w, m) = result.betp.dims3()?;
    if frame.class_count() != m {
        return Err(Error::Dimension {
            context: "frame class count vs BetP channels",
            expected: m,
            got: frame.class_count(),
        });
    }
    let omega = frame.omega();
    let mut rgb = Vec::with_capacity(h * w * 3);
    for px in 0..h * w {
        let assigned = result.assigned[px];
        let color = if assigned == omega {
            PINK
        } else if assigned.cardinality() > 1 {
            GREEN
        } else {
            let missed = match result.labels[px] {
                PixelLabel::Known(label) => assigned.intersection(label).is_empty(),
                // A single known class claimed on an unknown object is a
                // misclassification; only cautious sets escape red here.
                PixelLabel::Novel(_) => true,
            };
            if missed {
                RED
            } else {
                let index = assigned.iter().next().expect("assigned sets are non-empty");
                let c = class_color(index);
                [
                    (c[0] * DIM * 255.0).round() as u8,
                    (c[1] * DIM * 255.0).round() as u8,
                    (c[2] * DIM * 255.0).round() as u8,
                ]
            }
        };
        rgb.extend_from_slice(&color);
    }
    Ok((rgb, h, w))
}
