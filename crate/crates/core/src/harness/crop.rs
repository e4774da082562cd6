//! Square crops around a box, resampled bilinearly to a fixed size.

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

/// Where a crop sits in its frame, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub frame_w: f64,
    pub frame_h: f64,
}

impl CropWindow {
    /// Square of side `factor · sqrt(w · h)` centred on a normalized box.
    pub fn around(bbox: [f64; 4], factor: f64, frame_w: usize, frame_h: usize) -> Result<Self> {
        if bbox.iter().any(|v| !v.is_finite()) || bbox[2] <= 0.0 || bbox[3] <= 0.0 {
            return Err(Error::Domain(format!("cannot crop around box {bbox:?}")));
        }
        if factor <= 0.0 {
            return Err(Error::Config(format!("crop factor must be positive, got {factor}")));
        }
        let (fw, fh) = (frame_w as f64, frame_h as f64);
        let side = factor * (bbox[2] * fw * bbox[3] * fh).sqrt();
        Ok(Self {
            x0: bbox[0] * fw - side / 2.0,
            y0: bbox[1] * fh - side / 2.0,
            side,
            frame_w: fw,
            frame_h: fh,
        })
    }

    /// Normalized frame box to normalized crop coordinates.
    pub fn to_crop(&self, b: [f64; 4]) -> [f64; 4] {
        [
            (b[0] * self.frame_w - self.x0) / self.side,
            (b[1] * self.frame_h - self.y0) / self.side,
            b[2] * self.frame_w / self.side,
            b[3] * self.frame_h / self.side,
        ]
    }

    /// Normalized crop box back to normalized frame coordinates.
    pub fn to_frame(&self, b: [f64; 4]) -> [f64; 4] {
        [
            (b[0] * self.side + self.x0) / self.frame_w,
            (b[1] * self.side + self.y0) / self.frame_h,
            b[2] * self.side / self.frame_w,
            b[3] * self.side / self.frame_h,
        ]
    }
}

/// Resamples the window of an `H × W × C` image to `out × out × C`.
/// Samples outside the frame read as zero.
pub fn crop_image(image: &Tensor, window: &CropWindow, out: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(dim_err!("crop expects H×W×C, got {shape:?}"));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let step = window.side / out as f64;
    let pixel = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(y as usize * w + x as usize) * c + ch]
        }
    };
    let mut data = Vec::with_capacity(out * out * c);
    for oy in 0..out {
        let sy = window.y0 + (oy as f64 + 0.5) * step - 0.5;
        let (y0, ty) = (sy.floor(), sy - sy.floor());
        for ox in 0..out {
            let sx = window.x0 + (ox as f64 + 0.5) * step - 0.5;
            let (x0, tx) = (sx.floor(), sx - sx.floor());
            let (yi, xi) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let top = pixel(yi, xi, ch) * (1.0 - tx) + pixel(yi, xi + 1, ch) * tx;
                let bot = pixel(yi + 1, xi, ch) * (1.0 - tx) + pixel(yi + 1, xi + 1, ch) * tx;
                data.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Tensor::new(vec![out, out, c], data)
}

/// Clamps a normalized box into the unit frame, keeping a minimum size.
pub fn clamp_to_frame(b: [f64; 4], min_size: f64) -> [f64; 4] {
    let w = b[2].clamp(min_size, 1.0);
    let h = b[3].clamp(min_size, 1.0);
    [b[0].clamp(w / 2.0, 1.0 - w / 2.0), b[1].clamp(h / 2.0, 1.0 - h / 2.0), w, h]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_window_reproduces_image() {
        let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let win = CropWindow::around([0.5, 0.5, 1.0, 1.0], 1.0, 4, 4).unwrap();
        let out = crop_image(&img, &win, 4).unwrap();
        assert!(out.bit_eq(&img));
    }

    #[test]
    fn outside_reads_zero() {
        let img = Tensor::full(&[8, 8, 3], 100.0);
        let win = CropWindow::around([0.0, 0.0, 0.25, 0.25], 2.0, 8, 8).unwrap();
        let out = crop_image(&img, &win, 4).unwrap();
        assert_eq!(out.at(0, 0), 0.0);
        assert_eq!(out.data()[(3 * 4 + 3) * 3], 100.0);
    }

    #[test]
    fn window_side_and_centre() {
        let win = CropWindow::around([0.5, 0.25, 0.1, 0.4], 4.0, 100, 100).unwrap();
        assert!((win.side - 4.0 * 20.0).abs() < 1e-12);
        let c = win.to_crop([0.5, 0.25, 0.1, 0.4]);
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
        assert!(CropWindow::around([0.5, 0.5, 0.0, 0.1], 2.0, 10, 10).is_err());
    }

    proptest! {
        #[test]
        fn box_mapping_round_trips(
            cx in 0.0f64..1.0, cy in 0.0f64..1.0, w in 0.01f64..1.0, h in 0.01f64..1.0,
            f in 1.0f64..5.0, q in prop::array::uniform4(0.0f64..1.0),
        ) {
            let win = CropWindow::around([cx, cy, w, h], f, 64, 48).unwrap();
            let back = win.to_crop(win.to_frame(q));
            for k in 0..4 {
                prop_assert!((back[k] - q[k]).abs() < 1e-9);
            }
        }
    }
}
