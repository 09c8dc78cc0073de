//! Planar floating-point RGB images and the resampling primitives shared by
//! preprocessing and augmentation.

use image::RgbImage;

/// Three-channel image stored as planes of `f32` samples on the 0–255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PlanarImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(w, h);
        let plane = w * h;
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                out.data[c * plane + i] = f32::from(px[c]);
            }
        }
        out
    }

    /// Rounds to the nearest integer (halves away from zero) and clamps to 0–255.
    pub fn to_rgb(&self) -> RgbImage {
        let plane = self.width * self.height;
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            for c in 0..3 {
                px[c] = self.data[c * plane + i].round().clamp(0.0, 255.0) as u8;
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample with edge replication outside the image.
    pub fn sample(&self, c: usize, x: f32, y: f32) -> f32 {
        let plane = self.plane(c);
        let max_x = (self.width - 1) as f32;
        let max_y = (self.height - 1) as f32;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor();
        let y0 = y.floor();
        let (tx, ty) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let at = |xx: usize, yy: usize| plane[yy * self.width + xx];
        let top = lerp(at(x0, y0), at(x1, y0), tx);
        let bottom = lerp(at(x0, y1), at(x1, y1), tx);
        lerp(top, bottom, ty)
    }

    /// Resamples the rectangle `(x, y, w, h)` (pixel units, may be fractional)
    /// onto a `out_w × out_h` grid using half-pixel centers.
    pub fn crop_resize(&self, rect: (f32, f32, f32, f32), out_w: usize, out_h: usize) -> Self {
        let (rx, ry, rw, rh) = rect;
        let sx = rw / out_w as f32;
        let sy = rh / out_h as f32;
        let mut out = Self::new(out_w, out_h);
        for c in 0..3 {
            for oy in 0..out_h {
                let fy = ry + (oy as f32 + 0.5) * sy - 0.5;
                for ox in 0..out_w {
                    let fx = rx + (ox as f32 + 0.5) * sx - 0.5;
                    let v = self.sample(c, fx, fy);
                    out.data[(c * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Self {
        if (out_w, out_h) == (self.width, self.height) {
            return self.clone();
        }
        self.crop_resize((0.0, 0.0, self.width as f32, self.height as f32), out_w, out_h)
    }
}

/// `a + (b - a) * t`, exact when `a == b` or `t == 0`.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> PlanarImage {
        let mut img = PlanarImage::new(w, h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.plane_mut(c)[y * w + x] = (x * 10 + y * 3 + c) as f32;
                }
            }
        }
        img
    }

    #[test]
    fn rgb_round_trip() {
        let mut rgb = RgbImage::new(3, 2);
        for (i, p) in rgb.pixels_mut().enumerate() {
            *p = image::Rgb([i as u8, 100 + i as u8, 250]);
        }
        assert_eq!(PlanarImage::from_rgb(&rgb).to_rgb(), rgb);
    }

    #[test]
    fn same_size_crop_resize_is_identity() {
        let img = gradient(7, 5);
        assert_eq!(img.crop_resize((0.0, 0.0, 7.0, 5.0), 7, 5), img);
    }

    #[test]
    fn constant_images_stay_constant() {
        let mut img = PlanarImage::new(9, 4);
        img.data_mut().fill(128.0);
        let r = img.resize(5, 13);
        assert!(r.data().iter().all(|&v| v == 128.0));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let img = gradient(4, 4);
        let r = img.resize(2, 2);
        // sample points fall halfway between source pixels
        assert_eq!(r.plane(0)[0], (0.0 + 10.0 + 3.0 + 13.0) / 4.0);
    }
}
