use crate::error::{Error, Result};

/// Row-major `height × width × channels` raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Contract("raster extents must be positive".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Contract(format!(
                "{width}×{height}×{channels} raster needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, 1, vec![value; width * height]).expect("positive extents")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Sample with coordinates clamped to the border.
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Bilinear resample of the sub-window `[x0, x0+w) × [y0, y0+h)` to
    /// `out_w × out_h`, sampling at pixel centres.
    pub fn resample_window(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> Raster {
        let mut out = vec![0.0; out_w * out_h * self.channels];
        for oy in 0..out_h {
            let sy = y0 + (oy as f64 + 0.5) * h / out_h as f64 - 0.5;
            let (y_lo, fy) = (sy.floor(), sy - sy.floor());
            for ox in 0..out_w {
                let sx = x0 + (ox as f64 + 0.5) * w / out_w as f64 - 0.5;
                let (x_lo, fx) = (sx.floor(), sx - sx.floor());
                for c in 0..self.channels {
                    let p = |dx: isize, dy: isize| {
                        self.get_clamped(x_lo as isize + dx, y_lo as isize + dy, c)
                    };
                    let top = p(0, 0) * (1.0 - fx) + p(1, 0) * fx;
                    let bot = p(0, 1) * (1.0 - fx) + p(1, 1) * fx;
                    out[(oy * out_w + ox) * self.channels + c] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Raster::new(out_w, out_h, self.channels, out).expect("positive output extents")
    }

    pub fn flip_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(self.width - 1 - x, y, c));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_window_resample_is_identity() {
        let data: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let r = Raster::new(6, 6, 1, data).unwrap();
        let s = r.resample_window(0.0, 0.0, 6.0, 6.0, 6, 6);
        assert!(r.data().iter().zip(s.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn double_flip_is_identity() {
        let r = Raster::new(3, 2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(r.flip_horizontal().get(0, 0, 0), 0.3);
        assert_eq!(r.flip_horizontal().flip_horizontal(), r);
    }
}
