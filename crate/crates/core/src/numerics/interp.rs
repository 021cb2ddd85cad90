//! Interpolation on uniform tensor grids.

/// Uniform 1-D axis `x_i = start + i * step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformAxis {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl UniformAxis {
    pub fn new(start: f64, end: f64, len: usize) -> Self {
        assert!(len >= 2);
        Self { start, step: (end - start) / (len - 1) as f64, len }
    }

    pub fn at(&self, i: usize) -> f64 {
        self.start + self.step * i as f64
    }

    pub fn end(&self) -> f64 {
        self.at(self.len - 1)
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.at(i)).collect()
    }

    /// Cell index and fractional offset, clamped to the grid.
    fn locate(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.start) / self.step).clamp(0.0, (self.len - 1) as f64);
        let i = (s.floor() as usize).min(self.len - 2);
        (i, s - i as f64)
    }
}

// Catmull-Rom weights for offset t in [0,1] against nodes i-1..i+2.
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

/// Bicubic (Catmull-Rom) interpolation of row-major `values[ix * ny + iy]`.
/// Near the edges the stencil is clamped, which degrades to lower order.
pub fn bicubic(xa: &UniformAxis, ya: &UniformAxis, values: &[f64], x: f64, y: f64) -> f64 {
    let (ix, tx) = xa.locate(x);
    let (iy, ty) = ya.locate(y);
    let wx = cubic_weights(tx);
    let wy = cubic_weights(ty);
    let ny = ya.len;
    let mut acc = 0.0;
    for (a, wxa) in wx.iter().enumerate() {
        let i = (ix as isize + a as isize - 1).clamp(0, xa.len as isize - 1) as usize;
        let row = &values[i * ny..(i + 1) * ny];
        let mut r = 0.0;
        for (b, wyb) in wy.iter().enumerate() {
            let j = (iy as isize + b as isize - 1).clamp(0, ny as isize - 1) as usize;
            r += wyb * row[j];
        }
        acc += wxa * r;
    }
    acc
}

/// Linear interpolation on a uniform axis.
pub fn linear(axis: &UniformAxis, values: &[f64], x: f64) -> f64 {
    let (i, t) = axis.locate(x);
    values[i] * (1.0 - t) + values[i + 1] * t
}
