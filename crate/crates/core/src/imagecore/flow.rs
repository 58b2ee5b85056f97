use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::raster::RasterImage;

/// Dense per-pixel displacement with a validity mask.
///
/// `F(p) = (u(p), v(p))` moves source pixel `p` to its rectified position
/// `p + F(p)`. Masked-out pixels always carry a zero displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    width: usize,
    height: usize,
    u: Vec<T>,
    v: Vec<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        let n = width * height;
        Self::from_parts(width, height, vec![T::zero(); n], vec![T::zero(); n], vec![true; n])
    }

    /// Builds a flow from its planes; masked-out entries are forced to zero.
    pub fn from_parts(
        width: usize,
        height: usize,
        mut u: Vec<T>,
        mut v: Vec<T>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("flow must be at least 1x1, got {width}x{height}")));
        }
        let n = width * height;
        if u.len() != n || v.len() != n || mask.len() != n {
            return Err(Error::Size(format!(
                "flow planes ({}, {}, {}) do not match {width}x{height}",
                u.len(),
                v.len(),
                mask.len()
            )));
        }
        for i in 0..n {
            if !mask[i] {
                u[i] = T::zero();
                v[i] = T::zero();
            }
        }
        Ok(Self { width, height, u, v, mask })
    }

    /// Fully valid flow evaluated from a closure of pixel coordinates.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Result<Self> {
        let n = width * height;
        let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self::from_parts(width, height, u, v, vec![true; n])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn u(&self) -> &[T] {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &[T] {
        &self.v
    }

    #[inline]
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (T, T) {
        let i = self.index(x, y);
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, value: Option<(T, T)>) {
        let i = self.index(x, y);
        match value {
            Some((a, b)) => {
                self.u[i] = a;
                self.v[i] = b;
                self.mask[i] = true;
            }
            None => {
                self.u[i] = T::zero();
                self.v[i] = T::zero();
                self.mask[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Bilinear sample of the displacement, coordinates clamped to the grid.
    /// Masked-out samples contribute their zero displacement.
    pub fn sample_bilinear(&self, x: T, y: T) -> (T, T) {
        let max_x = T::of((self.width - 1) as f64);
        let max_y = T::of((self.height - 1) as f64);
        let xc = x.max(T::zero()).min(max_x);
        let yc = y.max(T::zero()).min(max_y);
        let x0 = xc.floor().to_usize().unwrap_or(0);
        let y0 = yc.floor().to_usize().unwrap_or(0);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - T::of(x0 as f64);
        let fy = yc - T::of(y0 as f64);
        let lerp = |plane: &[T]| {
            let top = plane[y0 * self.width + x0] * (T::one() - fx) + plane[y0 * self.width + x1] * fx;
            let bottom = plane[y1 * self.width + x0] * (T::one() - fx) + plane[y1 * self.width + x1] * fx;
            top * (T::one() - fy) + bottom * fy
        };
        (lerp(&self.u), lerp(&self.v))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height || width == 0 || height == 0 {
            return Err(Error::Size(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let n = width * height;
        let (mut u, mut v, mut mask) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for y in y0..y0 + height {
            let s = y * self.width + x0;
            u.extend_from_slice(&self.u[s..s + width]);
            v.extend_from_slice(&self.v[s..s + width]);
            mask.extend_from_slice(&self.mask[s..s + width]);
        }
        Self::from_parts(width, height, u, v, mask)
    }

    /// Adds a constant displacement to every masked-in pixel.
    pub fn offset(&self, du: T, dv: T) -> Self {
        let mut out = self.clone();
        for i in 0..out.len() {
            if out.mask[i] {
                out.u[i] += du;
                out.v[i] += dv;
            }
        }
        out
    }

    /// Converts the scalar type of the displacement planes.
    pub fn cast<S: Scalar>(&self) -> FlowField<S> {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|&a| S::of(a.f64())).collect(),
            v: self.v.iter().map(|&a| S::of(a.f64())).collect(),
            mask: self.mask.clone(),
        }
    }

    /// Resamples onto a `width x height` grid; displacements are rescaled so
    /// they stay in pixels of the new grid. The mask is sampled nearest.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let n = width * height;
        let (mut u, mut v, mut mask) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for y in 0..height {
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                let (a, b) = self.sample_bilinear(T::of(src_x), T::of(src_y));
                let nx = (src_x.round().max(0.0) as usize).min(self.width - 1);
                let ny = (src_y.round().max(0.0) as usize).min(self.height - 1);
                u.push(a / T::of(sx));
                v.push(b / T::of(sy));
                mask.push(self.mask[ny * self.width + nx]);
            }
        }
        Self::from_parts(width, height, u, v, mask)
    }
}

/// Per-pixel forward differences of a flow: `(Ux, Uy, Vx, Vy)`.
///
/// `valid_x[p]` is set when the horizontal difference at `p` joins two
/// masked-in pixels inside the grid; invalid entries hold zero. The same
/// holds for `valid_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField<T> {
    pub width: usize,
    pub height: usize,
    pub gx_u: Vec<T>,
    pub gy_u: Vec<T>,
    pub gx_v: Vec<T>,
    pub gy_v: Vec<T>,
    pub valid_x: Vec<bool>,
    pub valid_y: Vec<bool>,
}

impl<T: Scalar> GradientField<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            gx_u: vec![T::zero(); n],
            gy_u: vec![T::zero(); n],
            gx_v: vec![T::zero(); n],
            gy_v: vec![T::zero(); n],
            valid_x: vec![false; n],
            valid_y: vec![false; n],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// The 4-vector `(Ux, Uy, Vx, Vy)` at a pixel.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [T; 4] {
        let i = self.index(x, y);
        [self.gx_u[i], self.gy_u[i], self.gx_v[i], self.gy_v[i]]
    }

    pub fn is_finite(&self) -> bool {
        [&self.gx_u, &self.gy_u, &self.gx_v, &self.gy_v]
            .iter()
            .all(|plane| plane.iter().all(|v| v.is_finite()))
    }
}

/// Forward-difference gradient of a flow.
///
/// `gx(x, y) = F(x+1, y) - F(x, y)` and `gy(x, y) = F(x, y+1) - F(x, y)`; the
/// last column (row) of the x (y) planes is zero, as are differences that
/// touch a masked-out pixel.
pub fn gradient<T: Scalar>(flow: &FlowField<T>) -> Result<GradientField<T>> {
    let (w, h) = (flow.width(), flow.height());
    if w < 2 || h < 2 {
        return Err(Error::Size(format!("gradient needs at least 2x2, got {w}x{h}")));
    }
    let mut g = GradientField::zeros(w, h);
    let (u, v, m) = (flow.u(), flow.v(), flow.mask());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !m[i] {
                continue;
            }
            if x + 1 < w && m[i + 1] {
                g.gx_u[i] = u[i + 1] - u[i];
                g.gx_v[i] = v[i + 1] - v[i];
                g.valid_x[i] = true;
            }
            if y + 1 < h && m[i + w] {
                g.gy_u[i] = u[i + w] - u[i];
                g.gy_v[i] = v[i + w] - v[i];
                g.valid_y[i] = true;
            }
        }
    }
    Ok(g)
}

/// Encodes a flow as texture coordinates: `R = (x+u)/W`, `G = (y+v)/H`,
/// `B = mask`. Values are clamped to `[0, 1]`.
pub fn flow_to_rgb<T: Scalar>(flow: &FlowField<T>, ref_width: usize, ref_height: usize) -> RasterImage {
    let (w, h) = (flow.width(), flow.height());
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            let r = (x as f64 + u.f64()) / ref_width as f64;
            let g = (y as f64 + v.f64()) / ref_height as f64;
            let b = if flow.is_valid(x, y) { 1.0 } else { 0.0 };
            data.extend_from_slice(&[r.clamp(0.0, 1.0) as f32, g.clamp(0.0, 1.0) as f32, b]);
        }
    }
    RasterImage::from_data(w, h, 3, data).expect("flow dimensions are non-zero")
}

/// Inverse of [`flow_to_rgb`]; a pixel is valid when its B sample exceeds 0.5.
pub fn rgb_to_flow<T: Scalar>(img: &RasterImage, ref_width: usize, ref_height: usize) -> Result<FlowField<T>> {
    if img.channels() < 3 {
        return Err(Error::Format(format!(
            "flow image needs at least 3 channels, got {}",
            img.channels()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let (mut u, mut v, mut mask) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for y in 0..h {
        for x in 0..w {
            let px = img.pixel(x, y);
            u.push(T::of(px[0] as f64 * ref_width as f64 - x as f64));
            v.push(T::of(px[1] as f64 * ref_height as f64 - y as f64));
            mask.push(px[2] > 0.5);
        }
    }
    FlowField::from_parts(w, h, u, v, mask)
}
