//! Mask controls: affine warping with analytic derivatives, pseudo-control
//! fitting, binarization and multi-agent composition.
//!
//! Coordinates are pixels with the origin at the image centre
//! `((W - 1) / 2, (H - 1) / 2)`; `x` grows rightwards and `y` downwards.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::mask::Mask;

const MIN_DET: f64 = 1e-6;

/// Affine control: translation in pixels, rotation in radians, axis scales and shear.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub dx: f64,
    pub dy: f64,
    pub rot: f64,
    pub sx: f64,
    pub sy: f64,
    pub shear: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams::IDENTITY
    }
}

type Mat2 = [[f64; 2]; 2];

fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

fn apply(a: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { dx: 0.0, dy: 0.0, rot: 0.0, sx: 1.0, sy: 1.0, shear: 0.0 };

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineParams { dx, dy, ..AffineParams::IDENTITY }
    }

    pub fn to_vec(&self) -> [f64; 6] {
        [self.dx, self.dy, self.rot, self.sx, self.sy, self.shear]
    }

    pub fn from_vec(v: [f64; 6]) -> Self {
        AffineParams { dx: v[0], dy: v[1], rot: v[2], sx: v[3], sy: v[4], shear: v[5] }
    }

    /// Linear part `R(rot) * Shear(shear) * Scale(sx, sy)` and its four partials
    /// (rot, sx, sy, shear).
    fn linear_with_partials(&self) -> (Mat2, [Mat2; 4]) {
        let (s, c) = self.rot.sin_cos();
        let r = [[c, -s], [s, c]];
        let dr = [[-s, -c], [c, -s]];
        let sh = [[1.0, self.shear], [0.0, 1.0]];
        let dsh = [[0.0, 1.0], [0.0, 0.0]];
        let sc = [[self.sx, 0.0], [0.0, self.sy]];
        let rsh = mul(&r, &sh);
        let l = mul(&rsh, &sc);
        let d_rot = mul(&mul(&dr, &sh), &sc);
        let d_sx = mul(&rsh, &[[1.0, 0.0], [0.0, 0.0]]);
        let d_sy = mul(&rsh, &[[0.0, 0.0], [0.0, 1.0]]);
        let d_shear = mul(&mul(&r, &dsh), &sc);
        (l, [d_rot, d_sx, d_sy, d_shear])
    }

    pub fn linear(&self) -> Mat2 {
        self.linear_with_partials().0
    }

    pub fn det(&self) -> f64 {
        let l = self.linear();
        l[0][0] * l[1][1] - l[0][1] * l[1][0]
    }

    pub fn check(&self) -> Result<()> {
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateControl("non-finite control parameter".into()));
        }
        let det = self.det();
        if det.abs() <= MIN_DET {
            return Err(Error::DegenerateControl(format!("affine determinant {det:.3e} is not invertible")));
        }
        Ok(())
    }

    pub fn is_positional(&self) -> bool {
        self.rot == 0.0 && self.sx == 1.0 && self.sy == 1.0 && self.shear == 0.0
    }
}

fn inverse(l: &Mat2) -> Mat2 {
    let det = l[0][0] * l[1][1] - l[0][1] * l[1][0];
    [[l[1][1] / det, -l[0][1] / det], [-l[1][0] / det, l[0][0] / det]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Positional,
    Affine,
    Nonparam,
}

impl std::str::FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "positional" => Ok(ControlMode::Positional),
            "affine" => Ok(ControlMode::Affine),
            "nonparam" => Ok(ControlMode::Nonparam),
            other => Err(Error::InvalidInput(format!("unknown control mode `{other}`"))),
        }
    }
}

/// A user control for one generated frame.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlParams {
    Positional { dx: f64, dy: f64 },
    Affine(AffineParams),
    /// Replacement hard mask.
    Nonparam(Mask),
}

impl ControlParams {
    pub fn identity() -> Self {
        ControlParams::Positional { dx: 0.0, dy: 0.0 }
    }

    pub fn mode(&self) -> ControlMode {
        match self {
            ControlParams::Positional { .. } => ControlMode::Positional,
            ControlParams::Affine(_) => ControlMode::Affine,
            ControlParams::Nonparam(_) => ControlMode::Nonparam,
        }
    }

    pub fn affine(&self) -> Option<AffineParams> {
        match *self {
            ControlParams::Positional { dx, dy } => Some(AffineParams::translation(dx, dy)),
            ControlParams::Affine(a) => Some(a),
            ControlParams::Nonparam(_) => None,
        }
    }

    /// Applies the control to the current soft mask, returning the hard
    /// conditioning mask.
    pub fn apply(&self, current: &Mask) -> Result<Mask> {
        match self {
            ControlParams::Nonparam(m) => {
                if !m.same_shape(current) {
                    return Err(Error::Shape(format!(
                        "control mask {}x{} does not match frame {}x{}",
                        m.height(),
                        m.width(),
                        current.height(),
                        current.width()
                    )));
                }
                Ok(binarize(m))
            }
            other => {
                let a = other.affine().expect("parametric control");
                Ok(binarize(&warp_mask(current, &a)?))
            }
        }
    }

    pub fn to_json(&self) -> ControlJson {
        match self {
            ControlParams::Nonparam(m) => ControlJson {
                mode: ControlMode::Nonparam,
                mask: Some(B64.encode(m.encode_png())),
                ..ControlJson::identity(ControlMode::Nonparam)
            },
            other => {
                let a = other.affine().expect("parametric control");
                ControlJson {
                    mode: other.mode(),
                    dx: a.dx,
                    dy: a.dy,
                    rot: a.rot,
                    sx: a.sx,
                    sy: a.sy,
                    shear: a.shear,
                    mask: None,
                }
            }
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Wire form of a control: `{mode, dx, dy, rot, sx, sy, shear}` in pixels and
/// radians, plus a base64 PNG `mask` for non-parametric controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlJson {
    pub mode: ControlMode,
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub dy: f64,
    #[serde(default)]
    pub rot: f64,
    #[serde(default = "one")]
    pub sx: f64,
    #[serde(default = "one")]
    pub sy: f64,
    #[serde(default)]
    pub shear: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

impl ControlJson {
    pub fn identity(mode: ControlMode) -> Self {
        ControlJson { mode, dx: 0.0, dy: 0.0, rot: 0.0, sx: 1.0, sy: 1.0, shear: 0.0, mask: None }
    }

    /// Validates and converts; malformed payloads give `InvalidInput`,
    /// non-invertible transforms `DegenerateControl`.
    pub fn to_control(&self) -> Result<ControlParams> {
        match self.mode {
            ControlMode::Positional => {
                let a = AffineParams::translation(self.dx, self.dy);
                if self.rot != 0.0 || self.sx != 1.0 || self.sy != 1.0 || self.shear != 0.0 {
                    return Err(Error::InvalidInput("positional control carries non-translation parameters".into()));
                }
                if !a.dx.is_finite() || !a.dy.is_finite() {
                    return Err(Error::InvalidInput("non-finite translation".into()));
                }
                Ok(ControlParams::Positional { dx: self.dx, dy: self.dy })
            }
            ControlMode::Affine => {
                let a = AffineParams { dx: self.dx, dy: self.dy, rot: self.rot, sx: self.sx, sy: self.sy, shear: self.shear };
                a.check()?;
                Ok(ControlParams::Affine(a))
            }
            ControlMode::Nonparam => {
                let encoded = self
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("nonparam control needs a `mask`".into()))?;
                let bytes = B64
                    .decode(encoded)
                    .map_err(|e| Error::InvalidInput(format!("mask is not base64: {e}")))?;
                let m = Mask::decode_png(&bytes).map_err(|e| Error::InvalidInput(format!("mask: {e}")))?;
                Ok(ControlParams::Nonparam(m))
            }
        }
    }
}

/// Differentiable bilinear inverse warp of a single-channel image.
#[derive(Clone, Debug)]
pub struct Warp {
    height: usize,
    width: usize,
    params: AffineParams,
    linv: Mat2,
    /// `d linv / d theta_k` for rot, sx, sy, shear.
    dlinv: [Mat2; 4],
}

/// Warped values plus reverse-mode derivatives.
#[derive(Clone, Debug)]
pub struct WarpGrad {
    pub values: Vec<f64>,
    /// Gradient with respect to `(dx, dy, rot, sx, sy, shear)`.
    pub theta: [f64; 6],
    /// Gradient with respect to the input image.
    pub input: Vec<f64>,
}

impl Warp {
    pub fn new(height: usize, width: usize, params: AffineParams) -> Result<Self> {
        params.check()?;
        let (l, dl) = params.linear_with_partials();
        let linv = inverse(&l);
        let dlinv = dl.map(|d| {
            let t = mul(&mul(&linv, &d), &linv);
            [[-t[0][0], -t[0][1]], [-t[1][0], -t[1][1]]]
        });
        Ok(Warp { height, width, params, linv, dlinv })
    }

    fn centre(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Source location sampled for output pixel `(x, y)`, and `u = q - c - t`.
    #[inline]
    fn source(&self, x: usize, y: usize) -> ([f64; 2], [f64; 2]) {
        let (cx, cy) = self.centre();
        let u = [x as f64 - cx - self.params.dx, y as f64 - cy - self.params.dy];
        let p = apply(&self.linv, u);
        ([p[0] + cx, p[1] + cy], u)
    }

    #[inline]
    fn read(&self, img: &[f64], x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            img[y as usize * self.width + x as usize]
        }
    }

    pub fn forward(&self, img: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let ([sx, sy], _) = self.source(x, y);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v00 = self.read(img, x0, y0);
                let v10 = self.read(img, x0 + 1, y0);
                let v01 = self.read(img, x0, y0 + 1);
                let v11 = self.read(img, x0 + 1, y0 + 1);
                out.push((1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11));
            }
        }
        out
    }

    /// Forward pass and the vector-Jacobian product with `upstream`.
    pub fn backward(&self, img: &[f64], upstream: &[f64]) -> WarpGrad {
        let (h, w) = (self.height, self.width);
        let mut values = Vec::with_capacity(h * w);
        let mut theta = [0.0; 6];
        let mut input = vec![0.0; h * w];
        let mut scatter = |x: i64, y: i64, g: f64| {
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                input[y as usize * w + x as usize] += g;
            }
        };
        for y in 0..h {
            for x in 0..w {
                let ([sx, sy], u) = self.source(x, y);
                let (x0f, y0f) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0f, sy - y0f);
                let (x0, y0) = (x0f as i64, y0f as i64);
                let v00 = self.read(img, x0, y0);
                let v10 = self.read(img, x0 + 1, y0);
                let v01 = self.read(img, x0, y0 + 1);
                let v11 = self.read(img, x0 + 1, y0 + 1);
                values.push((1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11));
                let g = upstream[y * w + x];
                if g == 0.0 {
                    continue;
                }
                scatter(x0, y0, g * (1.0 - fx) * (1.0 - fy));
                scatter(x0 + 1, y0, g * fx * (1.0 - fy));
                scatter(x0, y0 + 1, g * (1.0 - fx) * fy);
                scatter(x0 + 1, y0 + 1, g * fx * fy);
                let dvdx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
                let dvdy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
                // ds/dt = -L^-1
                theta[0] += g * (dvdx * -self.linv[0][0] + dvdy * -self.linv[1][0]);
                theta[1] += g * (dvdx * -self.linv[0][1] + dvdy * -self.linv[1][1]);
                for (k, d) in self.dlinv.iter().enumerate() {
                    let ds = apply(d, u);
                    theta[2 + k] += g * (dvdx * ds[0] + dvdy * ds[1]);
                }
            }
        }
        WarpGrad { values, theta, input }
    }
}

/// Inverse-warps `m` by `params` with bilinear sampling; samples outside the
/// image read as background.
pub fn warp_mask(m: &Mask, params: &AffineParams) -> Result<Mask> {
    let warp = Warp::new(m.height(), m.width(), *params)?;
    let src: Vec<f64> = m.values().iter().map(|&v| v as f64).collect();
    let values = warp.forward(&src).into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Mask::soft(m.height(), m.width(), values)
}

/// Hard threshold at 0.5, with 0.5 itself assigned to the foreground.
pub fn binarize(m: &Mask) -> Mask {
    let values = m.values().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Mask::hard(m.height(), m.width(), values).expect("binary values")
}

/// Tensor thresholding; the comparison carries no gradient.
pub fn binarize_tensor(m: &Tensor) -> Tensor {
    m.ge(0.5).to_kind(m.kind())
}

/// Union of equally sized hard masks.
pub fn compose_masks(masks: &[Mask]) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot compose an empty list of masks".into()))?;
    if masks.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Shape("composed masks must share dimensions".into()));
    }
    let mut values = first.values().to_vec();
    for m in &masks[1..] {
        for (v, &o) in values.iter_mut().zip(m.values()) {
            *v = v.max(o);
        }
    }
    if masks.iter().all(Mask::is_hard) {
        Mask::hard(first.height(), first.width(), values)
    } else {
        Mask::soft(first.height(), first.width(), values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Fit on 2x downsampled masks for the first half of the budget.
    pub coarse_to_fine: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { iterations: 1000, lr: 0.1, coarse_to_fine: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: AffineParams,
    /// Final mean squared difference between the warped and target masks.
    pub residual: f64,
}

struct Adam {
    m: [f64; 6],
    v: [f64; 6],
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Adam { m: [0.0; 6], v: [0.0; 6], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64; 6], grad: &[f64; 6], active: &[bool; 6], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..6 {
            if !active[k] {
                continue;
            }
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            theta[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

fn mse_and_grad(warp: &Warp, src: &[f64], target: &[f64]) -> (f64, [f64; 6]) {
    let n = target.len() as f64;
    let values = warp.forward(src);
    let upstream: Vec<f64> = values.iter().zip(target).map(|(v, t)| 2.0 * (v - t) / n).collect();
    let loss = values.iter().zip(target).map(|(v, t)| (v - t).powi(2)).sum::<f64>() / n;
    let g = warp.backward(src, &upstream);
    (loss, g.theta)
}

fn fit_level(
    src: &[f64],
    target: &[f64],
    height: usize,
    width: usize,
    mode: ControlMode,
    init: AffineParams,
    iterations: usize,
    lr: f64,
) -> Result<FitResult> {
    let active = match mode {
        ControlMode::Positional => [true, true, false, false, false, false],
        ControlMode::Affine => [true; 6],
        ControlMode::Nonparam => {
            return Err(Error::InvalidInput("nonparam controls are not fitted".into()));
        }
    };
    // Scales are optimized in log space so they stay positive and reflections
    // of symmetric shapes are never reached.
    let to_theta = |phi: &[f64; 6]| {
        AffineParams::from_vec([phi[0], phi[1], phi[2], phi[3].exp(), phi[4].exp(), phi[5]])
    };
    if init.sx <= 0.0 || init.sy <= 0.0 {
        return Err(Error::InvalidInput("fit initialization needs positive scales".into()));
    }
    let mut phi = init.to_vec();
    phi[3] = phi[3].ln();
    phi[4] = phi[4].ln();
    let mut adam = Adam::new();
    for _ in 0..iterations {
        let theta = to_theta(&phi);
        let warp = match Warp::new(height, width, theta) {
            Ok(w) => w,
            Err(_) => break,
        };
        let (_, mut grad) = mse_and_grad(&warp, src, target);
        grad[3] *= theta.sx;
        grad[4] *= theta.sy;
        let prev = phi;
        adam.step(&mut phi, &grad, &active, lr);
        if to_theta(&phi).check().is_err() {
            phi = prev;
            break;
        }
    }
    let theta = to_theta(&phi).to_vec();
    let params = AffineParams::from_vec(theta);
    let warp = Warp::new(height, width, params)?;
    let (residual, _) = mse_and_grad(&warp, src, target);
    Ok(FitResult { params, residual })
}

fn downsample2(v: &[f64], height: usize, width: usize) -> Vec<f64> {
    let (h2, w2) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(h2 * w2);
    for y in 0..h2 {
        for x in 0..w2 {
            let i = 2 * y * width + 2 * x;
            out.push(0.25 * (v[i] + v[i + 1] + v[i + width] + v[i + width + 1]));
        }
    }
    out
}

/// Recovers the control warping `m_t` onto `m_next` by Adam on the mean
/// squared mask difference, starting from the identity.
pub fn fit_control(m_t: &Mask, m_next: &Mask, mode: ControlMode, cfg: &FitConfig) -> Result<FitResult> {
    if !m_t.same_shape(m_next) {
        return Err(Error::Shape("masks to fit must share dimensions".into()));
    }
    if m_t.sum() <= 0.0 {
        return Err(Error::EmptyMask("cannot fit a control from an empty source mask".into()));
    }
    let (h, w) = (m_t.height(), m_t.width());
    let src: Vec<f64> = m_t.values().iter().map(|&v| v as f64).collect();
    let target: Vec<f64> = m_next.values().iter().map(|&v| v as f64).collect();
    let mut init = AffineParams::IDENTITY;
    let mut fine_iters = cfg.iterations;
    if cfg.coarse_to_fine && h % 2 == 0 && w % 2 == 0 && h >= 8 && w >= 8 {
        let coarse_iters = cfg.iterations / 2;
        fine_iters -= coarse_iters;
        let cs = downsample2(&src, h, w);
        let ct = downsample2(&target, h, w);
        let coarse = fit_level(&cs, &ct, h / 2, w / 2, mode, init, coarse_iters, cfg.lr)?;
        // Pixel x_fine = 2 x_coarse + 0.5 keeps the centre fixed, so only the
        // translation rescales.
        init = AffineParams { dx: 2.0 * coarse.params.dx, dy: 2.0 * coarse.params.dy, ..coarse.params };
    }
    fit_level(&src, &target, h, w, mode, init, fine_iters, cfg.lr)
}
