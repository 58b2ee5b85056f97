//! Flow reconstruction from a stitched gradient field.
//!
//! Minimizes, separately for `U` and `V`,
//! `sum_edges w_e (F(q) - F(p) - g_e)^2 + sum_p lambda_p (F(p) - F_ref(p))^2`
//! with forward-difference edges matching [`crate::imagecore::gradient`].
//! Edges whose target gradient is unobserved get a small weight and a zero
//! target, which keeps the system connected without biasing it.
//! Iterations run in `f64` whatever the sample type.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{FlowField, GradientField};
use crate::patching::PatchSpec;
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative residual `|b - Ax| / |b|` to reach.
    pub tolerance: f64,
    /// Iteration cap; `None` means `10 * sqrt(pixel count)`.
    pub max_iterations: Option<usize>,
    /// 1, 2 or 4.
    pub downsample_factor: usize,
    /// Weight of edges whose target gradient is not observed.
    pub unobserved_weight: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_iterations: None, downsample_factor: 4, unobserved_weight: 1e-3 }
    }
}

impl SolverOptions {
    pub fn full_resolution() -> Self {
        Self { downsample_factor: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        if !matches!(self.downsample_factor, 1 | 2 | 4) {
            return Err(Error::Config(format!(
                "downsample factor must be 1, 2 or 4, got {}",
                self.downsample_factor
            )));
        }
        if !(self.unobserved_weight > 0.0 && self.unobserved_weight <= 1.0) {
            return Err(Error::Config("unobserved_weight must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn iteration_cap(&self, n: usize) -> usize {
        self.max_iterations.unwrap_or_else(|| ((10.0 * (n as f64).sqrt()).ceil() as usize).max(50))
    }
}

#[derive(Clone, Debug)]
pub struct ScreenedPoissonProblem<T> {
    pub target: GradientField<T>,
    /// Values pinned by the screening term; only read where `reference_mask` is set.
    pub reference: FlowField<T>,
    pub reference_mask: Vec<bool>,
    pub lambda: f64,
}

impl<T: Scalar> ScreenedPoissonProblem<T> {
    /// Screens toward a patch-local flow placed at its grid position.
    pub fn with_reference_patch(
        target: GradientField<T>,
        spec: &PatchSpec,
        patch_flow: &FlowField<T>,
        lambda: f64,
    ) -> Result<Self> {
        let (w, h) = (target.width, target.height);
        if spec.origin_x + patch_flow.width() > w || spec.origin_y + patch_flow.height() > h {
            return Err(Error::DimMismatch("reference patch lies outside the target".into()));
        }
        let mut reference = FlowField::zeros(w, h)?;
        let mut mask = vec![false; w * h];
        for y in 0..patch_flow.height() {
            for x in 0..patch_flow.width() {
                if patch_flow.is_valid(x, y) {
                    let (gx, gy) = (spec.origin_x + x, spec.origin_y + y);
                    reference.set(gx, gy, Some(patch_flow.get(x, y)));
                    mask[gy * w + gx] = true;
                }
            }
        }
        let problem = Self { target, reference, reference_mask: mask, lambda };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.target.width, self.target.height);
        let n = w * h;
        if self.reference.width() != w || self.reference.height() != h || self.reference_mask.len() != n {
            return Err(Error::DimMismatch(format!(
                "reference {}x{} vs target {w}x{h}",
                self.reference.width(),
                self.reference.height()
            )));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !self.reference_mask.iter().any(|&m| m) {
            return Err(Error::Config("reference mask is empty".into()));
        }
        if !self.target.is_finite() {
            return Err(Error::Config("target gradient is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PoissonSolution<T> {
    pub flow: FlowField<T>,
    /// CG iterations for the `U` and `V` systems.
    pub iterations: [usize; 2],
    /// Final relative residuals, recomputed from scratch.
    pub residuals: [f64; 2],
}

/// Normal-equation operator of one scalar component.
struct Operator {
    w: usize,
    h: usize,
    wx: Vec<f64>,
    wy: Vec<f64>,
    screen: Vec<f64>,
    diag: Vec<f64>,
    observed_x: Vec<bool>,
    observed_y: Vec<bool>,
}

impl Operator {
    fn new<T: Scalar>(problem: &ScreenedPoissonProblem<T>, unobserved: f64) -> Self {
        let (w, h) = (problem.target.width, problem.target.height);
        let n = w * h;
        let g = &problem.target;
        let mut wx = vec![0.0; n];
        let mut wy = vec![0.0; n];
        let screen: Vec<f64> =
            problem.reference_mask.iter().map(|&m| if m { problem.lambda } else { 0.0 }).collect();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    wx[i] = if g.valid_x[i] { 1.0 } else { unobserved };
                }
                if y + 1 < h {
                    wy[i] = if g.valid_y[i] { 1.0 } else { unobserved };
                }
            }
        }
        let mut diag = screen.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                diag[i] += wx[i] + wy[i];
                if x > 0 {
                    diag[i] += wx[i - 1];
                }
                if y > 0 {
                    diag[i] += wy[i - w];
                }
            }
        }
        Self { w, h, wx, wy, screen, diag, observed_x: g.valid_x.clone(), observed_y: g.valid_y.clone() }
    }

    fn rhs<T: Scalar>(&self, gx: &[T], gy: &[T], reference: &[T]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut b: Vec<f64> = self.screen.iter().zip(reference).map(|(&l, r)| l * r.f64()).collect();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let ex = if self.observed_x[i] { self.wx[i] * gx[i].f64() } else { 0.0 };
                let ey = if self.observed_y[i] { self.wy[i] * gy[i].f64() } else { 0.0 };
                b[i] -= ex + ey;
                if x + 1 < w {
                    b[i + 1] += ex;
                }
                if y + 1 < h {
                    b[i + w] += ey;
                }
            }
        }
        b
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.apply_dot(x, out);
    }

    /// `out = A x`, returning `x . out`.
    fn apply_dot(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let w = self.w;
        let h = self.h;
        out.par_chunks_mut(w)
            .enumerate()
            .map(|(y, row)| {
                let base = y * w;
                let xr = &x[base..base + w];
                let wx = &self.wx[base..base + w];
                let dg = &self.diag[base..base + w];
                for (cx, o) in row.iter_mut().enumerate() {
                    *o = dg[cx] * xr[cx];
                }
                for cx in 0..w - 1 {
                    // diagonal already holds the edge weight; only the coupling remains
                    row[cx] -= wx[cx] * xr[cx + 1];
                    row[cx + 1] -= wx[cx] * xr[cx];
                }
                if y + 1 < h {
                    let below = &x[base + w..base + 2 * w];
                    let wy = &self.wy[base..base + w];
                    for cx in 0..w {
                        row[cx] -= wy[cx] * below[cx];
                    }
                }
                if y > 0 {
                    let above = &x[base - w..base];
                    let wy = &self.wy[base - w..base];
                    for cx in 0..w {
                        row[cx] -= wy[cx] * above[cx];
                    }
                }
                row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum()
    }

    fn residual_norm(&self, x: &[f64], b: &[f64], scratch: &mut [f64]) -> f64 {
        self.apply(x, scratch);
        b.iter().zip(scratch.iter()).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt()
    }
}

/// Chunk length of parallel reductions. Partial sums are combined in chunk
/// order, so results do not depend on the thread count or scheduling.
const CHUNK: usize = 1 << 14;

fn ordered_sum(parts: impl IndexedParallelIterator<Item = f64>) -> f64 {
    parts.collect::<Vec<f64>>().iter().sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    ordered_sum(a.par_chunks(CHUNK).zip(b.par_chunks(CHUNK)).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum()))
}

/// Jacobi-preconditioned conjugate gradient; returns iterations and the
/// recomputed relative residual.
fn conjugate_gradient(
    op: &Operator,
    b: &[f64],
    x: &mut [f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<(usize, f64)> {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok((0, 0.0));
    }
    let mut ap = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut iterations = 0;
    // restarts guard against drift between the recursive and true residual
    loop {
        op.apply(x, &mut ap);
        r.par_iter_mut().zip(&ap).zip(b).for_each(|((ri, ai), bi)| *ri = bi - ai);
        let true_rel = dot(&r, &r).sqrt() / b_norm;
        if true_rel <= tolerance {
            return Ok((iterations, true_rel));
        }
        if iterations >= max_iterations {
            return Err(Error::NoConvergence { residual: true_rel, iterations });
        }
        z.par_iter_mut().zip(&r).zip(&op.diag).for_each(|((zi, ri), d)| *zi = ri / d);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        let before = iterations;
        while iterations < max_iterations {
            let pap = op.apply_dot(&p, &mut ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            // x += alpha p, r -= alpha Ap, z = D^-1 r in one pass
            let (rr, rz_next) = x
                .par_chunks_mut(CHUNK)
                .zip(r.par_chunks_mut(CHUNK))
                .zip(z.par_chunks_mut(CHUNK))
                .zip(p.par_chunks(CHUNK).zip(ap.par_chunks(CHUNK)).zip(op.diag.par_chunks(CHUNK)))
                .map(|(((xc, rc), zc), ((pc, ac), dc))| {
                    let (mut rr, mut rz) = (0.0, 0.0);
                    for k in 0..xc.len() {
                        xc[k] += alpha * pc[k];
                        rc[k] -= alpha * ac[k];
                        zc[k] = rc[k] / dc[k];
                        rr += rc[k] * rc[k];
                        rz += rc[k] * zc[k];
                    }
                    (rr, rz)
                })
                .collect::<Vec<(f64, f64)>>()
                .iter()
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            iterations += 1;
            if rr.sqrt() / b_norm <= 0.5 * tolerance {
                break;
            }
            let beta = rz_next / rz;
            rz = rz_next;
            p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
        }
        if iterations == before {
            let rel = op.residual_norm(x, b, &mut ap) / b_norm;
            return Err(Error::NoConvergence { residual: rel, iterations });
        }
    }
}

/// Grids with both sides at least this long are warm-started from a
/// half-resolution solve.
pub const CASCADE_MIN_SIDE: usize = 64;

/// Solves at the problem's own resolution. Large grids start from the
/// upsampled solution of the half-resolution problem, which leaves mostly
/// high-frequency error for the iterations at this level.
pub fn solve<T: Scalar>(problem: &ScreenedPoissonProblem<T>, opts: &SolverOptions) -> Result<PoissonSolution<T>> {
    let (w, h) = (problem.target.width, problem.target.height);
    if w.min(h) >= CASCADE_MIN_SIDE {
        if let Ok(coarse) = downsample_problem(problem, 2) {
            let start = solve(&coarse, opts)?;
            let guess = upsample_flow(&start.flow, 2, w, h)?;
            return solve_with_guess(problem, opts, Some(&guess));
        }
    }
    solve_with_guess(problem, opts, None)
}

/// Solves at full resolution starting from `guess` (zeros when `None`).
pub fn solve_with_guess<T: Scalar>(
    problem: &ScreenedPoissonProblem<T>,
    opts: &SolverOptions,
    guess: Option<&FlowField<T>>,
) -> Result<PoissonSolution<T>> {
    opts.validate()?;
    problem.validate()?;
    let (w, h) = (problem.target.width, problem.target.height);
    let n = w * h;
    let op = Operator::new(problem, opts.unobserved_weight);
    let cap = opts.iteration_cap(n);
    let g = &problem.target;
    let jobs = [
        (&g.gx_u, &g.gy_u, problem.reference.u(), guess.map(|f| f.u())),
        (&g.gx_v, &g.gy_v, problem.reference.v(), guess.map(|f| f.v())),
    ];
    let solved: Vec<Result<(Vec<T>, usize, f64)>> = jobs
        .into_par_iter()
        .map(|(gx, gy, reference, init)| {
            let b = op.rhs(gx, gy, reference);
            let mut x: Vec<f64> = init.map(|s| s.iter().map(|v| v.f64()).collect()).unwrap_or_else(|| vec![0.0; n]);
            let (it, res) = conjugate_gradient(&op, &b, &mut x, opts.tolerance, cap)?;
            Ok((x.into_iter().map(T::of).collect(), it, res))
        })
        .collect();
    let mut solved = solved.into_iter();
    let (u, iu, ru) = solved.next().unwrap()?;
    let (v, iv, rv) = solved.next().unwrap()?;
    Ok(PoissonSolution {
        flow: FlowField::from_parts(w, h, u, v, vec![true; n])?,
        iterations: [iu, iv],
        residuals: [ru, rv],
    })
}

/// Block-averages a gradient field by `f`, producing the exact differences
/// of the block-averaged flow (triangle-weighted window across the two
/// neighboring blocks). The field is padded by edge replication.
pub fn downsample_gradient<T: Scalar>(g: &GradientField<T>, f: usize) -> GradientField<T> {
    let (w, h) = (g.width, g.height);
    let (wc, hc) = (w.div_ceil(f), h.div_ceil(f));
    let mut out = GradientField::zeros(wc, hc);
    let norm = (f * f) as f64;
    // sample of a fine difference plane with replication padding: beyond the
    // last observed difference the replicated flow is constant
    let fetch = |plane: &[T], valid: &[bool], x: usize, y: usize, along_x: bool| -> (f64, bool) {
        if (along_x && x + 1 >= w) || (!along_x && y + 1 >= h) {
            return (0.0, true);
        }
        let (xc, yc) = (x.min(w - 1), y.min(h - 1));
        let i = yc * w + xc;
        (plane[i].f64(), valid[i])
    };
    for yc in 0..hc {
        for xc in 0..wc {
            let ci = yc * wc + xc;
            for (along_x, limit) in [(true, xc + 1 < wc), (false, yc + 1 < hc)] {
                if !limit {
                    continue;
                }
                let (mut su, mut sv, mut wv, mut wt) = (0.0, 0.0, 0.0, 0.0);
                for r in 0..f {
                    for t in 0..2 * f - 1 {
                        let cnt = (t + 1).min(2 * f - 1 - t) as f64;
                        let (x, y) = if along_x { (xc * f + t, yc * f + r) } else { (xc * f + r, yc * f + t) };
                        let (pu, pv, valid) = if along_x {
                            (&g.gx_u, &g.gx_v, &g.valid_x)
                        } else {
                            (&g.gy_u, &g.gy_v, &g.valid_y)
                        };
                        let (a, ok) = fetch(pu, valid, x, y, along_x);
                        let (b, _) = fetch(pv, valid, x, y, along_x);
                        wt += cnt;
                        if ok {
                            su += cnt * a;
                            sv += cnt * b;
                            wv += cnt;
                        }
                    }
                }
                let valid = wv >= 0.5 * wt;
                let scale = if wv > 0.0 { wt / (wv * norm) } else { 0.0 };
                let (gu, gv) = (T::of(su * scale), T::of(sv * scale));
                if along_x {
                    out.gx_u[ci] = gu;
                    out.gx_v[ci] = gv;
                    out.valid_x[ci] = valid;
                } else {
                    out.gy_u[ci] = gu;
                    out.gy_v[ci] = gv;
                    out.valid_y[ci] = valid;
                }
            }
        }
    }
    out
}

/// Block average of a flow over masked-in pixels; a coarse pixel is valid
/// when at least half of its in-image block is.
pub fn downsample_flow<T: Scalar>(flow: &FlowField<T>, f: usize) -> Result<FlowField<T>> {
    let (w, h) = (flow.width(), flow.height());
    let (wc, hc) = (w.div_ceil(f), h.div_ceil(f));
    let mut u = vec![T::zero(); wc * hc];
    let mut v = vec![T::zero(); wc * hc];
    let mut mask = vec![false; wc * hc];
    for yc in 0..hc {
        for xc in 0..wc {
            let (mut su, mut sv, mut valid, mut total) = (0.0, 0.0, 0usize, 0usize);
            for y in yc * f..((yc + 1) * f).min(h) {
                for x in xc * f..((xc + 1) * f).min(w) {
                    total += 1;
                    if flow.is_valid(x, y) {
                        let (a, b) = flow.get(x, y);
                        su += a.f64();
                        sv += b.f64();
                        valid += 1;
                    }
                }
            }
            let ci = yc * wc + xc;
            if valid > 0 && 2 * valid >= total {
                u[ci] = T::of(su / valid as f64);
                v[ci] = T::of(sv / valid as f64);
                mask[ci] = true;
            }
        }
    }
    FlowField::from_parts(wc, hc, u, v, mask)
}

/// Linear interpolation of block-average samples back to `width x height`.
/// Each coarse sample sits at the mean position of its (edge-replicated)
/// block; values past the outermost samples are extrapolated linearly, so
/// affine fields come back exactly.
pub fn upsample_flow<T: Scalar>(coarse: &FlowField<T>, f: usize, width: usize, height: usize) -> Result<FlowField<T>> {
    let (wc, hc) = (coarse.width(), coarse.height());
    if wc != width.div_ceil(f) || hc != height.div_ceil(f) {
        return Err(Error::DimMismatch(format!("{wc}x{hc} cannot be upsampled by {f} to {width}x{height}")));
    }
    let centers = |len: usize, len_c: usize| -> Vec<f64> {
        (0..len_c).map(|c| (0..f).map(|i| (c * f + i).min(len - 1) as f64).sum::<f64>() / f as f64).collect()
    };
    let (cx, cy) = (centers(width, wc), centers(height, hc));
    let axis = |pos: usize, c: &[f64]| -> (usize, usize, f64) {
        if c.len() == 1 {
            return (0, 0, 0.0);
        }
        let guess = (pos as f64 - (f as f64 - 1.0) / 2.0) / f as f64;
        let i0 = (guess.floor().max(0.0) as usize).min(c.len() - 2);
        (i0, i0 + 1, (pos as f64 - c[i0]) / (c[i0 + 1] - c[i0]))
    };
    let n = width * height;
    let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let cu = coarse.u();
    let cv = coarse.v();
    for y in 0..height {
        let (y0, y1, ty) = axis(y, &cy);
        for x in 0..width {
            let (x0, x1, tx) = axis(x, &cx);
            let lerp = |p: &[T]| {
                let top = p[y0 * wc + x0].f64() * (1.0 - tx) + p[y0 * wc + x1].f64() * tx;
                let bottom = p[y1 * wc + x0].f64() * (1.0 - tx) + p[y1 * wc + x1].f64() * tx;
                T::of(top * (1.0 - ty) + bottom * ty)
            };
            u.push(lerp(cu));
            v.push(lerp(cv));
        }
    }
    FlowField::from_parts(width, height, u, v, vec![true; n])
}

/// Coarse version of a problem: gradients via [`downsample_gradient`], the
/// reference block-averaged over its mask.
pub fn downsample_problem<T: Scalar>(problem: &ScreenedPoissonProblem<T>, f: usize) -> Result<ScreenedPoissonProblem<T>> {
    let target = downsample_gradient(&problem.target, f);
    let (w, h) = (problem.target.width, problem.target.height);
    let masked = FlowField::from_parts(
        w,
        h,
        problem.reference.u().to_vec(),
        problem.reference.v().to_vec(),
        problem.reference_mask.clone(),
    )?;
    let reference = downsample_flow(&masked, f)?;
    let reference_mask = reference.mask().to_vec();
    let coarse = ScreenedPoissonProblem { target, reference, reference_mask, lambda: problem.lambda };
    coarse.validate()?;
    Ok(coarse)
}

/// Solves on an `f`-times coarser grid and upsamples bilinearly.
pub fn solve_downsampled<T: Scalar>(
    problem: &ScreenedPoissonProblem<T>,
    opts: &SolverOptions,
) -> Result<PoissonSolution<T>> {
    opts.validate()?;
    let f = opts.downsample_factor;
    if f == 1 {
        return solve(problem, opts);
    }
    let coarse = downsample_problem(problem, f)?;
    let sol = solve(&coarse, &SolverOptions { downsample_factor: 1, ..opts.clone() })?;
    let flow = upsample_flow(&sol.flow, f, problem.target.width, problem.target.height)?;
    Ok(PoissonSolution { flow, iterations: sol.iterations, residuals: sol.residuals })
}

/// Relative normal-equation residuals of a candidate solution, for
/// post-hoc certification.
pub fn relative_residuals<T: Scalar>(
    problem: &ScreenedPoissonProblem<T>,
    opts: &SolverOptions,
    flow: &FlowField<T>,
) -> [f64; 2] {
    let op = Operator::new(problem, opts.unobserved_weight);
    let g = &problem.target;
    let mut scratch = vec![0.0; flow.len()];
    let mut out = [0.0; 2];
    for (k, (gx, gy, r, x)) in [
        (&g.gx_u, &g.gy_u, problem.reference.u(), flow.u()),
        (&g.gx_v, &g.gy_v, problem.reference.v(), flow.v()),
    ]
    .into_iter()
    .enumerate()
    {
        let b = op.rhs(gx, gy, r);
        let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x: Vec<f64> = x.iter().map(|v| v.f64()).collect();
        let res = op.residual_norm(&x, &b, &mut scratch);
        out[k] = if b_norm == 0.0 { res } else { res / b_norm };
    }
    out
}
