//! Spectral brain coordinates.
//!
//! The in-mask voxels of a volume form a graph: two voxels are adjacent when
//! they are 6-neighbors and both inside the mask (edge weight 1). With `W`
//! that adjacency and `D` the diagonal degree matrix, the operator here is
//! the combinatorial Laplacian `L = D - W`, applied matrix-free as a 7-point
//! stencil. The spectral coordinates are the eigenvectors of the smallest
//! nonzero eigenvalues of `L` on the largest connected component, each
//! reshaped to a volume and min-max normalized over the mask; three
//! normalized Cartesian index maps complete the six coordinate channels.
//!
//! The solver is block inverse iteration with conjugate-gradient inner
//! solves, deflated against the constant vector; its contract is the
//! residual bound, not the algorithm.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::Tensor5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("vector length {actual} does not match in-mask voxel count {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("mask has {voxels} usable voxels, need at least {needed}")]
    InsufficientMask { voxels: usize, needed: usize },
    #[error("eigensolver did not reach tolerance {tol}; residuals {residuals:?}")]
    NoConvergence { tol: f64, residuals: Vec<f64> },
    #[error("cannot canonicalize an all-zero vector")]
    ZeroVector,
}

/// Boolean inclusion mask over a `(d, h, w)` voxel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrainMask {
    pub dims: [usize; 3],
    pub inside: Vec<bool>,
}

impl BrainMask {
    pub fn new(dims: [usize; 3], inside: Vec<bool>) -> Self {
        assert_eq!(inside.len(), dims[0] * dims[1] * dims[2]);
        BrainMask { dims, inside }
    }

    pub fn from_nonzero<T: PartialEq + Default>(dims: [usize; 3], values: &[T]) -> Self {
        let zero = T::default();
        BrainMask::new(dims, values.iter().map(|v| *v != zero).collect())
    }

    pub fn voxel_count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn flat(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Connected-component labels under 6-neighborhood adjacency, plus the
    /// flat voxel ids of the largest component (ties resolved to the first
    /// encountered in scan order).
    pub fn largest_component(&self) -> Vec<usize> {
        let n = self.inside.len();
        let mut label = vec![u32::MAX; n];
        let mut sizes: Vec<usize> = Vec::new();
        let mut queue = Vec::new();
        for start in 0..n {
            if !self.inside[start] || label[start] != u32::MAX {
                continue;
            }
            let id = sizes.len() as u32;
            let mut size = 0usize;
            queue.push(start);
            label[start] = id;
            while let Some(v) = queue.pop() {
                size += 1;
                for nb in self.neighbors(v) {
                    if self.inside[nb] && label[nb] == u32::MAX {
                        label[nb] = id;
                        queue.push(nb);
                    }
                }
            }
            sizes.push(size);
        }
        if sizes.is_empty() {
            return Vec::new();
        }
        let best = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .unwrap();
        (0..n).filter(|&v| label[v] == best).collect()
    }

    fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        let [d, h, w] = self.dims;
        let z = v / (h * w);
        let y = (v / w) % h;
        let x = v % w;
        let mut out = [usize::MAX; 6];
        let mut k = 0;
        if z > 0 {
            out[k] = v - h * w;
            k += 1;
        }
        if z + 1 < d {
            out[k] = v + h * w;
            k += 1;
        }
        if y > 0 {
            out[k] = v - w;
            k += 1;
        }
        if y + 1 < h {
            out[k] = v + w;
            k += 1;
        }
        if x > 0 {
            out[k] = v - 1;
            k += 1;
        }
        if x + 1 < w {
            out[k] = v + 1;
            k += 1;
        }
        out.into_iter().take(k)
    }
}

/// Matrix-free `L = D - W` over a fixed set of in-mask voxels, with
/// precomputed neighbor lists.
pub struct LaplacianOperator {
    /// flat voxel id per operator index
    voxels: Vec<usize>,
    /// 6 neighbor operator indices per voxel, `-1` when absent
    neighbors: Vec<[i32; 6]>,
    degree: Vec<u8>,
}

impl LaplacianOperator {
    /// Operator over all voxels of the mask.
    pub fn from_mask(mask: &BrainMask) -> Self {
        let voxels: Vec<usize> = (0..mask.inside.len()).filter(|&v| mask.inside[v]).collect();
        Self::from_voxels(mask, voxels)
    }

    /// Operator over an explicit voxel subset (lexicographic order kept).
    pub fn from_voxels(mask: &BrainMask, voxels: Vec<usize>) -> Self {
        let mut index = vec![-1i64; mask.inside.len()];
        for (i, &v) in voxels.iter().enumerate() {
            index[v] = i as i64;
        }
        let mut neighbors = vec![[-1i32; 6]; voxels.len()];
        let mut degree = vec![0u8; voxels.len()];
        for (i, &v) in voxels.iter().enumerate() {
            let mut k = 0;
            for nb in mask.neighbors(v) {
                if index[nb] >= 0 {
                    neighbors[i][k] = index[nb] as i32;
                    k += 1;
                }
            }
            degree[i] = k as u8;
        }
        LaplacianOperator {
            voxels,
            neighbors,
            degree,
        }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    /// `(L x)_i = deg(i) x_i - sum of x over in-mask 6-neighbors`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.len());
        assert_eq!(out.len(), self.len());
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let mut acc = self.degree[i] as f64 * x[i];
            for &nb in &self.neighbors[i] {
                if nb >= 0 {
                    acc -= x[nb as usize];
                }
            }
            *o = acc;
        });
    }

    /// Checked variant of [`LaplacianOperator::apply`].
    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>, SpectralError> {
        if x.len() != self.len() {
            return Err(SpectralError::LengthMismatch {
                expected: self.len(),
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.len()];
        self.apply(x, &mut out);
        Ok(out)
    }
}

/// Flips `f` so its first entry above the magnitude threshold (in the
/// operator's lexicographic voxel order) is positive. Idempotent.
pub fn canonicalize_sign(f: &mut [f64]) -> Result<(), SpectralError> {
    let lead = f
        .iter()
        .find(|v| v.abs() > 1e-9)
        .ok_or(SpectralError::ZeroVector)?;
    if *lead < 0.0 {
        for v in f.iter_mut() {
            *v = -*v;
        }
    }
    Ok(())
}

/// Three volumes of per-axis indices divided by the axis length.
pub fn cartesian_coords(dims: [usize; 3]) -> [Vec<f32>; 3] {
    let [d, h, w] = dims;
    let n = d * h * w;
    let mut out = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                out[0][i] = z as f32 / d as f32;
                out[1][i] = y as f32 / h as f32;
                out[2][i] = x as f32 / w as f32;
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    pub outer_iterations: usize,
    pub cg_iterations: usize,
    pub residuals: Vec<f64>,
}

/// Six coordinate volumes (three spectral, three Cartesian) plus the raw
/// eigenpairs and a solver report. Channel order is fixed: spectral 1..3,
/// then Cartesian per axis.
#[derive(Clone, Debug)]
pub struct SpectralCoordinates {
    pub dims: [usize; 3],
    pub volumes: Vec<Vec<f32>>,
    pub eigenvalues: Vec<f64>,
    /// Flat voxel ids of the largest component, the eigenvector domain.
    pub component: Vec<usize>,
    /// Unit-norm, sign-canonicalized eigenvectors over `component`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub report: SolveReport,
}

impl SpectralCoordinates {
    /// Extracts the `(1, 6, edge, edge, edge)` coordinate patch centered at
    /// `center`; voxels outside the volume read as zero.
    pub fn extract_patch(&self, center: [usize; 3], edge: usize) -> Tensor5<f32> {
        let mut out = Tensor5::zeros([1, self.volumes.len(), edge, edge, edge]);
        let half = (edge / 2) as isize;
        let [d, h, w] = self.dims;
        for (ch, vol) in self.volumes.iter().enumerate() {
            for dz in 0..edge {
                let z = center[0] as isize + dz as isize - half;
                if z < 0 || z >= d as isize {
                    continue;
                }
                for dy in 0..edge {
                    let y = center[1] as isize + dy as isize - half;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..edge {
                        let x = center[2] as isize + dx as isize - half;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let v = vol[(z as usize * h + y as usize) * w + x as usize];
                        out.set(0, ch, dz, dy, dx, v);
                    }
                }
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the mean, i.e. projects out the constant vector.
fn project_out_constant(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    for v in x.iter_mut() {
        *v -= mean;
    }
}

/// Conjugate gradients for `L y = b` restricted to the complement of the
/// constant vector (where `L` is positive definite). `b` must already be
/// mean-free. Returns the iteration count.
fn cg_solve(
    op: &LaplacianOperator,
    b: &[f64],
    y: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> usize {
    let n = b.len();
    y.fill(0.0);
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return 0;
    }
    let mut rs = dot(&r, &r);
    for it in 0..max_iter {
        if rs.sqrt() <= rel_tol * b_norm {
            return it;
        }
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return it; // numerically singular direction; bail out
        }
        let alpha = rs / pap;
        for i in 0..n {
            y[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if it % 64 == 63 {
            project_out_constant(&mut r);
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    max_iter
}

/// Modified Gram-Schmidt against the constant vector and within the block.
/// Columns that collapse are refilled from the RNG and re-orthogonalized.
fn orthonormalize(block: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    let b = block.len();
    for j in 0..b {
        loop {
            project_out_constant(&mut block[j]);
            for i in 0..j {
                let (head, tail) = block.split_at_mut(j);
                let c = dot(&tail[0], &head[i]);
                for (t, s) in tail[0].iter_mut().zip(&head[i]) {
                    *t -= c * s;
                }
            }
            let nrm = norm(&block[j]);
            if nrm > 1e-12 {
                for v in block[j].iter_mut() {
                    *v /= nrm;
                }
                break;
            }
            for v in block[j].iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
}

/// Jacobi eigendecomposition of a small symmetric matrix (row-major n x n).
/// Returns eigenvalues ascending and the column eigenvectors.
fn jacobi_eig(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).unwrap());
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + new] = v[k * n + old];
        }
    }
    (values, vectors)
}

/// Default caps used by [`solve_spectral`].
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Computes the `count` eigenvectors of the smallest nonzero eigenvalues of
/// the mask Laplacian (on the largest connected component) plus normalized
/// Cartesian maps.
///
/// Each returned eigenpair satisfies `|L f - lambda f| <= tol * |f|`; the
/// vectors are mutually orthogonal, orthogonal to the constant vector, and
/// sign-canonicalized. In-mask voxels outside the largest component receive
/// the value of their nearest in-component voxel; off-mask voxels are zero.
pub fn solve_spectral(
    mask: &BrainMask,
    count: usize,
    tol: f64,
    max_iter: usize,
) -> Result<SpectralCoordinates, SpectralError> {
    let component = mask.largest_component();
    let n = component.len();
    if n < count + 1 {
        return Err(SpectralError::InsufficientMask {
            voxels: n,
            needed: count + 1,
        });
    }
    let op = LaplacianOperator::from_voxels(mask, component.clone());

    // Guard vectors absorb slow convergence near clustered eigenvalues.
    let guard = 2.min(n - count - 1);
    let b = count + guard;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5FD5_C003);
    let mut x: Vec<Vec<f64>> = (0..b)
        .map(|_| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    orthonormalize(&mut x, &mut rng);

    let mut report = SolveReport::default();
    let mut eigenvalues = vec![0.0; b];
    let mut residuals = vec![f64::INFINITY; b];
    let cg_tol = (tol * 1e-2).max(1e-12);
    let cg_cap = (20 * n).clamp(1000, 200_000);

    for outer in 0..max_iter {
        report.outer_iterations = outer + 1;
        // y_j = L^+ x_j via CG on the mean-free complement
        let mut y: Vec<Vec<f64>> = Vec::with_capacity(b);
        for xj in &x {
            let mut rhs = xj.clone();
            project_out_constant(&mut rhs);
            let mut yj = vec![0.0; n];
            report.cg_iterations += cg_solve(&op, &rhs, &mut yj, cg_tol, cg_cap);
            y.push(yj);
        }
        orthonormalize(&mut y, &mut rng);

        // Rayleigh-Ritz on the block
        let ly: Vec<Vec<f64>> = y.iter().map(|c| op.apply_vec(c).unwrap()).collect();
        let mut small = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                small[i * b + j] = dot(&y[i], &ly[j]);
            }
        }
        // symmetrize roundoff
        for i in 0..b {
            for j in i + 1..b {
                let m = 0.5 * (small[i * b + j] + small[j * b + i]);
                small[i * b + j] = m;
                small[j * b + i] = m;
            }
        }
        let (theta, vecs) = jacobi_eig(&mut small, b);
        let mut rotated: Vec<Vec<f64>> = vec![vec![0.0; n]; b];
        for (j, col) in rotated.iter_mut().enumerate() {
            for (i, yi) in y.iter().enumerate() {
                let c = vecs[i * b + j];
                if c != 0.0 {
                    for (o, v) in col.iter_mut().zip(yi) {
                        *o += c * v;
                    }
                }
            }
        }
        x = rotated;
        eigenvalues.copy_from_slice(&theta);

        let mut all_ok = true;
        for j in 0..count {
            let lx = op.apply_vec(&x[j]).unwrap();
            let xn = norm(&x[j]);
            let mut rr = 0.0;
            for i in 0..n {
                let r = lx[i] - theta[j] * x[j][i];
                rr += r * r;
            }
            residuals[j] = rr.sqrt() / xn;
            if residuals[j] > tol {
                all_ok = false;
            }
        }
        if all_ok {
            break;
        }
        if outer + 1 == max_iter {
            return Err(SpectralError::NoConvergence {
                tol,
                residuals: residuals[..count].to_vec(),
            });
        }
    }
    report.residuals = residuals[..count].to_vec();

    let mut eigenvectors: Vec<Vec<f64>> = x.into_iter().take(count).collect();
    let eigenvalues: Vec<f64> = eigenvalues.into_iter().take(count).collect();
    for f in eigenvectors.iter_mut() {
        let nrm = norm(f);
        for v in f.iter_mut() {
            *v /= nrm;
        }
        canonicalize_sign(f)?;
    }

    // Stray in-mask voxels outside the component copy their nearest
    // in-component voxel (multi-source BFS over the full grid).
    let grid = mask.inside.len();
    let mut source = vec![usize::MAX; grid];
    let mut frontier: Vec<usize> = Vec::with_capacity(n);
    for (i, &v) in component.iter().enumerate() {
        source[v] = i;
        frontier.push(v);
    }
    let mut strays_left = mask.voxel_count() - n;
    while strays_left > 0 && !frontier.is_empty() {
        let mut next = Vec::new();
        for &v in &frontier {
            for nb in mask.neighbors(v) {
                if source[nb] == usize::MAX {
                    source[nb] = source[v];
                    if mask.inside[nb] {
                        strays_left -= 1;
                    }
                    next.push(nb);
                }
            }
        }
        frontier = next;
    }

    let mut volumes: Vec<Vec<f32>> = Vec::with_capacity(6);
    for f in &eigenvectors {
        let mut full = vec![0f32; grid];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in 0..grid {
            if mask.inside[v] {
                let val = f[source[v]];
                lo = lo.min(val);
                hi = hi.max(val);
            }
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in 0..grid {
            if mask.inside[v] {
                full[v] = ((f[source[v]] - lo) / span) as f32;
            }
        }
        volumes.push(full);
    }
    volumes.extend(cartesian_coords(mask.dims));

    Ok(SpectralCoordinates {
        dims: mask.dims,
        volumes,
        eigenvalues,
        component,
        eigenvectors,
        report,
    })
}

/// [`solve_spectral`] on a grid coarsened by `factor`, with the spectral
/// volumes trilinearly upsampled back to full resolution. `factor == 1` is
/// the exact path.
pub fn solve_spectral_downsampled(
    mask: &BrainMask,
    count: usize,
    tol: f64,
    max_iter: usize,
    factor: usize,
) -> Result<SpectralCoordinates, SpectralError> {
    assert!(factor >= 1);
    if factor == 1 {
        return solve_spectral(mask, count, tol, max_iter);
    }
    let [d, h, w] = mask.dims;
    let cd = d.div_ceil(factor);
    let ch = h.div_ceil(factor);
    let cw = w.div_ceil(factor);
    // coarse voxel included when any constituent fine voxel is in-mask
    let mut coarse_inside = vec![false; cd * ch * cw];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.inside[(z * h + y) * w + x] {
                    coarse_inside[((z / factor) * ch + y / factor) * cw + x / factor] = true;
                }
            }
        }
    }
    let coarse_mask = BrainMask::new([cd, ch, cw], coarse_inside);
    let coarse = solve_spectral(&coarse_mask, count, tol, max_iter)?;

    let mut volumes: Vec<Vec<f32>> = Vec::with_capacity(6);
    for vol in coarse.volumes.iter().take(count) {
        let mut fine = vec![0f32; d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if !mask.inside[i] {
                        continue;
                    }
                    fine[i] = trilinear(
                        vol,
                        [cd, ch, cw],
                        [
                            (z as f32 + 0.5) / factor as f32 - 0.5,
                            (y as f32 + 0.5) / factor as f32 - 0.5,
                            (x as f32 + 0.5) / factor as f32 - 0.5,
                        ],
                    );
                }
            }
        }
        volumes.push(fine);
    }
    volumes.extend(cartesian_coords(mask.dims));
    Ok(SpectralCoordinates {
        dims: mask.dims,
        volumes,
        eigenvalues: coarse.eigenvalues,
        component: coarse.component,
        eigenvectors: coarse.eigenvectors,
        report: coarse.report,
    })
}

fn trilinear(vol: &[f32], dims: [usize; 3], pos: [f32; 3]) -> f32 {
    let [d, h, w] = dims;
    let clamp = |p: f32, n: usize| p.clamp(0.0, (n - 1) as f32);
    let (pz, py, px) = (clamp(pos[0], d), clamp(pos[1], h), clamp(pos[2], w));
    let (z0, y0, x0) = (
        pz.floor() as usize,
        py.floor() as usize,
        px.floor() as usize,
    );
    let (z1, y1, x1) = (
        (z0 + 1).min(d - 1),
        (y0 + 1).min(h - 1),
        (x0 + 1).min(w - 1),
    );
    let (fz, fy, fx) = (pz - z0 as f32, py - y0 as f32, px - x0 as f32);
    let at = |z: usize, y: usize, x: usize| vol[(z * h + y) * w + x];
    let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
    let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
    let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
    let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}
