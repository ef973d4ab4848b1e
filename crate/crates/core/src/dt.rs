//! Generalized distance transforms under separable quadratic deformation
//! costs: 3D for part placement, 2D (per time slice) for subpart placement.
//!
//! Both compute `out[p] = max_q scores[q] - d . phi(q - p)` with one
//! lower-envelope pass per axis, so the work is linear in the volume size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on quadratic deformation coefficients; below it the transform is rejected.
pub const DEFORM_EPS: f64 = 0.01;

/// Dense `(W, H, T)` grid of reals, `x` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl ScoreVolume {
    pub fn new(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self {
            dims,
            values: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, [x, y, t]: [usize; 3]) -> usize {
        (t * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> f64 {
        self.values[self.index(p)]
    }

    pub fn set(&mut self, p: [usize; 3], v: f64) {
        let i = self.index(p);
        self.values[i] = v;
    }

    /// Signed lookup; `None` outside the grid.
    pub fn try_get(&self, p: [i64; 3]) -> Option<f64> {
        to_cell(p, self.dims).map(|c| self.get(c))
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        to_cell(p, self.dims).is_some()
    }

    pub fn position(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }
}

pub(crate) fn to_cell(p: [i64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        if p[a] < 0 || p[a] as usize >= dims[a] {
            return None;
        }
        out[a] = p[a] as usize;
    }
    Some(out)
}

/// Part deformation weights over `(dx, dy, dt, dx^2, dy^2, dt^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformWeights3 {
    pub linear: [f64; 3],
    pub quadratic: [f64; 3],
}

impl DeformWeights3 {
    pub fn from_slice(d: &[f64; 6]) -> Self {
        Self {
            linear: [d[0], d[1], d[2]],
            quadratic: [d[3], d[4], d[5]],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.linear;
        let [e, f, g] = self.quadratic;
        [a, b, c, e, f, g]
    }

    /// `d . phi_3d(disp)`.
    pub fn cost(&self, disp: [i64; 3]) -> f64 {
        let mut c = 0.0;
        for ((&d, l), q) in disp.iter().zip(self.linear).zip(self.quadratic) {
            let v = d as f64;
            c += l * v + q * v * v;
        }
        c
    }
}

/// Subpart deformation weights over `(dx, dy, dx^2, dy^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformWeights2 {
    pub linear: [f64; 2],
    pub quadratic: [f64; 2],
}

impl DeformWeights2 {
    pub fn from_slice(d: &[f64; 4]) -> Self {
        Self {
            linear: [d[0], d[1]],
            quadratic: [d[2], d[3]],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [
            self.linear[0],
            self.linear[1],
            self.quadratic[0],
            self.quadratic[1],
        ]
    }

    /// `d . phi_2d(disp)`.
    pub fn cost(&self, disp: [i64; 2]) -> f64 {
        let mut c = 0.0;
        for ((&d, l), q) in disp.iter().zip(self.linear).zip(self.quadratic) {
            let v = d as f64;
            c += l * v + q * v * v;
        }
        c
    }
}

/// Transformed scores plus, for every output cell, the maximizing source cell.
#[derive(Debug, Clone)]
pub struct GdtOutput {
    pub values: ScoreVolume,
    pub argmax: Vec<[usize; 3]>,
}

impl GdtOutput {
    pub fn argmax_at(&self, p: [usize; 3]) -> [usize; 3] {
        self.argmax[self.values.index(p)]
    }
}

fn check_convex(quadratic: &[f64]) -> Result<()> {
    match quadratic.iter().find(|&&q| !(q >= DEFORM_EPS)) {
        Some(&q) => Err(Error::NonConvexWeights(q)),
        None => Ok(()),
    }
}

/// 3D transform, axes processed x, y, t.
pub fn gdt3(scores: &ScoreVolume, d: &DeformWeights3) -> Result<GdtOutput> {
    gdt3_ordered(scores, d, [0, 1, 2])
}

/// 3D transform with an explicit axis order (any permutation of `[0, 1, 2]`).
pub fn gdt3_ordered(
    scores: &ScoreVolume,
    d: &DeformWeights3,
    order: [usize; 3],
) -> Result<GdtOutput> {
    check_convex(&d.quadratic)?;
    let mut sorted = order;
    sorted.sort_unstable();
    if sorted != [0, 1, 2] {
        return Err(Error::ConfigInvalid(format!("bad axis order {order:?}")));
    }
    let passes: Vec<(usize, f64, f64)> = order
        .iter()
        .map(|&a| (a, d.linear[a], d.quadratic[a]))
        .collect();
    transform(scores, &passes)
}

/// [`gdt3`] accepting any non-negative quadratic coefficient. A zero
/// coefficient leaves that axis unconstrained apart from its linear term.
pub(crate) fn gdt3_relaxed(scores: &ScoreVolume, d: &DeformWeights3) -> Result<GdtOutput> {
    check_non_negative(&d.quadratic)?;
    transform(
        scores,
        &[0, 1, 2].map(|a| (a, d.linear[a], d.quadratic[a])),
    )
}

pub(crate) fn gdt2_relaxed(scores: &ScoreVolume, d: &DeformWeights2) -> Result<GdtOutput> {
    check_non_negative(&d.quadratic)?;
    transform(
        scores,
        &[(0, d.linear[0], d.quadratic[0]), (1, d.linear[1], d.quadratic[1])],
    )
}

fn check_non_negative(quadratic: &[f64]) -> Result<()> {
    match quadratic.iter().find(|&&q| !(q >= 0.0) || !q.is_finite()) {
        Some(&q) => Err(Error::NonConvexWeights(q)),
        None => Ok(()),
    }
}

/// 2D transform applied independently to every time slice.
pub fn gdt2(scores: &ScoreVolume, d: &DeformWeights2) -> Result<GdtOutput> {
    check_convex(&d.quadratic)?;
    transform(
        scores,
        &[(0, d.linear[0], d.quadratic[0]), (1, d.linear[1], d.quadratic[1])],
    )
}

fn transform(scores: &ScoreVolume, passes: &[(usize, f64, f64)]) -> Result<GdtOutput> {
    let dims = scores.dims;
    if dims.contains(&0) {
        return Err(Error::ShapeMismatch(format!("empty score volume {dims:?}")));
    }
    if scores.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::ShapeMismatch("non-finite score".into()));
    }
    let mut current = scores.values.clone();
    // Per pass, the winning coordinate along that pass's axis.
    let mut pass_args: Vec<Vec<usize>> = Vec::with_capacity(passes.len());
    let mut line_in = Vec::new();
    let mut line_out = Vec::new();
    let mut line_arg = Vec::new();
    let mut envelope = Envelope::default();
    for &(axis, lin, quad) in passes {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let mut next = vec![0.0; current.len()];
        let mut args = vec![0usize; current.len()];
        for start in line_starts(dims, axis) {
            line_in.clear();
            line_in.extend((0..n).map(|k| current[start + k * stride]));
            transform_line(&line_in, lin, quad, &mut envelope, &mut line_out, &mut line_arg);
            for k in 0..n {
                next[start + k * stride] = line_out[k];
                args[start + k * stride] = line_arg[k];
            }
        }
        current = next;
        pass_args.push(args);
    }

    let values = ScoreVolume {
        dims,
        values: current,
    };
    let argmax = (0..values.len())
        .map(|i| {
            let mut p = values.position(i);
            for (&(axis, _, _), args) in passes.iter().zip(&pass_args).rev() {
                p[axis] = args[values.index(p)];
            }
            p
        })
        .collect();
    Ok(GdtOutput { values, argmax })
}

fn line_starts(dims: [usize; 3], axis: usize) -> impl Iterator<Item = usize> {
    let [w, h, t] = dims;
    let (na, nb) = match axis {
        0 => (h, t),
        1 => (w, t),
        _ => (w, h),
    };
    (0..nb).flat_map(move |b| {
        (0..na).map(move |a| match axis {
            0 => b * w * h + a * w,
            1 => b * w * h + a,
            _ => b * w + a,
        })
    })
}

#[derive(Default)]
struct Envelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

/// `out[p] = max_q f[q] - lin (q - p) - quad (q - p)^2` by the lower envelope
/// of the parabolas `quad (x - q)^2 - f[q]`, sampled at `x = p - lin / (2 quad)`.
fn transform_line(
    f: &[f64],
    lin: f64,
    quad: f64,
    env: &mut Envelope,
    out: &mut Vec<f64>,
    arg: &mut Vec<usize>,
) {
    let n = f.len();
    out.clear();
    arg.clear();
    if quad == 0.0 {
        let mut best = 0;
        for q in 1..n {
            if f[q] - lin * q as f64 > f[best] - lin * best as f64 {
                best = q;
            }
        }
        for p in 0..n {
            out.push(f[best] - lin * (best as f64 - p as f64));
            arg.push(best);
        }
        return;
    }
    let height = |q: usize| -f[q] + quad * (q * q) as f64;
    env.vertices.clear();
    env.bounds.clear();
    env.vertices.push(0);
    env.bounds.push(f64::NEG_INFINITY);
    for q in 1..n {
        loop {
            let v = *env.vertices.last().expect("non-empty envelope");
            let s = (height(q) - height(v)) / (2.0 * quad * (q - v) as f64);
            if s <= *env.bounds.last().expect("non-empty envelope") && env.vertices.len() > 1 {
                env.vertices.pop();
                env.bounds.pop();
            } else {
                env.vertices.push(q);
                env.bounds.push(s);
                break;
            }
        }
    }
    let shift = lin / (2.0 * quad);
    let mut k = 0;
    for p in 0..n {
        let x = p as f64 - shift;
        while k + 1 < env.vertices.len() && env.bounds[k + 1] < x {
            k += 1;
        }
        let q = env.vertices[k];
        let disp = q as f64 - p as f64;
        out.push(f[q] - (lin * disp + quad * disp * disp));
        arg.push(q);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute3(s: &ScoreVolume, d: &DeformWeights3) -> (Vec<f64>, Vec<[usize; 3]>) {
        let n = s.len();
        let mut vals = Vec::with_capacity(n);
        let mut args = Vec::with_capacity(n);
        for i in 0..n {
            let p = s.position(i);
            let mut best = f64::NEG_INFINITY;
            let mut arg = p;
            for j in 0..n {
                let q = s.position(j);
                let disp = [0, 1, 2].map(|a| q[a] as i64 - p[a] as i64);
                let v = s.values[j] - d.cost(disp);
                if v > best {
                    best = v;
                    arg = q;
                }
            }
            vals.push(best);
            args.push(arg);
        }
        (vals, args)
    }

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> ScoreVolume {
        let n = dims.iter().product();
        ScoreVolume::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_brute_force_on_4x4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_volume(&mut rng, [4, 4, 4]);
        let d = DeformWeights3::from_slice(&[0.1, 0.1, 0.1, 0.05, 0.05, 0.05]);
        let out = gdt3(&s, &d).unwrap();
        let (vals, args) = brute3(&s, &d);
        for i in 0..s.len() {
            assert!((out.values.values[i] - vals[i]).abs() <= 1e-9);
            assert_eq!(out.argmax[i], args[i]);
        }
    }

    #[test]
    fn huge_penalty_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_volume(&mut rng, [3, 5, 2]);
        let d = DeformWeights3::from_slice(&[0.0, 0.0, 0.0, 1e3, 1e3, 1e3]);
        let out = gdt3(&s, &d).unwrap();
        assert_eq!(out.values, s);
        for i in 0..s.len() {
            assert_eq!(out.argmax[i], s.position(i));
        }
    }

    #[test]
    fn near_free_displacement_reaches_global_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = random_volume(&mut rng, [4, 4, 4]);
        // Unique maximum well clear of the largest possible displacement cost (0.27).
        s.set([2, 1, 3], 5.0);
        let d = DeformWeights3::from_slice(&[0.0, 0.0, 0.0, DEFORM_EPS, DEFORM_EPS, DEFORM_EPS]);
        let out = gdt3(&s, &d).unwrap();
        for i in 0..s.len() {
            assert_eq!(out.argmax[i], [2, 1, 3]);
            assert!((out.values.values[i] - 5.0).abs() <= 0.27 + 1e-12);
        }
    }

    #[test]
    fn single_cell_slice_is_identity() {
        let s = ScoreVolume::new([1, 1, 3], vec![0.5, -2.0, 7.0]).unwrap();
        let d = DeformWeights2::from_slice(&[0.3, -0.2, 0.1, 0.1]);
        let out = gdt2(&s, &d).unwrap();
        assert_eq!(out.values, s);
    }

    #[test]
    fn linear_terms_pick_closed_form_vertex() {
        // Constant scores: the best displacement minimizes lin*u + eps*u^2, whose
        // vertex is u* = -lin / (2 eps), clamped to the grid.
        let s = ScoreVolume::filled([9, 9, 1], 0.0);
        let d = DeformWeights2::from_slice(&[0.04, -0.06, DEFORM_EPS, DEFORM_EPS]);
        let out = gdt2(&s, &d).unwrap();
        let p = [4usize, 4, 0];
        let q = out.argmax_at(p);
        // u*_x = -2, u*_y = +3
        assert_eq!(q, [2, 7, 0]);
        let mut best = f64::NEG_INFINITY;
        let mut best_q = p;
        for qy in 0..9 {
            for qx in 0..9 {
                let c = -d.cost([qx as i64 - 4, qy as i64 - 4]);
                if c > best {
                    best = c;
                    best_q = [qx, qy, 0];
                }
            }
        }
        assert_eq!(q, best_q);
    }

    #[test]
    fn relaxed_zero_quadratic_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_volume(&mut rng, [4, 3, 3]);
        let d = DeformWeights3::from_slice(&[0.2, 0.0, -0.1, 0.0, 0.3, 0.0]);
        let out = gdt3_relaxed(&s, &d).unwrap();
        let (vals, _) = brute3(&s, &d);
        for i in 0..s.len() {
            assert!((out.values.values[i] - vals[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_non_convex() {
        let s = ScoreVolume::filled([2, 2, 2], 0.0);
        let d = DeformWeights3::from_slice(&[0.0, 0.0, 0.0, 0.1, 0.001, 0.1]);
        assert!(matches!(gdt3(&s, &d), Err(Error::NonConvexWeights(_))));
    }

    #[test]
    fn gdt2_is_per_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_volume(&mut rng, [5, 5, 3]);
        let d = DeformWeights2::from_slice(&[0.1, -0.05, 0.07, 0.2]);
        let out = gdt2(&s, &d).unwrap();
        for i in 0..s.len() {
            let p = s.position(i);
            assert_eq!(out.argmax[i][2], p[2]);
            let mut best = f64::NEG_INFINITY;
            for qy in 0..5 {
                for qx in 0..5 {
                    let v = s.get([qx, qy, p[2]])
                        - d.cost([qx as i64 - p[0] as i64, qy as i64 - p[1] as i64]);
                    best = best.max(v);
                }
            }
            assert!((out.values.values[i] - best).abs() < 1e-12);
        }
    }
}
