//! Determinant-based trilinear forms.
//!
//! `det([a, b, c])` over consecutive 3-chunks gives a trilinear form that is
//! invariant under a shared rotation of its three arguments, unlike the plain
//! `sum_l a_l b_l c_l`. The Sarrus expansion writes each determinant as the
//! difference of two plain trilinear products with cyclically shifted
//! arguments, so the determinant logits reuse the trilinear contraction
//! twice.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::reference::{DoubleInputs, LogitTensor};
use crate::tensor::{AttnConfig, AttnInputs, Element, LogitForm, SeqTensor};

pub type Vec3 = [f64; 3];

/// Determinant of the matrix with rows `a`, `b`, `c`.
#[inline]
pub fn det3(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    a[0] * b[1] * c[2] + a[1] * b[2] * c[0] + a[2] * b[0] * c[1]
        - a[0] * b[2] * c[1]
        - a[1] * b[0] * c[2]
        - a[2] * b[1] * c[0]
}

/// Signed area `a1 b2 - a2 b1`.
#[inline]
pub fn det2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Cyclic shift `(x1, x2, x3) -> (x2, x3, x1)`.
#[inline]
pub fn rot(x: &Vec3) -> Vec3 {
    [x[1], x[2], x[0]]
}

#[inline]
fn tri(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    a[0] * b[0] * c[0] + a[1] * b[1] * c[1] + a[2] * b[2] * c[2]
}

/// The two trilinear terms of the Sarrus expansion:
/// `t1 = <a, rot(b), rot²(c)>`, `t2 = <a, rot²(b), rot(c)>`, `t1 - t2 = det3(a, b, c)`.
pub fn sarrus_split(a: &Vec3, b: &Vec3, c: &Vec3) -> (f64, f64) {
    let (rb, rc) = (rot(b), rot(c));
    let (rrb, rrc) = (rot(&rb), rot(&rc));
    (tri(a, &rb, &rrc), tri(a, &rrb, &rc))
}

/// A per-3-chunk cyclic permutation applied to every chunk of a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkPerm {
    Identity,
    /// `rot`
    Shift1,
    /// `rot²`
    Shift2,
}

impl ChunkPerm {
    #[inline]
    fn offset(self) -> usize {
        match self {
            ChunkPerm::Identity => 0,
            ChunkPerm::Shift1 => 1,
            ChunkPerm::Shift2 => 2,
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            ChunkPerm::Identity => ChunkPerm::Identity,
            ChunkPerm::Shift1 => ChunkPerm::Shift2,
            ChunkPerm::Shift2 => ChunkPerm::Shift1,
        }
    }

    /// `dst = P src`, chunkwise. The identity is valid for any length.
    pub fn apply<T: Copy>(self, src: &[T], dst: &mut [T]) {
        if self == ChunkPerm::Identity {
            dst.copy_from_slice(src);
            return;
        }
        let o = self.offset();
        for c in (0..src.len()).step_by(3) {
            for m in 0..3 {
                dst[c + m] = src[c + (m + o) % 3];
            }
        }
    }
}

/// One signed term `sign * <q, P k, R k'>` of a logit form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrilinearTerm {
    pub sign: f64,
    pub perm_k: ChunkPerm,
    pub perm_k2: ChunkPerm,
}

/// Decomposes a logit form into plain trilinear terms: one for the
/// trilinear form, the two Sarrus terms for sum-of-determinants.
pub fn trilinear_terms(form: LogitForm) -> Vec<TrilinearTerm> {
    match form {
        LogitForm::Trilinear => vec![TrilinearTerm { sign: 1.0, perm_k: ChunkPerm::Identity, perm_k2: ChunkPerm::Identity }],
        LogitForm::SumOfDeterminants => vec![
            TrilinearTerm { sign: 1.0, perm_k: ChunkPerm::Shift1, perm_k2: ChunkPerm::Shift2 },
            TrilinearTerm { sign: -1.0, perm_k: ChunkPerm::Shift2, perm_k2: ChunkPerm::Shift1 },
        ],
    }
}

/// Scaled sum-of-determinant logits on the attention window, evaluated as
/// the difference of the two Sarrus trilinear contractions.
pub fn det_logits<T: Element>(inputs: &AttnInputs<'_, T>, cfg: &AttnConfig) -> Result<LogitTensor> {
    if !cfg.d.is_multiple_of(3) {
        return Err(Error::config(format!("sum-of-determinant logits need d divisible by 3, got d = {}", cfg.d)));
    }
    let cfg_det = AttnConfig { logit_form: LogitForm::SumOfDeterminants, ..cfg.clone() };
    inputs.check(&cfg_det)?;
    let x = DoubleInputs::new(inputs, cfg);
    let permuted = |t: &SeqTensor<f64>, p: ChunkPerm| {
        let mut out = t.clone();
        for (src, dst) in t.data().chunks(cfg.d).zip(out.data_mut().chunks_mut(cfg.d)) {
            p.apply(src, dst);
        }
        out
    };
    // t1 = <q, rot k, rot² k'>, t2 = <q, rot² k, rot k'>
    let (k_r1, k_r2) = (permuted(&x.k, ChunkPerm::Shift1), permuted(&x.k, ChunkPerm::Shift2));
    let (k2_r1, k2_r2) = (permuted(&x.k2, ChunkPerm::Shift1), permuted(&x.k2, ChunkPerm::Shift2));
    Ok(LogitTensor::from_cells(cfg, inputs.batch(), true, |b, h, i, j, k| {
        let g = cfg.kv_head_for(h);
        let q = x.q.row(b, i, h);
        let (a1, c1) = (k_r1.row(b, j, g), k2_r2.row(b, k, g));
        let (a2, c2) = (k_r2.row(b, j, g), k2_r1.row(b, k, g));
        let mut t1 = 0.0;
        let mut t2 = 0.0;
        for l in 0..cfg.d {
            t1 += q[l] * a1[l] * c1[l];
            t2 += q[l] * a2[l] * c2[l];
        }
        cfg.scale * (t1 - t2)
    }))
}

/// A 3×3 rotation (orthogonal, determinant +1), row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3([[f64; 3]; 3]);

impl Rotation3 {
    pub const IDENTITY: Rotation3 = Rotation3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Accepts `m` if `mᵀm = I` and `det m = 1` to within `1e-12`.
    pub fn try_new(m: [[f64; 3]; 3]) -> Result<Self> {
        for r in 0..3 {
            for c in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][r] * m[k][c]).sum();
                let want = if r == c { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-12 {
                    return Err(Error::domain(format!("matrix is not orthogonal: (RᵀR)[{r}][{c}] = {dot}")));
                }
            }
        }
        let det = det3(&m[0], &m[1], &m[2]);
        if (det - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("rotation must have determinant +1, got {det}")));
        }
        Ok(Rotation3(m))
    }

    /// Rotation by `angle` about the unit vector along `axis` (Rodrigues).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = [axis[0] / norm, axis[1] / norm, axis[2] / norm];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Rotation3([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    /// Uniform rotation from a normalized Gaussian quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut q = [0.0f64; 4];
        loop {
            for x in q.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.iter_mut().for_each(|x| *x /= n);
                break;
            }
        }
        let [w, x, y, z] = q;
        Rotation3([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    #[inline]
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

/// Replaces every 3-chunk of every vector of `x` with `R · chunk`.
pub fn apply_chunk_rotation<T: Element>(r: &Rotation3, x: &SeqTensor<T>) -> Result<SeqTensor<T>> {
    let p = x.shape().dim / 3;
    apply_chunk_rotations(&vec![*r; p.max(1)], x)
}

/// Chunk `l` of every vector is rotated by `rs[l]`.
pub fn apply_chunk_rotations<T: Element>(rs: &[Rotation3], x: &SeqTensor<T>) -> Result<SeqTensor<T>> {
    let d = x.shape().dim;
    if !d.is_multiple_of(3) {
        return Err(Error::config(format!("chunk rotation needs d divisible by 3, got {d}")));
    }
    if rs.len() != d / 3 {
        return Err(Error::config(format!("expected {} rotations, got {}", d / 3, rs.len())));
    }
    // Re-validate; `Rotation3` values built through `from_axis_angle` or
    // `random` carry rounding error but stay well inside the tolerance.
    for r in rs {
        Rotation3::try_new(r.0)?;
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (l, r) in rs.iter().enumerate() {
            let c = 3 * l;
            let v = r.apply(&[row[c].to_f64(), row[c + 1].to_f64(), row[c + 2].to_f64()]);
            for m in 0..3 {
                row[c + m] = T::from_f64(v[m]);
            }
        }
    }
    Ok(out)
}

/// `(cos(θ1 + θ2 + θ3), det(M1) + det(-M2))`; the two agree identically.
pub fn cos_sum_identity(t1: f64, t2: f64, t3: f64) -> (f64, f64) {
    let (s1, c1) = t1.sin_cos();
    let (s2, c2) = t2.sin_cos();
    let (s3, c3) = t3.sin_cos();
    let m1 = [[c1, s1, 0.0], [s2, c2, 0.0], [0.0, 0.0, c3]];
    let neg_m2 = [[-s1, c1, 0.0], [-s2, -c2, 0.0], [0.0, 0.0, -s3]];
    let lhs = (t1 + t2 + t3).cos();
    let rhs = det3(&m1[0], &m1[1], &m1[2]) + det3(&neg_m2[0], &neg_m2[1], &neg_m2[2]);
    (lhs, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::tensor::{AttnTensors, Shape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    const E1: Vec3 = [1.0, 0.0, 0.0];
    const E2: Vec3 = [0.0, 1.0, 0.0];
    const E3: Vec3 = [0.0, 0.0, 1.0];

    fn cofactor_det(m: [[f64; 3]; 3]) -> f64 {
        let minor = |r: usize, c: usize| {
            let rows: Vec<usize> = (0..3).filter(|&x| x != r).collect();
            let cols: Vec<usize> = (0..3).filter(|&x| x != c).collect();
            m[rows[0]][cols[0]] * m[rows[1]][cols[1]] - m[rows[0]][cols[1]] * m[rows[1]][cols[0]]
        };
        (0..3).map(|c| if c % 2 == 0 { 1.0 } else { -1.0 } * m[0][c] * minor(0, c)).sum()
    }

    fn rand3(rng: &mut ChaCha8Rng) -> Vec3 {
        [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
    }

    #[test]
    fn det3_examples() {
        assert_eq!(det3(&E1, &E2, &E3), 1.0);
        assert_eq!(det3(&E2, &E1, &E3), -1.0);
        let m = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 10.0]];
        assert_eq!(cofactor_det(m), -3.0);
        assert!((det3(&m[0], &m[1], &m[2]) + 3.0).abs() < 1e-12);
        assert_eq!(det2(&[1.0, 2.0], &[3.0, 4.0]), -2.0);
    }

    #[test]
    fn sarrus_examples() {
        assert_eq!(sarrus_split(&E1, &E2, &E3), (1.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand3(&mut rng);
        let c = rand3(&mut rng);
        let (t1, t2) = sarrus_split(&a, &a, &c);
        assert!((t1 - t2).abs() < 1e-14);
        for _ in 0..100 {
            let (a, b, c) = (rand3(&mut rng), rand3(&mut rng), rand3(&mut rng));
            let (t1, t2) = sarrus_split(&a, &b, &c);
            assert!((t1 - t2 - det3(&a, &b, &c)).abs() < 1e-14);
        }
    }

    #[test]
    fn chunk_perm_matches_rot() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 6];
        ChunkPerm::Shift1.apply(&v, &mut out);
        assert_eq!(out, [2.0, 3.0, 1.0, 5.0, 6.0, 4.0]);
        let mut back = [0.0; 6];
        ChunkPerm::Shift1.inverse().apply(&out, &mut back);
        assert_eq!(back, v);
    }

    fn naive_det_logit(q: &[f64], k: &[f64], k2: &[f64]) -> f64 {
        (0..q.len() / 3)
            .map(|l| {
                let c = 3 * l;
                cofactor_det([[q[c], q[c + 1], q[c + 2]], [k[c], k[c + 1], k[c + 2]], [k2[c], k2[c + 1], k2[c + 2]]])
            })
            .sum()
    }

    #[test]
    fn det_logit_examples() {
        let cfg = AttnConfig::new(1, 3, 1, 1).with_scale(1.0);
        let mk = |v: Vec3| SeqTensor::from_vec(Shape::new(1, 1, 1, 3), v.to_vec()).unwrap();
        let (q, k, k2) = (mk(E1), mk(E2), mk(E3));
        let a = det_logits(&AttnInputs::new(&q, &k, &k2, &q, &q), &cfg).unwrap();
        assert_eq!(a.get(0, 0, 0, 0, 0), Some(1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = AttnConfig::new(5, 6, 3, 3);
        let t = AttnTensors::<f64>::random(&cfg, 1, &mut rng).unwrap();
        // every k_j equal to every k'_k: repeated rows
        let same = SeqTensor::from_fn(cfg.kv_shape(1), |_, _, _, l| t.k.get(0, 0, 0, l)).unwrap();
        let a = det_logits(&AttnInputs::new(&t.q, &same, &same, &t.v, &t.v2), &cfg).unwrap();
        assert!(a.values().iter().zip(a.validity()).all(|(&v, &ok)| !ok || v.abs() < 1e-13));

        let a = det_logits(&t.inputs(), &cfg).unwrap();
        for i in 0..cfg.n {
            for j in cfg.window_k(i).range() {
                for k in cfg.window_k2(i).range() {
                    let want = cfg.scale * naive_det_logit(t.q.row(0, i, 0), t.k.row(0, j, 0), t.k2.row(0, k, 0));
                    assert!((a.get(0, 0, i, j, k).unwrap() - want).abs() < 1e-13);
                }
            }
        }
        let bad = AttnConfig::new(5, 4, 3, 3);
        let t = AttnTensors::<f64>::random(&bad, 1, &mut rng).unwrap();
        assert!(matches!(det_logits(&t.inputs(), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn rotation_examples() {
        let x = SeqTensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(apply_chunk_rotation(&Rotation3::IDENTITY, &x).unwrap(), x);
        let rz = Rotation3::from_axis_angle(E3, FRAC_PI_2);
        let y: SeqTensor<f64> = apply_chunk_rotation(&rz, &x).unwrap();
        assert!((y.get(0, 0, 0, 0)).abs() < 1e-15 && (y.get(0, 0, 0, 1) - 1.0).abs() < 1e-15);
        assert!(Rotation3::try_new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]).is_err());
        assert!(Rotation3::try_new([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(matches!(
            apply_chunk_rotation(&Rotation3([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), &x),
            Err(Error::InputDomain(_))
        ));
    }

    #[test]
    fn det_logits_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = AttnConfig::new(6, 9, 4, 3);
        let t = AttnTensors::<f64>::random(&cfg, 1, &mut rng).unwrap();
        let a0 = det_logits(&t.inputs(), &cfg).unwrap();
        // shared R, then distinct per-chunk R_l
        let shared = [Rotation3::random(&mut rng); 3];
        let distinct = [Rotation3::random(&mut rng), Rotation3::random(&mut rng), Rotation3::random(&mut rng)];
        for rs in [shared, distinct] {
            let rq = apply_chunk_rotations(&rs, &t.q).unwrap();
            let rk = apply_chunk_rotations(&rs, &t.k).unwrap();
            let rk2 = apply_chunk_rotations(&rs, &t.k2).unwrap();
            let a1 = det_logits(&AttnInputs::new(&rq, &rk, &rk2, &t.v, &t.v2), &cfg).unwrap();
            for (x, y) in a0.values().iter().zip(a1.values()) {
                assert!((x - y).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn sarrus_end_to_end_matches_naive_determinants() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = AttnConfig::new(7, 6, 4, 3).with_logit_form(LogitForm::SumOfDeterminants);
        let t = AttnTensors::<f64>::random(&cfg, 1, &mut rng).unwrap();
        let out = reference::forward(&t.inputs(), &cfg).unwrap();
        let naive = LogitTensor::from_cells(&cfg, 1, true, |b, h, i, j, k| {
            cfg.scale * naive_det_logit(t.q.row(b, i, h), t.k.row(b, j, h), t.k2.row(b, k, h))
        });
        let w = reference::masked_softmax_jk(naive);
        let naive_out = reference::attn_output(&w, &t.v, &t.v2, &cfg).unwrap();
        for (x, y) in out.out.data().iter().zip(naive_out.out.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cos_identity_examples() {
        assert_eq!(cos_sum_identity(0.0, 0.0, 0.0), (1.0, 1.0));
        let (l, r) = cos_sum_identity(FRAC_PI_2, 0.0, 0.0);
        assert!(l.abs() < 1e-15 && r.abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let (a, b, c) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            let (l, r) = cos_sum_identity(a, b, c);
            assert!((l - r).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn det3_antisymmetric(a in prop::array::uniform3(-5.0f64..5.0), b in prop::array::uniform3(-5.0f64..5.0), c in prop::array::uniform3(-5.0f64..5.0)) {
            let d = det3(&a, &b, &c);
            let tol = 1e-11;
            prop_assert!((det3(&b, &a, &c) + d).abs() < tol);
            prop_assert!((det3(&a, &c, &b) + d).abs() < tol);
            prop_assert!((det3(&c, &b, &a) + d).abs() < tol);
        }

        #[test]
        fn det3_multilinear(alpha in -3.0f64..3.0, a in prop::array::uniform3(-5.0f64..5.0), a2 in prop::array::uniform3(-5.0f64..5.0), b in prop::array::uniform3(-5.0f64..5.0), c in prop::array::uniform3(-5.0f64..5.0)) {
            let mix = [alpha * a[0] + a2[0], alpha * a[1] + a2[1], alpha * a[2] + a2[2]];
            let lhs = det3(&mix, &b, &c);
            let rhs = alpha * det3(&a, &b, &c) + det3(&a2, &b, &c);
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
