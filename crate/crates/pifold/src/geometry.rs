//! Rotation/translation-invariant residue geometry: local frames, radial
//! basis distance encodings, backbone bond/torsion angles, relative-rotation
//! quaternions, direction features and virtual-atom placement.
//!
//! Everything here is a pure function of coordinates, computed in f64 and
//! cast to the working precision at the featurization boundary.

use crate::error::{Error, Result};
use crate::protein::Protein;
use crate::real::Real;

/// Below this length a vector is treated as degenerate.
pub const EPS_DEGENERATE: f64 = 1e-8;

// ── 3-vector helpers ─────────────────────────────────────────────────

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(v: Vec3, s: f64) -> Vec3 {
    [v[0] * s, v[1] * s, v[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(v: Vec3) -> f64 {
    dot(v, v).sqrt()
}

#[inline]
pub fn normalize(v: Vec3) -> Vec3 {
    scale(v, 1.0 / norm(v))
}

#[inline]
pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

// ── Local frames ─────────────────────────────────────────────────────

/// Per-residue orthonormal frame. `basis` holds the three column vectors
/// `[b, n, b × n]`; `origin` is the CA position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub basis: [Vec3; 3],
    pub origin: Vec3,
    pub degenerate: bool,
}

impl LocalFrame {
    /// Express a world-space vector in this frame: `Qᵀ v`.
    #[inline]
    pub fn to_local(&self, v: Vec3) -> Vec3 {
        [dot(self.basis[0], v), dot(self.basis[1], v), dot(self.basis[2], v)]
    }

    /// Map local coordinates back to a world-space point: `Q p + origin`.
    #[inline]
    pub fn place(&self, p: Vec3) -> Vec3 {
        add(
            add(scale(self.basis[0], p[0]), scale(self.basis[1], p[1])),
            add(scale(self.basis[2], p[2]), self.origin),
        )
    }

    /// Max deviation of `QᵀQ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.basis[i], self.basis[j]) - target).abs());
            }
        }
        worst
    }

    pub fn det(&self) -> f64 {
        dot(self.basis[0], cross(self.basis[1], self.basis[2]))
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        self.orthonormality_error() <= tol && (self.det() - 1.0).abs() <= tol
    }

    /// Basis flattened for the working precision, row-major `Q[r][c]`
    /// (column `c` is basis vector `c`).
    pub fn cast_basis<T: Real>(&self) -> [[T; 3]; 3] {
        let mut q = [[T::zero(); 3]; 3];
        for (c, col) in self.basis.iter().enumerate() {
            for r in 0..3 {
                q[r][c] = T::from(col[r]).unwrap();
            }
        }
        q
    }

    pub fn cast_origin<T: Real>(&self) -> [T; 3] {
        [
            T::from(self.origin[0]).unwrap(),
            T::from(self.origin[1]).unwrap(),
            T::from(self.origin[2]).unwrap(),
        ]
    }
}

/// A deterministic unit vector orthogonal to `b`, built from the axis with
/// the smallest-magnitude component of `b`.
fn orthogonal_unit(b: Vec3) -> Vec3 {
    let abs = [b[0].abs(), b[1].abs(), b[2].abs()];
    let mut axis = 0;
    if abs[1] < abs[axis] {
        axis = 1;
    }
    if abs[2] < abs[axis] {
        axis = 2;
    }
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let proj = dot(e, b);
    normalize(sub(e, scale(b, proj)))
}

/// Build the per-residue frame from `u = CA − N`, `v = C − CA`:
/// `b = (u − v)/‖u − v‖`, `n = (u × v)/‖u × v‖`, basis `[b, n, b × n]`.
/// Collinear or coincident backbones fall back to a deterministic frame and
/// are flagged degenerate.
pub fn residue_frame(n_atom: Vec3, ca: Vec3, c_atom: Vec3) -> LocalFrame {
    let u = sub(ca, n_atom);
    let v = sub(c_atom, ca);
    let diff = sub(u, v);
    let cr = cross(u, v);
    if norm(diff) < EPS_DEGENERATE || norm(cr) < EPS_DEGENERATE {
        let b = if norm(diff) >= EPS_DEGENERATE {
            normalize(diff)
        } else if norm(u) >= EPS_DEGENERATE {
            normalize(u)
        } else {
            [1.0, 0.0, 0.0]
        };
        let n = orthogonal_unit(b);
        return LocalFrame { basis: [b, n, cross(b, n)], origin: ca, degenerate: true };
    }
    let b = normalize(diff);
    let n = normalize(cr);
    LocalFrame { basis: [b, n, cross(b, n)], origin: ca, degenerate: false }
}

/// Frames for every residue of a protein. Masked residues still get a frame
/// (their coordinates may be junk) but it is flagged degenerate.
pub fn local_frames(protein: &Protein) -> Vec<LocalFrame> {
    (0..protein.len())
        .map(|i| {
            if protein.mask[i] {
                residue_frame(protein.n[i], protein.ca[i], protein.c[i])
            } else {
                LocalFrame {
                    basis: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                    origin: [0.0; 3],
                    degenerate: true,
                }
            }
        })
        .collect()
}

// ── Radial basis encoding ────────────────────────────────────────────

/// Evenly spaced Gaussian centers on `[min, max]` with width equal to the
/// center spacing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RbfSpec {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for RbfSpec {
    fn default() -> Self {
        RbfSpec { count: 16, min: 0.0, max: 20.0 }
    }
}

impl RbfSpec {
    pub fn sigma(&self) -> f64 {
        (self.max - self.min) / (self.count as f64 - 1.0)
    }

    pub fn center(&self, i: usize) -> f64 {
        self.min + self.sigma() * i as f64
    }

    /// Gaussian responses `exp(−(d − μᵢ)² / σ²)` for a non-negative distance.
    pub fn encode(&self, d: f64) -> Result<Vec<f64>> {
        if d < 0.0 {
            return Err(Error::Invalid(format!("rbf_encode: negative distance {d}")));
        }
        Ok(self.encode_unchecked(d))
    }

    pub fn encode_unchecked(&self, d: f64) -> Vec<f64> {
        let sigma = self.sigma();
        (0..self.count)
            .map(|i| {
                let z = (d - self.center(i)) / sigma;
                (-z * z).exp()
            })
            .collect()
    }
}

// ── Angles ───────────────────────────────────────────────────────────

/// Bond angle at `b` formed by `a–b–c`, in radians. Degenerate arms yield
/// `None`.
pub fn bond_angle(a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let u = sub(a, b);
    let v = sub(c, b);
    let nu = norm(u);
    let nv = norm(v);
    if nu < EPS_DEGENERATE || nv < EPS_DEGENERATE {
        return None;
    }
    Some((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0).acos())
}

/// Signed dihedral of the chain `p0–p1–p2–p3`, in radians. Collinear spans
/// yield `None`.
pub fn dihedral(p0: Vec3, p1: Vec3, p2: Vec3, p3: Vec3) -> Option<f64> {
    let b1 = sub(p1, p0);
    let b2 = sub(p2, p1);
    let b3 = sub(p3, p2);
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let nb2 = norm(b2);
    if norm(n1) < EPS_DEGENERATE || norm(n2) < EPS_DEGENERATE || nb2 < EPS_DEGENERATE {
        return None;
    }
    let m1 = cross(n1, scale(b2, 1.0 / nb2));
    Some(dot(m1, n2).atan2(dot(n1, n2)))
}

/// Six backbone angles per residue as (sin, cos) pairs in the fixed order
/// `[α, β, γ, ω, φ, ψ]`. Undefined angles (terminals, chain breaks, masked
/// neighbors, degenerate geometry) are the sentinel `(0, 0)`.
///
/// Atom quadruples:
/// - `α_i = ∠(C_{i−1}, N_i, CA_i)`, `β_i = ∠(N_i, CA_i, C_i)`,
///   `γ_i = ∠(CA_i, C_i, N_{i+1})`
/// - `ω_i = dih(CA_{i−1}, C_{i−1}, N_i, CA_i)`,
///   `φ_i = dih(C_{i−1}, N_i, CA_i, C_i)`,
///   `ψ_i = dih(N_i, CA_i, C_i, N_{i+1})`
pub fn backbone_angles(protein: &Protein) -> Vec<[[f64; 2]; 6]> {
    let pair = |a: Option<f64>| a.map_or([0.0, 0.0], |t| [t.sin(), t.cos()]);
    (0..protein.len())
        .map(|i| {
            if !protein.mask[i] {
                return [[0.0, 0.0]; 6];
            }
            let prev = i > 0 && protein.bonded(i - 1);
            let next = protein.bonded(i);
            let alpha = prev
                .then(|| bond_angle(protein.c[i - 1], protein.n[i], protein.ca[i]))
                .flatten();
            let beta = bond_angle(protein.n[i], protein.ca[i], protein.c[i]);
            let gamma = next
                .then(|| bond_angle(protein.ca[i], protein.c[i], protein.n[i + 1]))
                .flatten();
            let omega = prev
                .then(|| dihedral(protein.ca[i - 1], protein.c[i - 1], protein.n[i], protein.ca[i]))
                .flatten();
            let phi = prev
                .then(|| dihedral(protein.c[i - 1], protein.n[i], protein.ca[i], protein.c[i]))
                .flatten();
            let psi = next
                .then(|| dihedral(protein.n[i], protein.ca[i], protein.c[i], protein.n[i + 1]))
                .flatten();
            [pair(alpha), pair(beta), pair(gamma), pair(omega), pair(phi), pair(psi)]
        })
        .collect()
}

// ── Relative-rotation quaternions ────────────────────────────────────

/// Unit quaternion `(w, x, y, z)` of the relative rotation `Q_iᵀ Q_j`,
/// extracted with the largest-pivot method and canonicalized to `w ≥ 0`.
pub fn quaternion_rel(frame_i: &LocalFrame, frame_j: &LocalFrame) -> Result<[f64; 4]> {
    const TOL: f64 = 1e-6;
    for (label, f) in [("frame_i", frame_i), ("frame_j", frame_j)] {
        if !f.is_orthonormal(TOL) {
            return Err(Error::Invalid(format!(
                "quaternion_rel: {label} not orthonormal (err {:.3e}, det {:.6})",
                f.orthonormality_error(),
                f.det()
            )));
        }
    }
    // R[a][b] = (column a of Q_i) · (column b of Q_j)
    let mut r = [[0.0; 3]; 3];
    for (a, row) in r.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = dot(frame_i.basis[a], frame_j.basis[b]);
        }
    }
    let quad = [
        1.0 + r[0][0] + r[1][1] + r[2][2], // 4w²
        1.0 + r[0][0] - r[1][1] - r[2][2], // 4x²
        1.0 - r[0][0] + r[1][1] - r[2][2], // 4y²
        1.0 - r[0][0] - r[1][1] + r[2][2], // 4z²
    ];
    let pivot = quad
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let big = 0.5 * quad[pivot].max(0.0).sqrt();
    let inv = 0.25 / big;
    let mut q = match pivot {
        0 => [
            big,
            (r[2][1] - r[1][2]) * inv,
            (r[0][2] - r[2][0]) * inv,
            (r[1][0] - r[0][1]) * inv,
        ],
        1 => [
            (r[2][1] - r[1][2]) * inv,
            big,
            (r[0][1] + r[1][0]) * inv,
            (r[0][2] + r[2][0]) * inv,
        ],
        2 => [
            (r[0][2] - r[2][0]) * inv,
            (r[0][1] + r[1][0]) * inv,
            big,
            (r[1][2] + r[2][1]) * inv,
        ],
        _ => [
            (r[1][0] - r[0][1]) * inv,
            (r[0][2] + r[2][0]) * inv,
            (r[1][2] + r[2][1]) * inv,
            big,
        ],
    };
    let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    for v in &mut q {
        *v /= qn;
    }
    if q[0] < 0.0 {
        for v in &mut q {
            *v = -*v;
        }
    }
    Ok(q)
}

// ── Direction features ───────────────────────────────────────────────

/// Unit direction from the frame origin to each atom, expressed in the
/// frame: `Qᵀ (A − CA)/‖A − CA‖`. Atoms within `EPS_DEGENERATE` of the
/// origin produce a zero row and a `true` flag.
pub fn direction_features(frame: &LocalFrame, atoms: &[Vec3]) -> (Vec<[f64; 3]>, Vec<bool>) {
    let mut rows = Vec::with_capacity(atoms.len());
    let mut flags = Vec::with_capacity(atoms.len());
    for &a in atoms {
        let d = sub(a, frame.origin);
        let len = norm(d);
        if len < EPS_DEGENERATE {
            rows.push([0.0; 3]);
            flags.push(true);
        } else {
            rows.push(frame.to_local(scale(d, 1.0 / len)));
            flags.push(false);
        }
    }
    (rows, flags)
}

// ── Virtual atoms ────────────────────────────────────────────────────

/// Absolute virtual-atom positions `V_i^k = Q_i p_k + CA_i` for unit-norm
/// relative positions `p_k`. Reference (non-differentiable) path; the
/// differentiable counterpart is the `frame_map` kernel.
pub fn virtual_atom_positions(params: &[[f64; 3]], frames: &[LocalFrame]) -> Result<Vec<Vec<Vec3>>> {
    for (k, p) in params.iter().enumerate() {
        let n = norm(*p);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "virtual atom {k} not unit norm: ‖p‖ = {n:.8}"
            )));
        }
    }
    Ok(frames
        .iter()
        .map(|f| params.iter().map(|&p| f.place(p)).collect())
        .collect())
}

// ── Random rigid transforms (shared by invariance tests) ─────────────

/// Uniform random rotation matrix from a seeded RNG (quaternion method).
pub fn random_rotation<R: rand::Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    use std::f64::consts::PI;
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let q = [
        (1.0 - u1).sqrt() * (2.0 * PI * u2).sin(),
        (1.0 - u1).sqrt() * (2.0 * PI * u2).cos(),
        u1.sqrt() * (2.0 * PI * u3).sin(),
        u1.sqrt() * (2.0 * PI * u3).cos(),
    ];
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}
