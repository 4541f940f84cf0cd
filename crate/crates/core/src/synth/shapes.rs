//! Parametric surface samplers for the synthetic shape families.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_FAMILIES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    Capsule,
    LBracket,
    Plate,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; NUM_FAMILIES] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
        ShapeFamily::Capsule,
        ShapeFamily::LBracket,
        ShapeFamily::Plate,
    ];

    pub fn from_class(class_id: usize) -> Result<Self> {
        Self::ALL
            .get(class_id)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown shape class {class_id} (have {NUM_FAMILIES})")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Capsule => "capsule",
            ShapeFamily::LBracket => "l_bracket",
            ShapeFamily::Plate => "plate",
        }
    }
}

/// Per-shape randomisation applied on top of the canonical surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub points: usize,
    /// Standard deviation of Gaussian jitter added to every coordinate.
    pub jitter: f64,
    /// Each axis is scaled by a factor drawn from `1 ± scale_jitter`.
    pub scale_jitter: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams { points: 1024, jitter: 0.01, scale_jitter: 0.3 }
    }
}

type P3 = [f64; 3];

fn unit_vector(rng: &mut ChaCha8Rng) -> P3 {
    loop {
        let v: P3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniform point on the surface of an axis-aligned box.
fn box_surface(rng: &mut ChaCha8Rng, lo: P3, hi: P3) -> P3 {
    let e = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    // face pairs normal to x, y, z
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut axis = 2;
    for (a, &area) in areas.iter().enumerate() {
        if pick < area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut p = [0.0; 3];
    for d in 0..3 {
        p[d] = lo[d] + rng.gen::<f64>() * e[d];
    }
    p[axis] = if rng.gen::<bool>() { hi[axis] } else { lo[axis] };
    p
}

fn box_area(lo: P3, hi: P3) -> f64 {
    let e = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
}

fn disk(rng: &mut ChaCha8Rng, radius: f64, z: f64) -> P3 {
    let r = radius * rng.gen::<f64>().sqrt();
    let t = rng.gen::<f64>() * 2.0 * PI;
    [r * t.cos(), r * t.sin(), z]
}

fn canonical_point(family: ShapeFamily, rng: &mut ChaCha8Rng) -> P3 {
    match family {
        ShapeFamily::Sphere => unit_vector(rng),
        ShapeFamily::Box => box_surface(rng, [-0.8, -0.6, -0.5], [0.8, 0.6, 0.5]),
        ShapeFamily::Plate => box_surface(rng, [-0.9, -0.7, -0.05], [0.9, 0.7, 0.05]),
        ShapeFamily::Cylinder => {
            let (r, h) = (0.6, 0.8);
            let side = 2.0 * PI * r * 2.0 * h;
            let cap = PI * r * r;
            let u = rng.gen::<f64>() * (side + 2.0 * cap);
            if u < side {
                let t = rng.gen::<f64>() * 2.0 * PI;
                [r * t.cos(), r * t.sin(), rng.gen_range(-h..h)]
            } else if u < side + cap {
                disk(rng, r, h)
            } else {
                disk(rng, r, -h)
            }
        }
        ShapeFamily::Cone => {
            let (r, z0, z1): (f64, f64, f64) = (0.7, -0.6, 0.8);
            let height = z1 - z0;
            let slant = (r * r + height * height).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            if rng.gen::<f64>() * (lateral + base) < lateral {
                // distance from apex ∝ sqrt(u) gives uniform area density
                let s = rng.gen::<f64>().sqrt();
                let t = rng.gen::<f64>() * 2.0 * PI;
                [r * s * t.cos(), r * s * t.sin(), z1 - s * height]
            } else {
                disk(rng, r, z0)
            }
        }
        ShapeFamily::Torus => {
            let (big, small) = (0.7, 0.25);
            let v = loop {
                let v = rng.gen::<f64>() * 2.0 * PI;
                if rng.gen::<f64>() * (big + small) < big + small * v.cos() {
                    break v;
                }
            };
            let u = rng.gen::<f64>() * 2.0 * PI;
            let ring = big + small * v.cos();
            [ring * u.cos(), ring * u.sin(), small * v.sin()]
        }
        ShapeFamily::Capsule => {
            let (r, h) = (0.45, 0.5);
            let side = 2.0 * PI * r * 2.0 * h;
            let sphere = 4.0 * PI * r * r;
            if rng.gen::<f64>() * (side + sphere) < side {
                let t = rng.gen::<f64>() * 2.0 * PI;
                [r * t.cos(), r * t.sin(), rng.gen_range(-h..h)]
            } else {
                let d = unit_vector(rng);
                let zc = if d[2] >= 0.0 { h } else { -h };
                [r * d[0], r * d[1], zc + r * d[2]]
            }
        }
        ShapeFamily::LBracket => {
            let base = ([-0.8, -0.4, -0.6], [0.8, 0.4, -0.3]);
            let upright = ([-0.8, -0.4, -0.3], [-0.5, 0.4, 0.8]);
            let (a0, a1) = (box_area(base.0, base.1), box_area(upright.0, upright.1));
            if rng.gen::<f64>() * (a0 + a1) < a0 {
                box_surface(rng, base.0, base.1)
            } else {
                box_surface(rng, upright.0, upright.1)
            }
        }
    }
}

/// Surface-samples one shape of family `class_id`, applies random
/// anisotropic scaling, a random rotation about the vertical (z) axis and
/// Gaussian jitter, then centres it and scales it to unit max norm.
///
/// Sphere points are drawn in antipodal pairs, so with even `N` and no
/// scaling or jitter every point ends up at exactly the same radius.
pub fn generate_shape(class_id: usize, seed: u64, params: &ShapeParams) -> Result<Tensor> {
    let family = ShapeFamily::from_class(class_id)?;
    if params.points < 64 {
        return Err(Error::Input(format!("need at least 64 points, got {}", params.points)));
    }
    if !(0.0..1.0).contains(&params.scale_jitter) || params.jitter < 0.0 {
        return Err(Error::Input("scale_jitter must be in [0, 1) and jitter non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.points;

    let mut pts: Vec<P3> = Vec::with_capacity(n);
    if family == ShapeFamily::Sphere {
        while pts.len() + 1 < n {
            let d = unit_vector(&mut rng);
            pts.push(d);
            pts.push([-d[0], -d[1], -d[2]]);
        }
        if pts.len() < n {
            pts.push(unit_vector(&mut rng));
        }
    } else {
        for _ in 0..n {
            pts.push(canonical_point(family, &mut rng));
        }
    }

    let sj = params.scale_jitter;
    let scale: P3 = if sj > 0.0 {
        [rng.gen_range(1.0 - sj..1.0 + sj), rng.gen_range(1.0 - sj..1.0 + sj), rng.gen_range(1.0 - sj..1.0 + sj)]
    } else {
        [1.0; 3]
    };
    let theta = rng.gen::<f64>() * 2.0 * PI;
    let (s, c) = theta.sin_cos();
    let normal = rand_distr::Normal::new(0.0, params.jitter.max(f64::MIN_POSITIVE)).unwrap();
    for p in &mut pts {
        let q = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
        *p = [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]];
        if params.jitter > 0.0 {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(normalize_cloud(pts))
}

/// Centres a cloud on its centroid and scales it to max norm 1.
pub(crate) fn normalize_cloud(mut pts: Vec<P3>) -> Tensor {
    let n = pts.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &pts {
        for d in 0..3 {
            centroid[d] += p[d];
        }
    }
    for c in &mut centroid {
        *c /= n;
    }
    let mut max_norm: f64 = 0.0;
    for p in &mut pts {
        for d in 0..3 {
            p[d] -= centroid[d];
        }
        max_norm = max_norm.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if max_norm > 0.0 {
        for p in &mut pts {
            for v in p.iter_mut() {
                *v /= max_norm;
            }
        }
    }
    let rows = pts.len();
    Tensor::new(vec![rows, 3], pts.into_iter().flatten().collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norms(t: &Tensor) -> Vec<f64> {
        (0..t.shape()[0]).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    #[test]
    fn clean_sphere_has_constant_radius() {
        let p = ShapeParams { points: 256, jitter: 0.0, scale_jitter: 0.0 };
        let t = generate_shape(0, 17, &p).unwrap();
        for r in norms(&t) {
            assert!((r - 1.0).abs() < 1e-9, "{r}");
        }
    }

    #[test]
    fn every_family_is_centred_and_bounded() {
        let p = ShapeParams::default();
        for c in 0..NUM_FAMILIES {
            let t = generate_shape(c, 1000 + c as u64, &p).unwrap();
            assert_eq!(t.shape(), &[1024, 3]);
            for d in 0..3 {
                let mean: f64 = (0..1024).map(|i| t.row(i)[d]).sum::<f64>() / 1024.0;
                assert!(mean.abs() < 1e-9, "class {c} axis {d}: {mean}");
            }
            assert!(t.data().iter().all(|v| v.abs() <= 1.0));
            let max = norms(&t).into_iter().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = ShapeParams::default();
        let a = generate_shape(3, 42, &p).unwrap();
        let b = generate_shape(3, 42, &p).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, generate_shape(3, 43, &p).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ShapeParams::default();
        assert!(matches!(generate_shape(8, 0, &p), Err(Error::Input(_))));
        let small = ShapeParams { points: 32, ..p };
        assert!(generate_shape(0, 0, &small).is_err());
    }
}
