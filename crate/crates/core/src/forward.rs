//! Magnetic dipole kernel, dense kernel blocks and the forward map from a
//! susceptibility grid to field components and modulus at measurement points.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sub, Grid3, InducingField, MeasurementSet, Vec3};
use crate::par;

/// Separation below which a measurement point and a grid node are treated as
/// coincident.
pub const COINCIDENT_TOL: f64 = 1e-12;

/// Kernel of the induced dipole field, `(3 (b.D) D / |D|^2 - b) / |D|^3` with
/// `D = r - r_tilde`. Units km^-3.
pub fn kernel_eval(r: &Vec3, r_tilde: &Vec3, b_hat: &Vec3) -> Result<Vec3> {
    let delta = sub(r, r_tilde);
    let dist = norm(&delta);
    if !(dist >= COINCIDENT_TOL) {
        return Err(Error::CoincidentPoints { distance: dist });
    }
    Ok(kernel_unchecked(&delta, b_hat))
}

#[inline]
pub(crate) fn kernel_unchecked(delta: &Vec3, b_hat: &Vec3) -> Vec3 {
    let r2 = dot(delta, delta);
    let inv_r = 1.0 / r2.sqrt();
    let inv_r3 = inv_r * inv_r * inv_r;
    let proj = 3.0 * dot(b_hat, delta) / r2;
    [
        (proj * delta[0] - b_hat[0]) * inv_r3,
        (proj * delta[1] - b_hat[1]) * inv_r3,
        (proj * delta[2] - b_hat[2]) * inv_r3,
    ]
}

/// Dense `M x layer_len` kernel matrix of one field component over one depth
/// layer, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    /// Field component, 0-based (`0 = x`, `1 = y`, `2 = z`).
    pub component: usize,
    /// Depth layer, 0-based, deepest first.
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl KernelBlock {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn check_separation(meas: &MeasurementSet, grid: &Grid3) -> Result<()> {
    // Points above the box cannot coincide with nodes; anything else gets the
    // exhaustive check.
    if meas.points.iter().all(|p| p[2] > grid.domain.max[2]) {
        return Ok(());
    }
    for p in &meas.points {
        for j in 0..grid.n_nodes() {
            kernel_eval(p, &grid.node_position(j), &[0.0, 0.0, 1.0])?;
        }
    }
    Ok(())
}

/// Assemble the block of component `component` over depth layer `layer`.
pub fn assemble_kernel_block(
    component: usize,
    layer: usize,
    meas: &MeasurementSet,
    grid: &Grid3,
    b_hat: &Vec3,
) -> Result<KernelBlock> {
    Ok(assemble_layer(layer, meas, grid, b_hat)?.swap_remove(component))
}

/// All three component blocks of one depth layer from a single kernel sweep.
pub fn assemble_layer(
    layer: usize,
    meas: &MeasurementSet,
    grid: &Grid3,
    b_hat: &Vec3,
) -> Result<Vec<KernelBlock>> {
    if layer >= grid.nz {
        return Err(Error::IndexOutOfRange {
            index: layer,
            len: grid.nz,
        });
    }
    check_separation(meas, grid)?;
    let m = meas.len();
    let cols = grid.layer_len();
    let offset = layer * cols;
    let mut data = [
        vec![0.0; m * cols],
        vec![0.0; m * cols],
        vec![0.0; m * cols],
    ];
    let rows: Vec<[Vec<f64>; 3]> = par::map_slice(&meas.points, |p| {
        let mut out = [vec![0.0; cols], vec![0.0; cols], vec![0.0; cols]];
        for j in 0..cols {
            let k = kernel_unchecked(&sub(p, &grid.node_position(offset + j)), b_hat);
            out[0][j] = k[0];
            out[1][j] = k[1];
            out[2][j] = k[2];
        }
        out
    });
    for (i, row) in rows.into_iter().enumerate() {
        for s in 0..3 {
            data[s][i * cols..(i + 1) * cols].copy_from_slice(&row[s]);
        }
    }
    Ok(data
        .into_iter()
        .enumerate()
        .map(|(component, data)| KernelBlock {
            component,
            layer,
            rows: m,
            cols,
            data,
        })
        .collect())
}

/// Field vector and modulus at one measurement point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub b: Vec3,
    pub modulus: f64,
}

impl FieldSample {
    pub fn new(b: Vec3) -> Self {
        FieldSample {
            b,
            modulus: modulus(&b),
        }
    }
}

#[inline]
pub fn modulus(b: &Vec3) -> f64 {
    (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt()
}

/// Scale turning a kernel-susceptibility sum into nT: `B0 / (4 pi) * dV`.
pub fn field_scale(field: &InducingField, grid: &Grid3) -> f64 {
    field.strength / (4.0 * PI) * grid.cell_volume()
}

/// Dense forward field by direct midpoint quadrature, kernel evaluated on the fly.
///
/// Sums run over nodes in `node_index` order (layer-major), skipping zero
/// susceptibility.
pub fn forward_field(
    kappa: &[f64],
    meas: &MeasurementSet,
    grid: &Grid3,
    field: &InducingField,
) -> Result<Vec<FieldSample>> {
    if kappa.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch {
            what: "susceptibility vector",
            expected: grid.n_nodes(),
            actual: kappa.len(),
        });
    }
    check_separation(meas, grid)?;
    let active: Vec<(Vec3, f64)> = kappa
        .iter()
        .enumerate()
        .filter(|(_, k)| **k != 0.0)
        .map(|(j, k)| (grid.node_position(j), *k))
        .collect();
    let scale = field_scale(field, grid);
    let b_hat = field.direction;
    Ok(par::map_slice(&meas.points, |p| {
        let mut acc = [0.0; 3];
        for (node, k) in &active {
            let kern = kernel_unchecked(&sub(p, node), &b_hat);
            acc[0] += kern[0] * k;
            acc[1] += kern[1] * k;
            acc[2] += kern[2] * k;
        }
        FieldSample::new([scale * acc[0], scale * acc[1], scale * acc[2]])
    }))
}

/// Forward field from pre-assembled dense blocks (all `3 * nz` of them).
pub fn forward_field_from_blocks(
    blocks: &[KernelBlock],
    kappa: &[f64],
    grid: &Grid3,
    field: &InducingField,
) -> Result<Vec<FieldSample>> {
    if kappa.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch {
            what: "susceptibility vector",
            expected: grid.n_nodes(),
            actual: kappa.len(),
        });
    }
    if blocks.len() != 3 * grid.nz {
        return Err(Error::DimensionMismatch {
            what: "kernel block count",
            expected: 3 * grid.nz,
            actual: blocks.len(),
        });
    }
    let m = blocks[0].rows;
    let cols = grid.layer_len();
    let scale = field_scale(field, grid);
    Ok(par::map_range(m, |i| {
        let mut acc = [0.0; 3];
        for blk in blocks {
            let kh = &kappa[blk.layer * cols..(blk.layer + 1) * cols];
            acc[blk.component] += blk.row(i).iter().zip(kh).map(|(a, b)| a * b).sum::<f64>();
        }
        FieldSample::new([scale * acc[0], scale * acc[1], scale * acc[2]])
    }))
}

/// Modulus at every measurement point for a susceptibility model.
pub fn forward_modulus(
    kappa: &[f64],
    meas: &MeasurementSet,
    grid: &Grid3,
    field: &InducingField,
) -> Result<Vec<f64>> {
    Ok(forward_field(kappa, meas, grid, field)?
        .into_iter()
        .map(|s| s.modulus)
        .collect())
}

/// Multiplicative Gaussian perturbation of each component:
/// `B_s* = B_s (1 + eta * N(0, 1))`. Draws are taken point by point, `x, y, z`.
pub fn perturb_components(samples: &[FieldSample], eta: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let mut b = s.b;
            for c in b.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *c *= 1.0 + eta * n;
            }
            b
        })
        .collect()
}

/// Noisy modulus data from clean field samples. `eta == 0` returns the clean
/// modulus bit for bit.
pub fn add_component_noise(samples: &[FieldSample], eta: f64, seed: u64) -> Vec<f64> {
    if eta == 0.0 {
        return samples.iter().map(|s| s.modulus).collect();
    }
    perturb_components(samples, eta, seed)
        .iter()
        .map(modulus)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{direction_from_angles, DomainBox};
    use proptest::prelude::*;

    /// Hessian of 1/|r - r~| contracted with `b`, by central differences.
    fn fd_double_gradient(r: &Vec3, rt: &Vec3, b: &Vec3, step: f64) -> Vec3 {
        let f = |p: &Vec3| 1.0 / norm(&sub(p, rt));
        let mut out = [0.0; 3];
        for s in 0..3 {
            for t in 0..3 {
                let mut acc = 0.0;
                for (ss, st, sign) in [
                    (1.0, 1.0, 1.0),
                    (1.0, -1.0, -1.0),
                    (-1.0, 1.0, -1.0),
                    (-1.0, -1.0, 1.0),
                ] {
                    let mut p = *r;
                    p[s] += ss * step;
                    p[t] += st * step;
                    acc += sign * f(&p);
                }
                out[s] += b[t] * acc / (4.0 * step * step);
            }
        }
        out
    }

    #[test]
    fn kernel_closed_form_examples() {
        let k = kernel_eval(&[0.0, 0.0, 1.0], &[0.0; 3], &[0.0, 0.0, -1.0]).unwrap();
        assert_eq!(k, [0.0, 0.0, -2.0]);
        let k = kernel_eval(&[1.0, 0.0, 0.0], &[0.0; 3], &[0.0, 0.0, -1.0]).unwrap();
        assert_eq!(k, [0.0, 0.0, 1.0]);
        assert!(matches!(
            kernel_eval(&[0.3; 3], &[0.3; 3], &[0.0, 0.0, 1.0]),
            Err(Error::CoincidentPoints { .. })
        ));
    }

    #[test]
    fn kernel_matches_double_gradient() {
        let b = direction_from_angles(75.0, 25.0);
        let r = [0.31, 0.72, 0.1];
        let rt = [0.5, 0.45, -0.2];
        let k = kernel_eval(&r, &rt, &b).unwrap();
        let fd = fd_double_gradient(&r, &rt, &b, 1e-4 * norm(&sub(&r, &rt)));
        let scale = norm(&k);
        for s in 0..3 {
            assert!((k[s] - fd[s]).abs() <= 1e-6 * scale, "{k:?} vs {fd:?}");
        }
    }

    fn desk() -> (Grid3, MeasurementSet, InducingField) {
        let d = DomainBox::new([0.0, 0.0, -0.5], [1.0, 1.0, 0.0]).unwrap();
        let g = Grid3::new(d, 5, 4, 3).unwrap();
        let m = crate::geometry::sample_measurement_points([0.0, 1.0], [0.0, 1.0], 0.1, 7, &d, 3)
            .unwrap();
        (g, m, InducingField::new(5.95e4, 75.0, 25.0))
    }

    #[test]
    fn block_rows_match_pointwise_kernel() {
        let (g, m, f) = desk();
        for h in 0..g.nz {
            let blocks = assemble_layer(h, &m, &g, &f.direction).unwrap();
            for blk in &blocks {
                for i in 0..m.len() {
                    for j in 0..g.layer_len() {
                        let k = kernel_eval(
                            &m.points[i],
                            &g.node_position(h * g.layer_len() + j),
                            &f.direction,
                        )
                        .unwrap();
                        assert_eq!(blk.get(i, j), k[blk.component]);
                    }
                }
            }
        }
    }

    #[test]
    fn one_by_one_block() {
        let d = DomainBox::new([0.0, 0.0, -0.5], [1.0, 1.0, 0.0]).unwrap();
        let g = Grid3::new(d, 2, 2, 2).unwrap();
        let m = MeasurementSet::new(vec![[0.2, 0.3, 0.1]], None).unwrap();
        let b = [0.0, 0.0, -1.0];
        let blk = assemble_kernel_block(2, 1, &m, &g, &b).unwrap();
        assert_eq!(blk.rows, 1);
        let k = kernel_eval(&m.points[0], &g.node_position(4), &b).unwrap();
        assert_eq!(blk.get(0, 0), k[2]);
    }

    #[test]
    fn deep_layer_is_weaker() {
        let d = DomainBox::new([0.0, 0.0, -0.5], [1.0, 1.0, 0.0]).unwrap();
        let g = Grid3::new(d, 6, 6, 2).unwrap();
        let m = crate::geometry::sample_measurement_points([0.0, 1.0], [0.0, 1.0], 0.1, 20, &d, 9)
            .unwrap();
        let b = direction_from_angles(75.0, 25.0);
        for s in 0..3 {
            let deep = assemble_kernel_block(s, 0, &m, &g, &b).unwrap();
            let shallow = assemble_kernel_block(s, 1, &m, &g, &b).unwrap();
            assert!(deep.max_abs() < shallow.max_abs());
        }
    }

    #[test]
    fn forward_zero_and_single_node() {
        let (g, m, f) = desk();
        let zero = forward_modulus(&vec![0.0; g.n_nodes()], &m, &g, &f).unwrap();
        assert!(zero.iter().all(|d| *d == 0.0));

        let one = MeasurementSet::new(vec![m.points[0]], None).unwrap();
        let j = 17;
        let mut kappa = vec![0.0; g.n_nodes()];
        kappa[j] = 0.05;
        let d = forward_modulus(&kappa, &one, &g, &f).unwrap()[0];
        let k = kernel_eval(&one.points[0], &g.node_position(j), &f.direction).unwrap();
        let want = (f.strength / (4.0 * PI) * g.cell_volume() * 0.05 * norm(&k)).abs();
        assert!((d - want).abs() <= 1e-14 * want);
    }

    #[test]
    fn blocks_and_on_the_fly_agree() {
        let (g, m, f) = desk();
        let blocks: Vec<KernelBlock> = (0..g.nz)
            .flat_map(|h| assemble_layer(h, &m, &g, &f.direction).unwrap())
            .collect();
        let kappa: Vec<f64> = (0..g.n_nodes()).map(|j| 0.01 * (j % 3) as f64).collect();
        let a = forward_field(&kappa, &m, &g, &f).unwrap();
        let b = forward_field_from_blocks(&blocks, &kappa, &g, &f).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.modulus - y.modulus).abs() <= 1e-12 * x.modulus);
        }
        assert!(forward_field(&kappa[1..], &m, &g, &f).is_err());
    }

    #[test]
    fn modulus_is_pythagorean() {
        assert_eq!(FieldSample::new([3.0, 4.0, 0.0]).modulus, 5.0);
    }

    #[test]
    fn noise_contract() {
        let samples: Vec<FieldSample> = (1..50)
            .map(|i| FieldSample::new([i as f64, -2.0, 0.5]))
            .collect();
        let clean: Vec<f64> = samples.iter().map(|s| s.modulus).collect();
        assert_eq!(add_component_noise(&samples, 0.0, 4), clean);
        assert_eq!(
            add_component_noise(&samples, 0.05, 4),
            add_component_noise(&samples, 0.05, 4)
        );
        assert_ne!(
            add_component_noise(&samples, 0.05, 4),
            add_component_noise(&samples, 0.05, 5)
        );
    }

    proptest! {
        #[test]
        fn kernel_homogeneity(
            r in prop::array::uniform3(-1.0f64..1.0),
            rt in prop::array::uniform3(-1.0f64..1.0),
            c in 0.1f64..10.0,
        ) {
            prop_assume!(norm(&sub(&r, &rt)) > 1e-3);
            let b = direction_from_angles(60.0, 10.0);
            let k = kernel_eval(&r, &rt, &b).unwrap();
            let ks = kernel_eval(&[c * r[0], c * r[1], c * r[2]], &[c * rt[0], c * rt[1], c * rt[2]], &b).unwrap();
            for s in 0..3 {
                prop_assert!((ks[s] * c.powi(3) - k[s]).abs() <= 1e-12 * norm(&k));
            }
        }

        #[test]
        fn modulus_rotation_invariant(b in prop::array::uniform3(-100.0f64..100.0), angle in 0.0f64..6.3) {
            let (s, c) = angle.sin_cos();
            let rb = [c * b[0] - s * b[1], s * b[0] + c * b[1], b[2]];
            prop_assert!((modulus(&rb) - modulus(&b)).abs() <= 1e-12 * (1.0 + modulus(&b)));
        }

        #[test]
        fn forward_is_linear(seed in 0u64..1000) {
            let (g, m, f) = desk();
            let n = g.n_nodes();
            let ka: Vec<f64> = (0..n).map(|j| if (j as u64 + seed).is_multiple_of(4) { 0.05 } else { 0.0 }).collect();
            let kb: Vec<f64> = (0..n).map(|j| if (j as u64 + seed) % 4 == 1 { 0.05 } else { 0.0 }).collect();
            let kab: Vec<f64> = ka.iter().zip(&kb).map(|(a, b)| a + b).collect();
            let a = forward_field(&ka, &m, &g, &f).unwrap();
            let b = forward_field(&kb, &m, &g, &f).unwrap();
            let ab = forward_field(&kab, &m, &g, &f).unwrap();
            for i in 0..m.len() {
                for s in 0..3 {
                    let sum = a[i].b[s] + b[i].b[s];
                    prop_assert!((ab[i].b[s] - sum).abs() <= 1e-12 * ab[i].modulus.max(1e-300));
                }
            }
        }
    }
}
