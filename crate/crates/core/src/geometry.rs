//! Computational box, grids, inducing field, scene primitives and measurement
//! point sets. Lengths are in km throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::par;

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Slack used when testing whether a node lies on a primitive boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Axis-aligned box `[x_min, x_max] x [y_min, y_max] x [z_min, z_max]` lying at
/// or below the surface `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl DomainBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        for axis in 0..3 {
            if !(min[axis].is_finite() && max[axis].is_finite()) {
                return Err(Error::InvalidInput("domain bounds must be finite".into()));
            }
            if min[axis] >= max[axis] {
                return Err(Error::InvalidInput(format!(
                    "domain axis {axis}: min {} must be < max {}",
                    min[axis], max[axis]
                )));
            }
        }
        if max[2] > 0.0 {
            return Err(Error::InvalidInput(format!(
                "domain z_max = {} must be <= 0",
                max[2]
            )));
        }
        Ok(DomainBox { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - BOUNDARY_TOL && p[a] <= self.max[a] + BOUNDARY_TOL)
    }

    pub fn extent(&self) -> Vec3 {
        sub(&self.max, &self.min)
    }
}

/// Uniform node grid over a [`DomainBox`], endpoints included on every axis.
///
/// Nodes are numbered `ix + nx * iy + nx * ny * iz`, so the global ordering is
/// by ascending depth layer (deepest first), then `y`, then `x` fastest. Layer
/// `h` (0-based here) holds `nx * ny` nodes at `z = z_min + h * dz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    pub domain: DomainBox,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Grid3 {
    pub fn new(domain: DomainBox, nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::InvalidInput(format!(
                "grid counts must be >= 2, got {nx}x{ny}x{nz}"
            )));
        }
        Ok(Grid3 { domain, nx, ny, nz })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn spacing(&self) -> Vec3 {
        let e = self.domain.extent();
        [
            e[0] / (self.nx - 1) as f64,
            e[1] / (self.ny - 1) as f64,
            e[2] / (self.nz - 1) as f64,
        ]
    }

    pub fn min_spacing(&self) -> f64 {
        let h = self.spacing();
        h[0].min(h[1]).min(h[2])
    }

    /// Quadrature weight of every node (midpoint rule).
    pub fn cell_volume(&self) -> f64 {
        let h = self.spacing();
        h[0] * h[1] * h[2]
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Nodes per depth layer.
    pub fn layer_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.nx * (iy + self.ny * iz)
    }

    #[inline]
    pub fn unflatten(&self, j: usize) -> (usize, usize, usize) {
        let ix = j % self.nx;
        let iy = (j / self.nx) % self.ny;
        let iz = j / self.layer_len();
        (ix, iy, iz)
    }

    #[inline]
    pub fn node_position(&self, j: usize) -> Vec3 {
        let (ix, iy, iz) = self.unflatten(j);
        self.position(ix, iy, iz)
    }

    #[inline]
    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let h = self.spacing();
        let o = self.domain.min;
        [
            o[0] + ix as f64 * h[0],
            o[1] + iy as f64 * h[1],
            o[2] + iz as f64 * h[2],
        ]
    }

    pub fn layer_z(&self, layer: usize) -> f64 {
        self.domain.min[2] + layer as f64 * self.spacing()[2]
    }

    /// Index of the node closest to `p` (clamped to the grid).
    pub fn nearest_node(&self, p: &Vec3) -> usize {
        let h = self.spacing();
        let dims = self.dims();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let t = ((p[a] - self.domain.min[a]) / h[a]).round();
            idx[a] = t.clamp(0.0, (dims[a] - 1) as f64) as usize;
        }
        self.node_index(idx[0], idx[1], idx[2])
    }
}

/// Unit direction `(cos I sin D, cos I cos D, -sin I)` with `x` east, `y` north
/// and `z` up.
pub fn direction_from_angles(inclination_deg: f64, declination_deg: f64) -> Vec3 {
    let (si, ci) = inclination_deg.to_radians().sin_cos();
    let (sd, cd) = declination_deg.to_radians().sin_cos();
    [ci * sd, ci * cd, -si]
}

/// Inducing (geomagnetic) field: strength in nT plus direction angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InducingField {
    pub strength: f64,
    pub inclination_deg: f64,
    pub declination_deg: f64,
    pub direction: Vec3,
}

impl InducingField {
    pub fn new(strength: f64, inclination_deg: f64, declination_deg: f64) -> Self {
        InducingField {
            strength,
            inclination_deg,
            declination_deg,
            direction: direction_from_angles(inclination_deg, declination_deg),
        }
    }
}

/// One solid of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Cuboid {
        center: Vec3,
        size: Vec3,
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Sheared box: the rectangle `x_range x y_range` sits at `z_range[0]` and is
    /// translated laterally by `top_offset * t` at height
    /// `z_range[0] + t * (z_range[1] - z_range[0])`.
    Prism {
        x_range: [f64; 2],
        y_range: [f64; 2],
        z_range: [f64; 2],
        #[serde(default)]
        top_offset: [f64; 2],
    },
}

impl Primitive {
    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Primitive::Cuboid { center, size } => {
                (0..3).all(|a| (p[a] - center[a]).abs() <= 0.5 * size[a] + BOUNDARY_TOL)
            }
            Primitive::Sphere { center, radius } => norm(&sub(p, center)) <= radius + BOUNDARY_TOL,
            Primitive::Prism {
                x_range,
                y_range,
                z_range,
                top_offset,
            } => {
                if p[2] < z_range[0] - BOUNDARY_TOL || p[2] > z_range[1] + BOUNDARY_TOL {
                    return false;
                }
                let t = ((p[2] - z_range[0]) / (z_range[1] - z_range[0])).clamp(0.0, 1.0);
                let x = p[0] - t * top_offset[0];
                let y = p[1] - t * top_offset[1];
                x >= x_range[0] - BOUNDARY_TOL
                    && x <= x_range[1] + BOUNDARY_TOL
                    && y >= y_range[0] - BOUNDARY_TOL
                    && y <= y_range[1] + BOUNDARY_TOL
            }
        }
    }

    /// Corners of the bounding hull (for domain containment checks).
    fn hull(&self) -> Vec<Vec3> {
        match self {
            Primitive::Cuboid { center, size } => {
                let lo = [
                    center[0] - 0.5 * size[0],
                    center[1] - 0.5 * size[1],
                    center[2] - 0.5 * size[2],
                ];
                let hi = [
                    center[0] + 0.5 * size[0],
                    center[1] + 0.5 * size[1],
                    center[2] + 0.5 * size[2],
                ];
                vec![lo, hi]
            }
            Primitive::Sphere { center, radius } => vec![
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ],
            Primitive::Prism {
                x_range,
                y_range,
                z_range,
                top_offset,
            } => {
                let mut corners = Vec::with_capacity(8);
                for (zi, off) in [(z_range[0], [0.0, 0.0]), (z_range[1], *top_offset)] {
                    for x in x_range {
                        for y in y_range {
                            corners.push([x + off[0], y + off[1], zi]);
                        }
                    }
                }
                corners
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Cuboid { size, .. } => size.iter().all(|s| *s > 0.0),
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Prism {
                x_range,
                y_range,
                z_range,
                ..
            } => x_range[0] < x_range[1] && y_range[0] < y_range[1] && z_range[0] < z_range[1],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "degenerate primitive {self:?}"
            )))
        }
    }

    /// Exact volume in km^3.
    pub fn volume(&self) -> f64 {
        match self {
            Primitive::Cuboid { size, .. } => size[0] * size[1] * size[2],
            Primitive::Sphere { radius, .. } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
            Primitive::Prism {
                x_range,
                y_range,
                z_range,
                ..
            } => (x_range[1] - x_range[0]) * (y_range[1] - y_range[0]) * (z_range[1] - z_range[0]),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

/// Occupancy (0 or 1) of every grid node for the union of the scene primitives.
/// Points on a primitive boundary count as inside.
pub fn rasterize_scene(scene: &SceneSpec, grid: &Grid3) -> Result<Vec<f64>> {
    for (k, p) in scene.primitives.iter().enumerate() {
        p.validate()?;
        if !p.hull().iter().all(|c| grid.domain.contains(c)) {
            return Err(Error::InvalidInput(format!(
                "scene primitive {k} extends outside the domain"
            )));
        }
    }
    let mut occ = vec![0.0; grid.n_nodes()];
    par::fill(&mut occ, |j| {
        let r = grid.node_position(j);
        if scene.primitives.iter().any(|p| p.contains(&r)) {
            1.0
        } else {
            0.0
        }
    });
    Ok(occ)
}

/// Piecewise-constant susceptibility `kappa_j = kappa0 * occupancy_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SusceptibilityModel {
    pub kappa0: f64,
    pub occupancy: Vec<f64>,
}

impl SusceptibilityModel {
    pub fn new(kappa0: f64, occupancy: Vec<f64>) -> Self {
        SusceptibilityModel { kappa0, occupancy }
    }

    pub fn kappa(&self) -> Vec<f64> {
        self.occupancy.iter().map(|o| self.kappa0 * o).collect()
    }
}

/// Scattered measurement points above the source region, with optional
/// observed modulus values (nT).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub points: Vec<Vec3>,
    pub observed: Option<Vec<f64>>,
}

impl MeasurementSet {
    pub fn new(points: Vec<Vec3>, observed: Option<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("measurement set is empty".into()));
        }
        if let Some(d) = &observed {
            if d.len() != points.len() {
                return Err(Error::DimensionMismatch {
                    what: "observed modulus",
                    expected: points.len(),
                    actual: d.len(),
                });
            }
        }
        Ok(MeasurementSet { points, observed })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point must lie strictly above the top of `domain`.
    pub fn check_above(&self, domain: &DomainBox) -> Result<()> {
        match self.points.iter().position(|p| p[2] <= domain.max[2]) {
            Some(i) => Err(Error::InvalidInput(format!(
                "measurement point {i} at z = {} is not above the domain top z = {}",
                self.points[i][2], domain.max[2]
            ))),
            None => Ok(()),
        }
    }

    pub fn observed(&self) -> Result<&[f64]> {
        self.observed
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("measurement set has no observed data".into()))
    }
}

/// `count` points i.i.d. uniform over `x_range x y_range` at height `z_plane`.
pub fn sample_measurement_points(
    x_range: [f64; 2],
    y_range: [f64; 2],
    z_plane: f64,
    count: usize,
    domain: &DomainBox,
    seed: u64,
) -> Result<MeasurementSet> {
    if count == 0 {
        return Err(Error::InvalidInput("measurement count must be >= 1".into()));
    }
    if z_plane <= domain.max[2] {
        return Err(Error::InvalidInput(format!(
            "measurement plane z = {z_plane} must lie above the domain top z = {}",
            domain.max[2]
        )));
    }
    if x_range[0] > x_range[1] || y_range[0] > y_range[1] {
        return Err(Error::InvalidInput(
            "measurement rectangle is inverted".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..count)
        .map(|_| {
            let x = x_range[0] + (x_range[1] - x_range[0]) * rng.random::<f64>();
            let y = y_range[0] + (y_range[1] - y_range[0]) * rng.random::<f64>();
            [x, y, z_plane]
        })
        .collect();
    MeasurementSet::new(points, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_box() -> DomainBox {
        DomainBox::new([0.0, 0.0, -0.5], [1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn direction_examples() {
        let d = direction_from_angles(90.0, 0.0);
        assert!(d[0].abs() < 1e-15 && d[1].abs() < 1e-15 && (d[2] + 1.0).abs() < 1e-15);
        let d = direction_from_angles(0.0, 0.0);
        assert_eq!(d, [0.0, 1.0, -0.0]);
        let d = direction_from_angles(75.0, 25.0);
        let want = [0.109381, 0.234570, -0.965926];
        for a in 0..3 {
            assert!((d[a] - want[a]).abs() < 1e-6, "{d:?}");
        }
    }

    #[test]
    fn full_scale_grid_spacing() {
        let g = Grid3::new(unit_box(), 41, 41, 21).unwrap();
        for h in g.spacing() {
            assert!((h - 0.025).abs() < 1e-15);
        }
        assert_eq!(g.n_nodes(), 41 * 41 * 21);
        assert!((g.layer_z(0) + 0.5).abs() < 1e-15);
        assert!(g.layer_z(20).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_domain() {
        assert!(DomainBox::new([0.0, 0.0, -0.5], [1.0, 1.0, 0.1]).is_err());
        assert!(DomainBox::new([1.0, 0.0, -0.5], [1.0, 1.0, 0.0]).is_err());
        assert!(Grid3::new(unit_box(), 1, 3, 3).is_err());
    }

    #[test]
    fn layers_partition_nodes() {
        let g = Grid3::new(unit_box(), 4, 3, 5).unwrap();
        let m = g.layer_len();
        for h in 0..g.nz {
            let zs: Vec<f64> = (h * m..(h + 1) * m)
                .map(|j| g.node_position(j)[2])
                .collect();
            assert!(zs.iter().all(|z| *z == zs[0]));
            if h > 0 {
                assert!(g.node_position(h * m)[2] > g.node_position(h * m - 1)[2]);
            }
        }
    }

    #[test]
    fn rasterize_examples() {
        let g = Grid3::new(unit_box(), 41, 41, 21).unwrap();
        let cube = Primitive::Cuboid {
            center: [0.75, 0.2, -0.3],
            size: [0.15; 3],
        };
        let occ = rasterize_scene(
            &SceneSpec {
                primitives: vec![cube],
            },
            &g,
        )
        .unwrap();
        assert_eq!(occ[g.nearest_node(&[0.75, 0.2, -0.3])], 1.0);
        // boundary nodes at x = 0.675 and 0.825 count as inside: 7 nodes per axis
        assert_eq!(occ.iter().sum::<f64>(), 343.0);

        let empty = rasterize_scene(&SceneSpec::default(), &g).unwrap();
        assert!(empty.iter().all(|o| *o == 0.0));

        let sphere = Primitive::Sphere {
            center: [0.8, 0.75, -0.2],
            radius: 0.1,
        };
        let occ = rasterize_scene(
            &SceneSpec {
                primitives: vec![sphere],
            },
            &g,
        )
        .unwrap();
        assert_eq!(occ[g.nearest_node(&[0.0, 0.0, -0.05])], 0.0);
        assert_eq!(occ[g.nearest_node(&[0.8, 0.75, -0.2])], 1.0);
    }

    #[test]
    fn rasterize_rejects_outside() {
        let g = Grid3::new(unit_box(), 11, 11, 6).unwrap();
        let s = Primitive::Sphere {
            center: [0.5, 0.5, -0.05],
            radius: 0.1,
        };
        assert!(rasterize_scene(
            &SceneSpec {
                primitives: vec![s]
            },
            &g
        )
        .is_err());
    }

    #[test]
    fn prism_shears_with_height() {
        let p = Primitive::Prism {
            x_range: [0.1, 0.2],
            y_range: [0.4, 0.6],
            z_range: [-0.4, -0.1],
            top_offset: [0.1, 0.0],
        };
        assert!(p.contains(&[0.15, 0.5, -0.4]));
        assert!(!p.contains(&[0.15, 0.5, -0.1]));
        assert!(p.contains(&[0.25, 0.5, -0.1]));
        assert!(!p.contains(&[0.15, 0.5, -0.05]));
    }

    #[test]
    fn measurement_sampling() {
        let d = unit_box();
        let m = sample_measurement_points([0.0, 1.0], [0.0, 1.0], 0.1, 10_000, &d, 7).unwrap();
        assert_eq!(m.len(), 10_000);
        assert!(m.points.iter().all(|p| p[2] == 0.1));
        assert!(m
            .points
            .iter()
            .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
        let again = sample_measurement_points([0.0, 1.0], [0.0, 1.0], 0.1, 10_000, &d, 7).unwrap();
        assert_eq!(m, again);

        let one = sample_measurement_points([0.2, 0.3], [0.4, 0.5], 0.1, 1, &d, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.points[0][0] >= 0.2 && one.points[0][0] <= 0.3);

        assert!(sample_measurement_points([0.0, 1.0], [0.0, 1.0], 0.0, 5, &d, 1).is_err());
        assert!(sample_measurement_points([0.0, 1.0], [0.0, 1.0], 0.1, 0, &d, 1).is_err());
    }

    proptest! {
        #[test]
        fn node_index_roundtrip(nx in 2usize..9, ny in 2usize..9, nz in 2usize..9, seed in 0usize..10_000) {
            let g = Grid3::new(unit_box(), nx, ny, nz).unwrap();
            let j = seed % g.n_nodes();
            let (ix, iy, iz) = g.unflatten(j);
            prop_assert_eq!(g.node_index(ix, iy, iz), j);
        }

        #[test]
        fn direction_is_unit(inc in -180.0f64..180.0, dec in -360.0f64..360.0) {
            let d = direction_from_angles(inc, dec);
            prop_assert!((norm(&d) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rasterize_is_monotone(cx in 0.2f64..0.8, cy in 0.2f64..0.8, r in 0.05f64..0.15) {
            let g = Grid3::new(unit_box(), 11, 11, 6).unwrap();
            let base = SceneSpec { primitives: vec![Primitive::Cuboid { center: [0.5, 0.5, -0.25], size: [0.3, 0.3, 0.2] }] };
            let mut more = base.clone();
            more.primitives.push(Primitive::Sphere { center: [cx, cy, -0.25], radius: r });
            let a = rasterize_scene(&base, &g).unwrap();
            let b = rasterize_scene(&more, &g).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
        }
    }
}
