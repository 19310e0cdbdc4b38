//! TOML run configuration shared by every CLI command.
//!
//! ```toml
//! [grid]
//! min = [0.0, 0.0, -0.5]
//! max = [1.0, 1.0, 0.0]
//! counts = [21, 21, 11]
//!
//! [[scene]]
//! kind = "sphere"
//! center = [0.5, 0.5, -0.25]
//! radius = 0.15
//! ```
//!
//! Everything except `[grid]` is optional; see [`RunConfig`] for the defaults.
//! Unknown keys are rejected and every error names the offending key path.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{DomainBox, Grid3, InducingField, Primitive, SceneSpec, Vec3, BOUNDARY_TOL};
use crate::levelset::{ellipsoid, sphere, LevelSetField};
use crate::optimizer::SgdConfig;

pub const DEFAULT_FIELD_STRENGTH: f64 = 5.95e4;
pub const DEFAULT_INCLINATION: f64 = 75.0;
pub const DEFAULT_DECLINATION: f64 = 25.0;
pub const DEFAULT_KAPPA0: f64 = 0.05;
pub const DEFAULT_ETA: f64 = 0.05;
pub const DEFAULT_EPSILON_SVD: f64 = 1e-5;
pub const DEFAULT_BATCH_SIZE: usize = 200;
pub const DEFAULT_MEASUREMENT_COUNT: usize = 10_000;
pub const DEFAULT_MEASUREMENT_HEIGHT: f64 = 0.1;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_ALPHA: f64 = 1e-3;
pub const DEFAULT_CFL: f64 = 0.5;
pub const DEFAULT_REINIT_ITERS: usize = 5;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    grid: RawGrid,
    #[serde(default)]
    field: RawField,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    scene: Vec<Primitive>,
    #[serde(default)]
    measurements: RawMeasurements,
    #[serde(default)]
    noise: RawNoise,
    #[serde(default)]
    svd: RawSvd,
    #[serde(default)]
    sgd: RawSgd,
    initial: Option<InitialShape>,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    min: Vec3,
    max: Vec3,
    counts: [usize; 3],
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    strength: Option<f64>,
    inclination: Option<f64>,
    declination: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kappa0: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasurements {
    x_range: Option<[f64; 2]>,
    y_range: Option<[f64; 2]>,
    z: Option<f64>,
    count: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    eta: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSvd {
    epsilon: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSgd {
    batch_size: Option<usize>,
    epochs: Option<usize>,
    alpha: Option<f64>,
    cfl: Option<f64>,
    band_halfwidth: Option<f64>,
    reinit_iters: Option<usize>,
    seed: Option<u64>,
    drop_alpha: Option<bool>,
    early_stop: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// Starting level set: positive inside the shape.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialShape {
    /// `1 - sqrt(sum ((x - c) / a)^2)`.
    Ellipsoid { center: Vec3, semi_axes: Vec3 },
    /// Signed distance `r - |x - c|`.
    Sphere { center: Vec3, radius: f64 },
}

impl InitialShape {
    pub fn evaluate(&self, grid: &Grid3) -> Vec<f64> {
        match self {
            InitialShape::Ellipsoid { center, semi_axes } => ellipsoid(grid, *center, *semi_axes),
            InitialShape::Sphere { center, radius } => sphere(grid, *center, *radius),
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        let (c, a) = match self {
            InitialShape::Ellipsoid { center, semi_axes } => (center, *semi_axes),
            InitialShape::Sphere { center, radius } => (center, [*radius; 3]),
        };
        (
            [c[0] - a[0], c[1] - a[1], c[2] - a[2]],
            [c[0] + a[0], c[1] + a[1], c[2] + a[2]],
        )
    }

    /// Default guess: ellipsoid centred in the box, filling most of it laterally.
    pub fn default_for(domain: &DomainBox) -> Self {
        let e = domain.extent();
        InitialShape::Ellipsoid {
            center: [
                0.5 * (domain.min[0] + domain.max[0]),
                0.5 * (domain.min[1] + domain.max[1]),
                0.5 * (domain.min[2] + domain.max[2]),
            ],
            semi_axes: [0.35 * e[0], 0.35 * e[1], 0.3 * e[2]],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPlan {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z: f64,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub eta: f64,
    pub seed: u64,
}

/// Validated configuration with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: Grid3,
    pub field: InducingField,
    pub kappa0: f64,
    pub scene: SceneSpec,
    pub measurements: MeasurementPlan,
    pub noise: NoiseConfig,
    pub epsilon_svd: f64,
    pub sgd: SgdConfig,
    pub initial: InitialShape,
    pub output_dir: PathBuf,
}

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

fn check(ok: bool, path: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(cfg_err(path, msg()))
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| cfg_err("", e.message().to_string()))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        cfg_err(
            if path == "." { "" } else { &path },
            e.into_inner().message().to_string(),
        )
    })?;
    resolve(raw)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn resolve(raw: RawConfig) -> Result<RunConfig> {
    let g = raw.grid;
    let domain = DomainBox::new(g.min, g.max).map_err(|e| cfg_err("grid", e.to_string()))?;
    let [nx, ny, nz] = g.counts;
    let grid = Grid3::new(domain, nx, ny, nz).map_err(|e| cfg_err("grid.counts", e.to_string()))?;

    let f = raw.field;
    let strength = f.strength.unwrap_or(DEFAULT_FIELD_STRENGTH);
    check(
        strength > 0.0 && strength.is_finite(),
        "field.strength",
        || format!("must be positive, got {strength}"),
    )?;
    let field = InducingField::new(
        strength,
        f.inclination.unwrap_or(DEFAULT_INCLINATION),
        f.declination.unwrap_or(DEFAULT_DECLINATION),
    );

    let kappa0 = raw.model.kappa0.unwrap_or(DEFAULT_KAPPA0);
    check(kappa0 > 0.0 && kappa0.is_finite(), "model.kappa0", || {
        format!("must be positive, got {kappa0}")
    })?;

    for (k, p) in raw.scene.iter().enumerate() {
        p.validate()
            .map_err(|e| cfg_err(&format!("scene[{k}]"), e.to_string()))?;
    }
    let scene = SceneSpec {
        primitives: raw.scene,
    };

    let m = raw.measurements;
    let measurements = MeasurementPlan {
        x_range: m.x_range.unwrap_or([domain.min[0], domain.max[0]]),
        y_range: m.y_range.unwrap_or([domain.min[1], domain.max[1]]),
        z: m.z.unwrap_or(domain.max[2] + DEFAULT_MEASUREMENT_HEIGHT),
        count: m.count.unwrap_or(DEFAULT_MEASUREMENT_COUNT),
        seed: m.seed.unwrap_or(1),
    };
    check(measurements.z > domain.max[2], "measurements.z", || {
        format!(
            "measurement plane z = {} must lie above the domain top z = {}",
            measurements.z, domain.max[2]
        )
    })?;
    check(measurements.count >= 1, "measurements.count", || {
        "must be >= 1".into()
    })?;
    for (key, r) in [
        ("measurements.x_range", measurements.x_range),
        ("measurements.y_range", measurements.y_range),
    ] {
        check(r[0] <= r[1], key, || {
            format!("range [{}, {}] is inverted", r[0], r[1])
        })?;
    }

    let noise = NoiseConfig {
        eta: raw.noise.eta.unwrap_or(DEFAULT_ETA),
        seed: raw.noise.seed.unwrap_or(2),
    };
    check(
        noise.eta >= 0.0 && noise.eta.is_finite(),
        "noise.eta",
        || format!("must be >= 0, got {}", noise.eta),
    )?;

    let epsilon_svd = raw.svd.epsilon.unwrap_or(DEFAULT_EPSILON_SVD);
    check(
        epsilon_svd >= 0.0 && epsilon_svd.is_finite(),
        "svd.epsilon",
        || format!("must be >= 0, got {epsilon_svd}"),
    )?;

    let s = raw.sgd;
    let sgd = SgdConfig {
        batch_size: s.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
        epochs: s.epochs.unwrap_or(DEFAULT_EPOCHS),
        alpha: s.alpha.unwrap_or(DEFAULT_ALPHA),
        cfl: s.cfl.unwrap_or(DEFAULT_CFL),
        band_halfwidth: s
            .band_halfwidth
            .unwrap_or_else(|| LevelSetField::default_band(&grid)),
        reinit_iters: s.reinit_iters.unwrap_or(DEFAULT_REINIT_ITERS),
        seed: s.seed.unwrap_or(3),
        drop_alpha: s.drop_alpha.unwrap_or(false),
        early_stop: s.early_stop.unwrap_or(false),
    };
    check(sgd.cfl > 0.0 && sgd.cfl < 1.0, "sgd.cfl", || {
        format!("CFL number must lie in (0, 1), got {}", sgd.cfl)
    })?;
    check(sgd.batch_size >= 1, "sgd.batch_size", || {
        "must be >= 1".into()
    })?;
    check(
        sgd.batch_size <= measurements.count,
        "sgd.batch_size",
        || {
            format!(
                "batch size {} exceeds the measurement count {}",
                sgd.batch_size, measurements.count
            )
        },
    )?;
    check(
        sgd.alpha >= 0.0 && sgd.alpha.is_finite(),
        "sgd.alpha",
        || format!("must be >= 0, got {}", sgd.alpha),
    )?;
    check(sgd.band_halfwidth > 0.0, "sgd.band_halfwidth", || {
        format!("must be positive, got {}", sgd.band_halfwidth)
    })?;

    let initial = raw
        .initial
        .unwrap_or_else(|| InitialShape::default_for(&domain));
    match &initial {
        InitialShape::Ellipsoid { semi_axes, .. } => check(
            semi_axes.iter().all(|a| *a > 0.0),
            "initial.semi_axes",
            || "semi-axes must be positive".into(),
        )?,
        InitialShape::Sphere { radius, .. } => check(*radius > 0.0, "initial.radius", || {
            "radius must be positive".into()
        })?,
    }
    let (lo, hi) = initial.bounds();
    check(
        (0..3).all(|a| {
            lo[a] >= domain.min[a] - BOUNDARY_TOL && hi[a] <= domain.max[a] + BOUNDARY_TOL
        }),
        "initial",
        || "initial shape extends outside the domain".into(),
    )?;

    Ok(RunConfig {
        grid,
        field,
        kappa0,
        scene,
        measurements,
        noise,
        epsilon_svd,
        sgd,
        initial,
        output_dir: raw.output.dir.unwrap_or_else(|| PathBuf::from("out")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[grid]
min = [0.0, 0.0, -0.5]
max = [1.0, 1.0, 0.0]
counts = [41, 41, 21]

[[scene]]
kind = "cuboid"
center = [0.75, 0.2, -0.3]
size = [0.15, 0.15, 0.15]
"#;

    fn err_of(text: &str) -> String {
        parse_config(text).unwrap_err().to_string()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.field.strength, 5.95e4);
        assert_eq!(c.kappa0, 0.05);
        assert_eq!(c.noise.eta, 0.05);
        assert_eq!(c.epsilon_svd, 1e-5);
        assert_eq!(c.sgd.batch_size, 200);
        assert_eq!(c.sgd.cfl, 0.5);
        assert_eq!(c.sgd.alpha, 1e-3);
        assert!((c.sgd.band_halfwidth - 1.5 * 0.025).abs() < 1e-15);
        assert_eq!(c.measurements.z, 0.1);
        assert_eq!(c.measurements.count, 10_000);
        assert_eq!(c.scene.primitives.len(), 1);
    }

    #[test]
    fn rejects_bad_values_with_key_path() {
        let e = err_of(&format!("{MINIMAL}\n[sgd]\ncfl = 1.2\n"));
        assert!(e.contains("sgd.cfl"), "{e}");
        let e = err_of(&format!("{MINIMAL}\n[measurements]\nz = -0.1\n"));
        assert!(e.contains("measurements.z"), "{e}");
        let e = err_of(&format!("{MINIMAL}\n[sgd]\nbogus = 1\n"));
        assert!(e.contains("sgd") && e.contains("bogus"), "{e}");
        let e = err_of(&format!("{MINIMAL}\n[sgd]\nbatch_size = \"x\"\n"));
        assert!(e.contains("sgd.batch_size"), "{e}");
        let e = err_of("[field]\nstrength = 1.0\n");
        assert!(e.contains("grid"), "{e}");
        let e = err_of(&format!(
            "{MINIMAL}\n[initial]\nkind = \"sphere\"\ncenter = [0.5, 0.5, -0.1]\nradius = 0.3\n"
        ));
        assert!(e.contains("initial"), "{e}");
    }

    #[test]
    fn explicit_sections() {
        let c = parse_config(&format!(
            "{MINIMAL}
[field]
inclination = 90.0
declination = 0.0
[measurements]
x_range = [-1.0, 2.0]
count = 500
seed = 9
[sgd]
batch_size = 50
drop_alpha = true
[initial]
kind = \"sphere\"
center = [0.5, 0.5, -0.25]
radius = 0.2
[output]
dir = \"results\"
"
        ))
        .unwrap();
        assert!((c.field.direction[2] + 1.0).abs() < 1e-15);
        assert_eq!(c.measurements.x_range, [-1.0, 2.0]);
        assert_eq!(c.measurements.y_range, [0.0, 1.0]);
        assert_eq!(c.measurements.count, 500);
        assert!(c.sgd.drop_alpha);
        assert_eq!(c.output_dir, PathBuf::from("results"));
        assert!(matches!(c.initial, InitialShape::Sphere { .. }));
    }
}
